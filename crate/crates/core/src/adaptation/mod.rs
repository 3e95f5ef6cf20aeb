//! Few-shot adaptation of a source generator to a target domain.

mod discriminator;
mod losses;

pub use discriminator::{DiscriminatorConfig, DiscriminatorOutput, DiscriminatorPair};
pub use losses::{
    cdt_loss, cdt_variant_loss, decoder_total_loss, decoder_total_value, kl_adain_loss, nonsaturating_d_loss,
    nonsaturating_g_loss, triplet_loss, CdtVariant, DistanceMatrix, TripletImages,
};

use std::str::FromStr;

use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::generator::GeneratorState;
use crate::latent::{extend_repeat, ExtendedLatent, LatentCode, LatentSampler};
use crate::nn;
use crate::perceptual::{FeatureBackbone, PerceptualWeights};

/// Finite-difference step of the R1 gradient-norm probe.
pub const R1_PROBE_STEP: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptationConfig {
    pub lambda_adv: f64,
    pub lambda_cdt: f64,
    pub lambda_kl_adain: f64,
    /// Triplet margin.
    pub margin: f64,
    /// Weight on the positive distance.
    pub w_plus: f64,
    /// Latent codes per step.
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub discriminator_learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub anchor_count: usize,
    pub anchor_sigma: f64,
    pub r1_gamma: f64,
    pub r1_interval: usize,
    pub cdt_variant: CdtVariant,
    /// Standard deviation of the latent perturbation used by the noised and
    /// in-domain variants.
    pub perturbation_std: f64,
    pub seed: u64,
    /// Accept more than ten target images.
    pub allow_many_shots: bool,
    /// Checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    /// Preview grid every this many steps; 0 disables.
    pub sample_every: usize,
    pub preview_count: usize,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            lambda_adv: 1.0,
            lambda_cdt: 0.005,
            lambda_kl_adain: 1000.0,
            margin: 2.0,
            w_plus: 2.0,
            batch_size: 8,
            iterations: 1000,
            learning_rate: 0.002,
            discriminator_learning_rate: 0.002,
            beta1: 0.0,
            beta2: 0.99,
            anchor_count: 10,
            anchor_sigma: 0.05,
            r1_gamma: 10.0,
            r1_interval: 16,
            cdt_variant: CdtVariant::Standard,
            perturbation_std: 0.1f64.sqrt(),
            seed: 0,
            allow_many_shots: false,
            checkpoint_every: 0,
            sample_every: 0,
            preview_count: 8,
        }
    }
}

impl AdaptationConfig {
    /// Recipe for one of the artistic target domains.
    pub fn for_domain(domain: TargetDomain) -> Self {
        let mut cfg = Self::default();
        let (lambda_cdt, iterations, w_plus) = domain.recipe();
        cfg.lambda_cdt = lambda_cdt;
        cfg.iterations = iterations;
        cfg.w_plus = w_plus;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_adv", self.lambda_adv), ("lambda_cdt", self.lambda_cdt), ("lambda_kl_adain", self.lambda_kl_adain)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(invalid!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if self.batch_size < 3 {
            return Err(invalid!("batch size must be >= 3, got {}", self.batch_size));
        }
        if !(self.w_plus >= 1.0) {
            return Err(invalid!("w_plus must be >= 1, got {}", self.w_plus));
        }
        if !(self.learning_rate > 0.0) || !(self.discriminator_learning_rate > 0.0) {
            return Err(invalid!("learning rates must be positive"));
        }
        if !(self.anchor_sigma >= 0.0) || !(self.perturbation_std >= 0.0) {
            return Err(invalid!("anchor_sigma and perturbation_std must be >= 0"));
        }
        if self.r1_interval == 0 {
            return Err(invalid!("r1_interval must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetDomain {
    Sketches,
    Raphael,
    Caricature,
    Cat,
    Church,
    Cartoon,
    Lichtenstein,
    Sunglasses,
    OneShot,
}

impl TargetDomain {
    pub const ALL: [TargetDomain; 9] = [
        Self::Sketches,
        Self::Raphael,
        Self::Caricature,
        Self::Cat,
        Self::Church,
        Self::Cartoon,
        Self::Lichtenstein,
        Self::Sunglasses,
        Self::OneShot,
    ];

    /// `(λ_cdt, iterations, w_plus)`.
    pub fn recipe(self) -> (f64, usize, f64) {
        match self {
            Self::Sketches => (0.05, 5000, 1.5),
            Self::Raphael => (0.05, 3000, 2.0),
            Self::Caricature => (0.02, 3000, 2.0),
            Self::Cat | Self::Church => (0.02, 3000, 2.0),
            Self::Cartoon => (0.005, 1000, 2.0),
            Self::Lichtenstein => (0.005, 1250, 2.0),
            Self::Sunglasses => (0.005, 2000, 2.0),
            Self::OneShot => (0.005, 600, 2.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Sketches => "sketches",
            Self::Raphael => "raphael",
            Self::Caricature => "caricature",
            Self::Cat => "cat",
            Self::Church => "church",
            Self::Cartoon => "cartoon",
            Self::Lichtenstein => "lichtenstein",
            Self::Sunglasses => "sunglasses",
            Self::OneShot => "one_shot",
        }
    }
}

impl FromStr for TargetDomain {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|d| d.name() == key)
            .ok_or_else(|| invalid!("unknown target domain `{s}`"))
    }
}

/// Fixed latent codes around which the image-level discriminator applies.
#[derive(Debug, Clone)]
pub struct AnchorRegion {
    anchors: Vec<LatentCode>,
    sigma: f64,
    radius: f64,
}

impl AnchorRegion {
    pub fn new(anchors: Vec<LatentCode>, sigma: f64) -> Result<Self> {
        let dim = anchors.first().map(LatentCode::dim).unwrap_or(0);
        if anchors.iter().any(|a| a.dim() != dim) {
            return Err(invalid!("anchors have mixed dimensions"));
        }
        // A Gaussian draw in d dimensions lies within σ(√d + 8) of its mean
        // except with negligible probability.
        let radius = sigma * ((dim as f64).sqrt() + 8.0) + 1e-6;
        Ok(Self { anchors, sigma, radius })
    }

    pub fn sample(count: usize, sigma: f64, sampler: &mut LatentSampler) -> Result<Self> {
        Self::new((0..count).map(|_| sampler.sample_one()).collect(), sigma)
    }

    pub fn anchors(&self) -> &[LatentCode] {
        &self.anchors
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn contains(&self, z: &LatentCode) -> bool {
        self.anchors.iter().any(|a| {
            a.dim() == z.dim()
                && a.values().iter().zip(z.values()).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt()
                    <= self.radius
        })
    }

    /// `count` codes of the form `anchor_k + δ`; anchors are drawn without
    /// replacement while `count` allows.
    pub fn draw(&self, count: usize, sampler: &mut LatentSampler) -> Result<Vec<LatentCode>> {
        if self.anchors.is_empty() {
            return Err(invalid!("anchor region is empty"));
        }
        let k = self.anchors.len();
        let mut pool: Vec<usize> = (0..k).collect();
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let idx = if count <= k {
                let j = i + sampler.uniform_index(k - i);
                pool.swap(i, j);
                pool[i]
            } else {
                sampler.uniform_index(k)
            };
            let delta = sampler.perturbation(self.sigma);
            out.push(self.anchors[idx].offset(&delta)?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    Image,
    Patch,
}

pub fn route(z: &LatentCode, anchors: &AnchorRegion) -> Route {
    if anchors.contains(z) {
        Route::Image
    } else {
        Route::Patch
    }
}

/// Lazy R1 settings for one discriminator evaluation.
pub struct R1Probe<'a> {
    pub gamma: f64,
    /// Multiplier applied to the penalty (the lazy interval).
    pub scale: f64,
    pub rng: &'a mut ChaCha8Rng,
}

#[derive(Debug)]
pub struct AdversarialLosses {
    pub g_loss: Tensor,
    pub d_loss: Tensor,
    pub routes: Vec<Route>,
    pub r1: Option<f64>,
}

fn per_image_score(out: &DiscriminatorOutput, mask: &Tensor, real_sign: f64) -> Result<Tensor> {
    // softplus(±logit): image term per image, patch term averaged over the grid.
    let img = nn::softplus(&(&out.image * real_sign)?)?;
    let patch = nn::softplus(&(&out.patch * real_sign)?)?.flatten_from(1)?.mean(1)?;
    let keep = mask.ones_like()?.sub(mask)?;
    Ok(((img * mask)? + (patch * keep)?)?)
}

/// Non-saturating losses with image/patch routing. `fake_images` must be the
/// attached output of the generator being trained for `z_batch`; the
/// discriminator loss sees them detached.
pub fn adversarial_losses(
    disc: &DiscriminatorPair,
    fake_images: &Tensor,
    z_batch: &[LatentCode],
    real_images: &Tensor,
    anchors: &AnchorRegion,
    r1: Option<R1Probe<'_>>,
) -> Result<AdversarialLosses> {
    let real_count = real_images.dim(0)?;
    if real_count == 0 {
        return Err(invalid!("no real images"));
    }
    let b = fake_images.dim(0)?;
    if z_batch.len() != b {
        return Err(invalid!("{} latent codes for {b} fake images", z_batch.len()));
    }
    let routes: Vec<Route> = z_batch.iter().map(|z| route(z, anchors)).collect();
    let dtype = fake_images.dtype();
    let dev = fake_images.device();
    let flags: Vec<f64> = routes.iter().map(|r| if *r == Route::Image { 1.0 } else { 0.0 }).collect();
    let image_frac = flags.iter().sum::<f64>() / b as f64;
    let mask = Tensor::new(flags, dev)?.to_dtype(dtype)?;

    let g_out = disc.forward(fake_images)?;
    // -logit through softplus: non-saturating generator loss.
    let g_loss = per_image_score(&g_out, &mask, -1.0)?.mean_all()?;

    let d_fake = disc.forward(&fake_images.detach())?;
    let fake_term = per_image_score(&d_fake, &mask, 1.0)?.mean_all()?;

    let real = real_images.to_dtype(dtype)?;
    let d_real = disc.forward(&real)?;
    let real_mask = Tensor::full(image_frac, real_count, dev)?.to_dtype(dtype)?;
    let real_term = per_image_score(&d_real, &real_mask, -1.0)?.mean_all()?;
    let mut d_loss = (fake_term + real_term)?;

    let mut r1_value = None;
    if let Some(probe) = r1 {
        let score = |out: &DiscriminatorOutput| -> Result<Tensor> {
            let patch = out.patch.flatten_from(1)?.mean(1)?;
            Ok(((&out.image * image_frac)? + (patch * (1.0 - image_frac))?)?)
        };
        let eta = nn::randn(probe.rng, real.dims(), 1.0, dev)?.to_dtype(dtype)?;
        let shifted = disc.forward(&(&real + (eta * R1_PROBE_STEP)?)?)?;
        // ((s(x + hη) − s(x)) / h)² estimates ‖∇ₓ s‖² in expectation over η.
        let dir = ((score(&shifted)? - score(&d_real)?)? / R1_PROBE_STEP)?;
        let penalty = dir.sqr()?.mean_all()?;
        r1_value = Some(nn::scalar_f64(&penalty)?);
        d_loss = (d_loss + (penalty * (0.5 * probe.gamma * probe.scale))?)?;
    }
    Ok(AdversarialLosses { g_loss, d_loss, routes, r1: r1_value })
}

/// One line of the loss curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub adv: f64,
    pub cdt: f64,
    pub kl_adain: f64,
    pub total: f64,
    pub d_loss: f64,
}

/// Receives training progress. Every method defaults to doing nothing.
pub trait AdaptObserver {
    fn record(&mut self, _record: &StepRecord) -> Result<()> {
        Ok(())
    }

    fn checkpoint(&mut self, _step: usize, _generator: &GeneratorState, _disc: &DiscriminatorPair) -> Result<()> {
        Ok(())
    }

    /// `images` is `(B, C, H, W)` in `[-1, 1]`.
    fn samples(&mut self, _step: usize, _images: &Tensor) -> Result<()> {
        Ok(())
    }
}

pub struct NoopObserver;

impl AdaptObserver for NoopObserver {}

pub struct AdaptContext<'a> {
    pub backbone: &'a dyn FeatureBackbone,
    pub weights: &'a PerceptualWeights,
    /// Source-domain discriminator to start from.
    pub discriminator: Option<DiscriminatorPair>,
    pub observer: &'a mut dyn AdaptObserver,
}

pub struct AdaptOutcome {
    pub generator: GeneratorState,
    pub discriminator: DiscriminatorPair,
    pub history: Vec<StepRecord>,
}

fn check_targets(source: &GeneratorState, target_images: &Tensor, cfg: &AdaptationConfig) -> Result<usize> {
    let (k, c, h, w) = target_images.dims4().map_err(|_| invalid!("target images must be (K, C, H, W)"))?;
    let res = source.resolution();
    if h != res || w != res {
        return Err(invalid!("target images are {h}x{w}, generator resolution is {res}"));
    }
    if c != source.config().image_channels {
        return Err(invalid!("target images have {c} channels, generator has {}", source.config().image_channels));
    }
    if k == 0 || (k > 10 && !cfg.allow_many_shots) {
        return Err(invalid!("expected 1 to 10 target images, got {k}"));
    }
    Ok(k)
}

fn codes_to_zplus(codes: &[LatentCode], n: usize, source: &GeneratorState) -> Result<Tensor> {
    let ext: Vec<ExtendedLatent> = codes.iter().map(|z| extend_repeat(z, n)).collect::<Result<_>>()?;
    ExtendedLatent::batch_to_tensor(&ext, source.dtype(), source.device())
}

/// Adapts a copy of `source` to the target images. `source` is never
/// modified and the copy's mapping network stays frozen.
pub fn adapt(
    source: &GeneratorState,
    target_images: &Tensor,
    cfg: &AdaptationConfig,
    ctx: AdaptContext<'_>,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    check_targets(source, target_images, cfg)?;
    let gcfg = source.config();
    let n = gcfg.n();
    let dtype = source.dtype();
    let frozen_source = source.frozen_view();
    let target = source.clone_for_adaptation()?;
    let disc = match ctx.discriminator {
        Some(d) => d.deep_clone()?.to_dtype(dtype)?,
        None => DiscriminatorPair::new(
            DiscriminatorConfig::toy(gcfg.resolution, gcfg.image_channels),
            cfg.seed ^ 0xD15C,
            dtype,
            source.device(),
        )?,
    };
    let real = target_images.to_dtype(dtype)?.to_device(source.device())?;

    let mut sampler = LatentSampler::new(cfg.seed, gcfg.latent_dim);
    let anchors = AnchorRegion::sample(cfg.anchor_count, cfg.anchor_sigma, &mut sampler)?;
    let preview = sampler.sample(cfg.preview_count.max(1))?;
    let mut r1_rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.seed.wrapping_add(0x51));

    let adam = |lr| ParamsAdamW { lr, beta1: cfg.beta1, beta2: cfg.beta2, eps: 1e-8, weight_decay: 0.0 };
    let mut opt_g = AdamW::new(target.trainable_vars(), adam(cfg.learning_rate))?;
    let mut opt_d = AdamW::new(disc.trainable_vars(), adam(cfg.discriminator_learning_rate))?;

    let mut history = Vec::with_capacity(cfg.iterations);
    for step in 0..cfg.iterations {
        let anchor_step = !anchors.is_empty() && step % 2 == 0;
        let codes = if anchor_step {
            anchors.draw(cfg.batch_size, &mut sampler)?
        } else {
            sampler.sample(cfg.batch_size)?
        };
        let zp = codes_to_zplus(&codes, n, source)?;
        let out_t = target.synthesize(&zp)?;
        let out_s = frozen_source.synthesize(&zp)?;

        let r1 = (step % cfg.r1_interval == 0 && cfg.r1_gamma > 0.0).then(|| R1Probe {
            gamma: cfg.r1_gamma,
            scale: cfg.r1_interval as f64,
            rng: &mut r1_rng,
        });
        let adv = adversarial_losses(&disc, &out_t.images, &codes, &real, &anchors, r1)?;

        let perturbed = if cfg.cdt_variant.needs_perturbed() {
            let shifted: Vec<LatentCode> = codes
                .iter()
                .map(|z| z.offset(&sampler.perturbation(cfg.perturbation_std)))
                .collect::<Result<_>>()?;
            Some(target.synthesize(&codes_to_zplus(&shifted, n, source)?)?.images)
        } else {
            None
        };
        let images = TripletImages { source: &out_s.images, target: &out_t.images, target_perturbed: perturbed.as_ref() };
        let cdt = cdt_variant_loss(cfg.cdt_variant, images, ctx.backbone, ctx.weights, cfg.margin, cfg.w_plus)?;
        let kl = kl_adain_loss(&out_s.trace, &out_t.trace)?;
        let total = decoder_total_loss(&adv.g_loss, &cdt, &kl, cfg)?;

        let record = StepRecord {
            step,
            adv: nn::scalar_f64(&adv.g_loss)?,
            cdt: nn::scalar_f64(&cdt)?,
            kl_adain: nn::scalar_f64(&kl)?,
            total: nn::scalar_f64(&total)?,
            d_loss: nn::scalar_f64(&adv.d_loss)?,
        };
        nn::ensure_finite(&adv.d_loss, "discriminator loss")?;

        let g_grads = total.backward()?;
        let d_grads = adv.d_loss.backward()?;
        opt_g.step(&g_grads)?;
        opt_d.step(&d_grads)?;

        ctx.observer.record(&record)?;
        history.push(record);
        let done = step + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            ctx.observer.checkpoint(done, &target, &disc)?;
        }
        if cfg.sample_every > 0 && done % cfg.sample_every == 0 {
            let imgs = target.synthesize(&codes_to_zplus(&preview, n, source)?)?.images.detach();
            ctx.observer.samples(done, &imgs)?;
        }
    }
    if !target.synthesis().all_finite()? {
        return Err(crate::error::numeric!("adapted generator has non-finite parameters"));
    }
    Ok(AdaptOutcome { generator: target, discriminator: disc, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::GeneratorConfig;
    use crate::perceptual::ConvBackbone;
    use candle_core::{DType, Device};

    fn toy_source() -> GeneratorState {
        GeneratorState::new(GeneratorConfig::toy(8, 8), 1, DType::F32, &Device::Cpu).unwrap()
    }

    #[test]
    fn domain_recipes() {
        let cartoon = AdaptationConfig::for_domain(TargetDomain::Cartoon);
        assert_eq!((cartoon.lambda_cdt, cartoon.iterations, cartoon.w_plus), (0.005, 1000, 2.0));
        assert_eq!(cartoon.learning_rate, 0.002);
        assert_eq!(cartoon.margin, 2.0);
        let sketches = AdaptationConfig::for_domain(TargetDomain::Sketches);
        assert_eq!((sketches.lambda_cdt, sketches.iterations, sketches.w_plus), (0.05, 5000, 1.5));
        assert_eq!("one-shot".parse::<TargetDomain>().unwrap(), TargetDomain::OneShot);
        assert!("mars".parse::<TargetDomain>().is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = AdaptationConfig::default();
        cfg.batch_size = 2;
        assert!(cfg.validate().is_err());
        let mut cfg = AdaptationConfig::default();
        cfg.lambda_cdt = -1.0;
        assert!(cfg.validate().is_err());
        let text = serde_json::to_string(&AdaptationConfig::default()).unwrap();
        assert_eq!(serde_json::from_str::<AdaptationConfig>(&text).unwrap(), AdaptationConfig::default());
    }

    #[test]
    fn routing_by_anchor_membership() {
        let mut s = LatentSampler::new(3, 8);
        let region = AnchorRegion::sample(4, 0.0, &mut s).unwrap();
        let exact = region.anchors()[2].clone();
        assert_eq!(route(&exact, &region), Route::Image);
        assert_eq!(route(&s.sample_one(), &region), Route::Patch);

        let loose = AnchorRegion::sample(10, 0.05, &mut s).unwrap();
        for z in loose.draw(40, &mut s).unwrap() {
            assert_eq!(route(&z, &loose), Route::Image);
        }
        for z in s.sample(40).unwrap() {
            assert_eq!(route(&z, &loose), Route::Patch);
        }
    }

    #[test]
    fn anchor_draw_without_replacement() {
        let mut s = LatentSampler::new(9, 4);
        let region = AnchorRegion::sample(5, 0.0, &mut s).unwrap();
        let drawn = region.draw(5, &mut s).unwrap();
        for a in region.anchors() {
            assert_eq!(drawn.iter().filter(|z| z == &a).count(), 1);
        }
    }

    #[test]
    fn every_code_scored_once() {
        let g = toy_source();
        let d = DiscriminatorPair::new(DiscriminatorConfig::toy(8, 3), 0, DType::F32, &Device::Cpu).unwrap();
        let mut s = LatentSampler::new(1, 8);
        let region = AnchorRegion::sample(3, 0.05, &mut s).unwrap();
        let mut codes = region.draw(2, &mut s).unwrap();
        codes.extend(s.sample(3).unwrap());
        let imgs = g.synthesize(&codes_to_zplus(&codes, g.n(), &g).unwrap()).unwrap().images;
        let real = imgs.narrow(0, 0, 2).unwrap().detach();
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let probe = R1Probe { gamma: 10.0, scale: 1.0, rng: &mut rng };
        let out = adversarial_losses(&d, &imgs, &codes, &real, &region, Some(probe)).unwrap();
        assert_eq!(out.routes, vec![Route::Image, Route::Image, Route::Patch, Route::Patch, Route::Patch]);
        assert!(out.r1.unwrap() >= 0.0);
        assert!(nn::scalar_f64(&out.d_loss).unwrap().is_finite());

        let empty = Tensor::zeros((0, 3, 8, 8), DType::F32, &Device::Cpu).unwrap();
        assert!(adversarial_losses(&d, &imgs, &codes, &empty, &region, None).is_err());
    }

    #[test]
    fn zero_iterations_is_identity() {
        let g = toy_source();
        let b = ConvBackbone::toy(3, 0, DType::F32, &Device::Cpu).unwrap();
        let w = PerceptualWeights::unit(5);
        let targets = Tensor::zeros((2, 3, 8, 8), DType::F32, &Device::Cpu).unwrap();
        let mut cfg = AdaptationConfig::default();
        cfg.iterations = 0;
        let ctx = AdaptContext { backbone: &b, weights: &w, discriminator: None, observer: &mut NoopObserver };
        let out = adapt(&g, &targets, &cfg, ctx).unwrap();
        let z = codes_to_zplus(&LatentSampler::new(5, 8).sample(3).unwrap(), g.n(), &g).unwrap();
        let a: Vec<f32> = g.synthesize(&z).unwrap().images.flatten_all().unwrap().to_vec1().unwrap();
        let c: Vec<f32> = out.generator.synthesize(&z).unwrap().images.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn few_steps_keep_source_and_mapping() {
        let g = toy_source();
        let before = (g.checksum().unwrap(), g.mapping_checksum().unwrap());
        let b = ConvBackbone::toy(3, 0, DType::F32, &Device::Cpu).unwrap();
        let w = PerceptualWeights::unit(5);
        let mut s = LatentSampler::new(2, 8);
        let targets = g.synthesize(&codes_to_zplus(&s.sample(3).unwrap(), g.n(), &g).unwrap()).unwrap().images.neg().unwrap();
        let mut cfg = AdaptationConfig::default();
        cfg.iterations = 3;
        cfg.batch_size = 4;
        cfg.r1_interval = 2;
        cfg.cdt_variant = CdtVariant::InDomain;
        let ctx = AdaptContext { backbone: &b, weights: &w, discriminator: None, observer: &mut NoopObserver };
        let out = adapt(&g, &targets, &cfg, ctx).unwrap();
        assert_eq!(out.history.len(), 3);
        assert_eq!((g.checksum().unwrap(), g.mapping_checksum().unwrap()), before);
        assert_eq!(out.generator.mapping_checksum().unwrap(), before.1);
        assert_ne!(out.generator.synthesis().checksum().unwrap(), g.synthesis().checksum().unwrap());
    }

    #[test]
    fn rejects_bad_targets() {
        let g = toy_source();
        let b = ConvBackbone::toy(3, 0, DType::F32, &Device::Cpu).unwrap();
        let w = PerceptualWeights::unit(5);
        let cfg = AdaptationConfig::default();
        for shape in [(2, 3, 16, 16), (11, 3, 8, 8), (2, 1, 8, 8)] {
            let t = Tensor::zeros(shape, DType::F32, &Device::Cpu).unwrap();
            let ctx = AdaptContext { backbone: &b, weights: &w, discriminator: None, observer: &mut NoopObserver };
            assert!(matches!(adapt(&g, &t, &cfg, ctx), Err(crate::Error::InvalidArgument(_))));
        }
    }
}
