//! Feature backbones and the perceptual / identity distances built on them.
//!
//! Backbones are VGG-style stacks of 3×3 conv stages with a feature tap at the
//! end of every stage. The same type serves the seeded toy backbone used by
//! tests and imported classifier weights (see `ConvBackbone::from_store`).
//!
//! Tensor-naming contract for imported backbones:
//!
//! * `stage{s}.conv{j}.weight` is `[out, in, 3, 3]`, `stage{s}.conv{j}.bias` is `[out]`
//! * optional `input.shift` / `input.scale` is `[in_channels]`, applied as
//!   `(x − shift) / scale` before the first stage
//!
//! Stage `s > 0` starts with a 2× pooling (skipped once the grid is 1×1).

use candle_core::{DType, Device, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, numeric, Result};
use crate::nn::{self, ParamStore};

/// LPIPS-style channel normalization epsilon.
const NORM_EPS: f64 = 1e-10;

/// 0-based index of the tap dropped by [`modified_lpips`] (the 4th of 5).
pub const OMITTED_TAP: usize = 3;

pub trait FeatureBackbone: Send + Sync {
    /// Ordered feature taps for a `(B, C, H, W)` batch.
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>>;

    fn tap_channels(&self) -> Vec<usize>;

    fn num_taps(&self) -> usize {
        self.tap_channels().len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Avg,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Output channels of every conv, grouped by stage.
    pub stages: Vec<Vec<usize>>,
    pub activation_slope: f64,
    pub pooling: Pooling,
    pub normalize_input: bool,
}

impl BackboneConfig {
    /// Five single-conv stages with leaky activations and average pooling.
    pub fn toy(in_channels: usize) -> Self {
        Self {
            in_channels,
            stages: vec![vec![8], vec![16], vec![16], vec![32], vec![32]],
            activation_slope: 0.2,
            pooling: Pooling::Avg,
            normalize_input: false,
        }
    }

    /// The VGG16 convolutional trunk, tapped after conv1_2 … conv5_3.
    pub fn vgg16() -> Self {
        Self {
            in_channels: 3,
            stages: vec![
                vec![64, 64],
                vec![128, 128],
                vec![256, 256, 256],
                vec![512, 512, 512],
                vec![512, 512, 512],
            ],
            activation_slope: 0.0,
            pooling: Pooling::Max,
            normalize_input: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvBackbone {
    config: BackboneConfig,
    store: ParamStore,
}

impl ConvBackbone {
    /// Fixed-seed randomly initialized toy backbone.
    pub fn toy(in_channels: usize, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        Self::random(BackboneConfig::toy(in_channels), seed, dtype, device)
    }

    pub fn random(config: BackboneConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        if config.stages.is_empty() || config.stages.iter().any(Vec::is_empty) {
            return Err(invalid!("backbone needs at least one conv per stage"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(dtype, device);
        let mut ch = config.in_channels;
        for (s, stage) in config.stages.iter().enumerate() {
            for (j, &out) in stage.iter().enumerate() {
                nn::init_conv(&mut store, &mut rng, &format!("stage{s}.conv{j}"), ch, out, 3, 2f64.sqrt())?;
                ch = out;
            }
        }
        if config.normalize_input {
            store.insert("input.shift", Tensor::zeros(config.in_channels, DType::F64, device)?)?;
            store.insert("input.scale", Tensor::ones(config.in_channels, DType::F64, device)?)?;
        }
        store.set_frozen(true);
        Ok(Self { config, store })
    }

    /// Wraps externally supplied weights that follow the naming contract in
    /// the module docs.
    pub fn from_store(config: BackboneConfig, mut store: ParamStore) -> Result<Self> {
        let reference = Self::random(config.clone(), 0, store.dtype(), store.device())?;
        for name in reference.store.names() {
            let have = store.get(name)?;
            let want = reference.store.get(name)?;
            if have.dims() != want.dims() {
                return Err(invalid!("backbone tensor `{name}` has shape {:?}, expected {:?}", have.dims(), want.dims()));
            }
        }
        store.set_frozen(true);
        Ok(Self { config, store })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let mut store = self.store.to_dtype(dtype)?;
        store.set_frozen(true);
        Ok(Self { config: self.config.clone(), store })
    }
}

impl FeatureBackbone for ConvBackbone {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.config.in_channels {
            return Err(invalid!("backbone expects {} channels, got {c}", self.config.in_channels));
        }
        let mut h = x.to_dtype(self.dtype())?;
        if self.config.normalize_input {
            let shift = self.store.get("input.shift")?.reshape((1, c, 1, 1))?;
            let scale = self.store.get("input.scale")?.reshape((1, c, 1, 1))?;
            h = h.broadcast_sub(&shift)?.broadcast_div(&scale)?;
        }
        let mut taps = Vec::with_capacity(self.config.stages.len());
        for (s, stage) in self.config.stages.iter().enumerate() {
            let (_, _, hh, ww) = h.dims4()?;
            if s > 0 && hh >= 2 && ww >= 2 {
                h = match self.config.pooling {
                    Pooling::Avg => h.avg_pool2d(2)?,
                    Pooling::Max => h.max_pool2d(2)?,
                };
            }
            for j in 0..stage.len() {
                h = nn::conv2d(&self.store, &format!("stage{s}.conv{j}"), &h, 1)?;
                h = if self.config.activation_slope == 0.0 { h.relu()? } else { nn::leaky_relu(&h, self.config.activation_slope)? };
            }
            taps.push(h.clone());
        }
        Ok(taps)
    }

    fn tap_channels(&self) -> Vec<usize> {
        self.config.stages.iter().map(|s| *s.last().unwrap()).collect()
    }
}

pub const TOY_TAP_WEIGHT: f64 = 0.1;

/// Nonnegative per-tap LPIPS weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerceptualWeights(Vec<f64>);

impl PerceptualWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(invalid!("perceptual weights must be finite and >= 0"));
        }
        if !weights.iter().any(|&w| w > 0.0) {
            return Err(invalid!("at least one perceptual weight must be positive"));
        }
        Ok(Self(weights))
    }

    pub fn unit(taps: usize) -> Self {
        Self(vec![1.0; taps])
    }

    /// Uniform weights for an untrained backbone, scaled so distances between
    /// unrelated images land near 0.1 to 0.7 like the learned metric. That
    /// keeps a triplet margin of 2 in the same always-active regime.
    pub fn toy(taps: usize) -> Self {
        Self(vec![TOY_TAP_WEIGHT; taps])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Copy with tap `idx` zeroed. Not validated: the result may be all-zero.
    pub fn with_zeroed(&self, idx: usize) -> Self {
        let mut w = self.0.clone();
        if idx < w.len() {
            w[idx] = 0.0;
        }
        Self(w)
    }
}

/// Divides every spatial feature vector by its channel norm.
pub fn normalize_channels(f: &Tensor) -> Result<Tensor> {
    let norm = f.sqr()?.sum_keepdim(1)?.sqrt()?;
    Ok(f.broadcast_div(&(norm + NORM_EPS)?)?)
}

fn check_weights(weights: &PerceptualWeights, taps: usize) -> Result<()> {
    if weights.len() != taps {
        return Err(invalid!("{} perceptual weights for a backbone with {taps} taps", weights.len()));
    }
    Ok(())
}

/// Per-sample distance between two already-extracted feature stacks.
pub fn lpips_from_features(fx: &[Tensor], fy: &[Tensor], weights: &PerceptualWeights) -> Result<Tensor> {
    check_weights(weights, fx.len())?;
    if fx.len() != fy.len() {
        return Err(invalid!("feature stacks differ in tap count"));
    }
    let mut total: Option<Tensor> = None;
    for ((a, b), &w) in fx.iter().zip(fy).zip(weights.as_slice()) {
        if w == 0.0 {
            continue;
        }
        if a.dims() != b.dims() {
            return Err(invalid!("feature shapes {:?} and {:?} differ", a.dims(), b.dims()));
        }
        let d = (normalize_channels(a)? - normalize_channels(b)?)?
            .sqr()?
            .sum(1)?
            .flatten_from(1)?
            .mean(D::Minus1)?;
        let term = (d * w)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    total.ok_or_else(|| invalid!("all perceptual weights are zero"))
}

/// Weighted sum over taps of the spatially averaged squared distance between
/// channel-normalized features; one value per sample.
pub fn lpips(x: &Tensor, y: &Tensor, backbone: &dyn FeatureBackbone, weights: &PerceptualWeights) -> Result<Tensor> {
    if x.dims() != y.dims() {
        return Err(invalid!("lpips inputs differ in shape: {:?} vs {:?}", x.dims(), y.dims()));
    }
    check_weights(weights, backbone.num_taps())?;
    let fx = backbone.features(x)?;
    let fy = backbone.features(y)?;
    lpips_from_features(&fx, &fy, weights)
}

fn modified_weights(backbone: &dyn FeatureBackbone, weights: &PerceptualWeights) -> Result<PerceptualWeights> {
    if backbone.num_taps() < 5 {
        return Err(invalid!("modified LPIPS needs >= 5 backbone taps, got {}", backbone.num_taps()));
    }
    Ok(weights.with_zeroed(OMITTED_TAP))
}

/// [`lpips`] with the 4th tap (1-based) dropped.
pub fn modified_lpips(
    x: &Tensor,
    y: &Tensor,
    backbone: &dyn FeatureBackbone,
    weights: &PerceptualWeights,
) -> Result<Tensor> {
    let w = modified_weights(backbone, weights)?;
    lpips(x, y, backbone, &w)
}

/// `(M, N)` matrix of LPIPS distances between every `xs[i]` and `ys[j]`,
/// computing each image's features once.
pub fn pairwise_lpips(
    xs: &Tensor,
    ys: &Tensor,
    backbone: &dyn FeatureBackbone,
    weights: &PerceptualWeights,
) -> Result<Tensor> {
    check_weights(weights, backbone.num_taps())?;
    let (m, n) = (xs.dim(0)?, ys.dim(0)?);
    let fx = backbone.features(xs)?;
    let fy = backbone.features(ys)?;
    let mut total: Option<Tensor> = None;
    for ((a, b), &w) in fx.iter().zip(&fy).zip(weights.as_slice()) {
        if w == 0.0 {
            continue;
        }
        let (_, c, h, wd) = a.dims4()?;
        let na = normalize_channels(a)?.reshape((m, 1, c, h * wd))?;
        let nb = normalize_channels(b)?.reshape((1, n, c, h * wd))?;
        let d = na.broadcast_sub(&nb)?.sqr()?.sum(2)?.mean(D::Minus1)?;
        let term = (d * w)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    total.ok_or_else(|| invalid!("all perceptual weights are zero"))
}

/// Pairwise distance matrix under the modified (4th tap dropped) LPIPS.
pub fn pairwise_modified_lpips(
    xs: &Tensor,
    ys: &Tensor,
    backbone: &dyn FeatureBackbone,
    weights: &PerceptualWeights,
) -> Result<Tensor> {
    let w = modified_weights(backbone, weights)?;
    pairwise_lpips(xs, ys, backbone, &w)
}

pub trait IdentityEmbedder: Send + Sync {
    /// Un-normalized embeddings, `(B, E)`.
    fn embed_raw(&self, x: &Tensor) -> Result<Tensor>;

    /// Unit-norm embeddings; fails on a zero-norm embedding.
    fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let raw = self.embed_raw(x)?;
        let norm = raw.sqr()?.sum_keepdim(1)?.sqrt()?;
        let min = norm.to_dtype(DType::F64)?.flatten_all()?.min(0)?.to_scalar::<f64>()?;
        if !(min > 1e-12) {
            return Err(numeric!("identity embedding has zero norm"));
        }
        Ok(raw.broadcast_div(&norm)?)
    }
}

/// Fixed random projection of average-pooled pixels.
#[derive(Debug, Clone)]
pub struct ToyIdentityEmbedder {
    projection: Tensor,
    grid: usize,
}

impl ToyIdentityEmbedder {
    pub fn new(channels: usize, grid: usize, dim: usize, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = channels * grid * grid;
        let projection = nn::randn(&mut rng, &[input, dim], 1.0 / (input as f64).sqrt(), device)?.to_dtype(dtype)?;
        Ok(Self { projection, grid })
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self { projection: self.projection.to_dtype(dtype)?, grid: self.grid })
    }
}

impl IdentityEmbedder for ToyIdentityEmbedder {
    fn embed_raw(&self, x: &Tensor) -> Result<Tensor> {
        let (b, _, h, w) = x.dims4()?;
        if h % self.grid != 0 || w % self.grid != 0 || h < self.grid {
            return Err(invalid!("{h}x{w} images cannot be pooled to a {0}x{0} grid", self.grid));
        }
        let pooled = x.to_dtype(self.projection.dtype())?.avg_pool2d((h / self.grid, w / self.grid))?;
        let flat = pooled.reshape((b, ()))?;
        if flat.dim(1)? != self.projection.dim(0)? {
            return Err(invalid!("identity embedder expects {} inputs per image, got {}", self.projection.dim(0)?, flat.dim(1)?));
        }
        Ok(flat.matmul(&self.projection)?)
    }
}

/// `1 − cos(e(x), e(y))` per sample.
pub fn identity_distance(x: &Tensor, y: &Tensor, embedder: &dyn IdentityEmbedder) -> Result<Tensor> {
    if x.dims() != y.dims() {
        return Err(invalid!("identity inputs differ in shape"));
    }
    let ex = embedder.embed(x)?;
    let ey = embedder.embed(y)?;
    Ok(((ex * ey)?.sum(1)?.neg()? + 1.0)?)
}

/// Mean squared deviation of a Z+ batch from the origin.
pub fn latent_regularizer(z: &Tensor) -> Result<Tensor> {
    Ok(z.sqr()?.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(seed: u64, b: usize, hw: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        nn::randn(&mut rng, &[b, 3, hw, hw], 0.5, &Device::Cpu).unwrap()
    }

    fn backbone() -> ConvBackbone {
        ConvBackbone::toy(3, 7, DType::F64, &Device::Cpu).unwrap()
    }

    fn v(t: &Tensor) -> Vec<f64> {
        t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn identity_and_symmetry() {
        let b = backbone();
        let w = PerceptualWeights::unit(5);
        let x = images(1, 3, 8);
        let y = images(2, 3, 8);
        assert!(v(&lpips(&x, &x, &b, &w).unwrap()).iter().all(|&d| d == 0.0));
        let xy = v(&lpips(&x, &y, &b, &w).unwrap());
        let yx = v(&lpips(&y, &x, &b, &w).unwrap());
        for (a, c) in xy.iter().zip(&yx) {
            assert!(*a > 0.0);
            assert!((a - c).abs() < 1e-7);
        }
    }

    /// Two-tap backbone on 4×4 images against explicit loops.
    #[test]
    fn two_tap_brute_force_oracle() {
        let mut cfg = BackboneConfig::toy(3);
        cfg.stages = vec![vec![4], vec![5]];
        let b = ConvBackbone::random(cfg, 3, DType::F64, &Device::Cpu).unwrap();
        let w = PerceptualWeights::new(vec![0.7, 1.3]).unwrap();
        let x = images(4, 2, 4);
        let y = images(5, 2, 4);
        let got = v(&lpips(&x, &y, &b, &w).unwrap());

        let fx = b.features(&x).unwrap();
        let fy = b.features(&y).unwrap();
        for s in 0..2 {
            let mut want = 0.0;
            for (k, wk) in w.as_slice().iter().enumerate() {
                let a: Vec<Vec<Vec<f64>>> = fx[k].get(s).unwrap().to_vec3().unwrap();
                let c: Vec<Vec<Vec<f64>>> = fy[k].get(s).unwrap().to_vec3().unwrap();
                let (ch, h, wd) = (a.len(), a[0].len(), a[0][0].len());
                let mut acc = 0.0;
                for i in 0..h {
                    for j in 0..wd {
                        let na: f64 = (0..ch).map(|q| a[q][i][j].powi(2)).sum::<f64>().sqrt() + NORM_EPS;
                        let nc: f64 = (0..ch).map(|q| c[q][i][j].powi(2)).sum::<f64>().sqrt() + NORM_EPS;
                        acc += (0..ch).map(|q| (a[q][i][j] / na - c[q][i][j] / nc).powi(2)).sum::<f64>();
                    }
                }
                want += wk * acc / (h * wd) as f64;
            }
            assert!((got[s] - want).abs() < 1e-12, "{} vs {want}", got[s]);
        }
    }

    #[test]
    fn modified_drops_fourth_tap() {
        let b = backbone();
        let w = PerceptualWeights::new(vec![1.0, 0.5, 2.0, 3.0, 1.5]).unwrap();
        let x = images(6, 4, 8);
        let y = images(7, 4, 8);
        let m = v(&modified_lpips(&x, &y, &b, &w).unwrap());
        let zeroed = w.with_zeroed(3);
        let l = v(&lpips(&x, &y, &b, &zeroed).unwrap());
        for (a, c) in m.iter().zip(&l) {
            assert!((a - c).abs() < 1e-7);
        }
        // Already zero at tap 4: modified and plain agree.
        let l2 = v(&modified_lpips(&x, &y, &b, &zeroed).unwrap());
        assert_eq!(l, l2);
        assert!(v(&modified_lpips(&x, &x, &b, &w).unwrap()).iter().all(|&d| d == 0.0));
    }

    #[test]
    fn modified_needs_five_taps() {
        let mut cfg = BackboneConfig::toy(3);
        cfg.stages.truncate(4);
        let b = ConvBackbone::random(cfg, 0, DType::F64, &Device::Cpu).unwrap();
        let x = images(1, 1, 8);
        let r = modified_lpips(&x, &x, &b, &PerceptualWeights::unit(4));
        assert!(matches!(r, Err(crate::Error::InvalidArgument(_))));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let b = backbone();
        let r = lpips(&images(1, 2, 8), &images(1, 3, 8), &b, &PerceptualWeights::unit(5));
        assert!(matches!(r, Err(crate::Error::InvalidArgument(_))));
    }

    #[test]
    fn pairwise_matches_per_pair() {
        let b = backbone();
        let w = PerceptualWeights::unit(5);
        let xs = images(8, 3, 8);
        let ys = images(9, 2, 8);
        let m: Vec<Vec<f64>> = pairwise_lpips(&xs, &ys, &b, &w).unwrap().to_vec2().unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let d = v(&lpips(&xs.narrow(0, i, 1).unwrap(), &ys.narrow(0, j, 1).unwrap(), &b, &w).unwrap())[0];
                assert!((m[i][j] - d).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weights_validation() {
        assert!(PerceptualWeights::new(vec![0.0, 0.0]).is_err());
        assert!(PerceptualWeights::new(vec![1.0, -0.1]).is_err());
        assert!(PerceptualWeights::new(vec![0.0, 2.0]).is_ok());
    }

    #[test]
    fn identity_distance_cases() {
        let e = ToyIdentityEmbedder::new(3, 4, 16, 1, DType::F64, &Device::Cpu).unwrap();
        let x = images(1, 2, 8);
        let y = images(2, 2, 8);
        assert!(v(&identity_distance(&x, &x, &e).unwrap()).iter().all(|d| d.abs() < 1e-12));

        let ex: Vec<Vec<f64>> = e.embed_raw(&x).unwrap().to_vec2().unwrap();
        let ey: Vec<Vec<f64>> = e.embed_raw(&y).unwrap().to_vec2().unwrap();
        let got = v(&identity_distance(&x, &y, &e).unwrap());
        for s in 0..2 {
            let dot: f64 = ex[s].iter().zip(&ey[s]).map(|(a, b)| a * b).sum();
            let na: f64 = ex[s].iter().map(|a| a * a).sum::<f64>().sqrt();
            let nb: f64 = ey[s].iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!((got[s] - (1.0 - dot / (na * nb))).abs() < 1e-12);
            assert!((0.0..=2.0).contains(&got[s]));
        }
        let unit = e.embed(&x).unwrap().sqr().unwrap().sum(1).unwrap();
        assert!(v(&unit).iter().all(|n| (n - 1.0).abs() < 1e-5));

        let zero = Tensor::zeros((1, 3, 8, 8), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(identity_distance(&zero, &zero, &e), Err(crate::Error::NumericFailure(_))));
    }

    /// Orthogonal embeddings sit at distance one.
    #[test]
    fn orthogonal_embeddings_distance_one() {
        struct Fixed;
        impl IdentityEmbedder for Fixed {
            fn embed_raw(&self, x: &Tensor) -> Result<Tensor> {
                // First pixel decides which axis the embedding points along.
                let first = x.flatten_from(1)?.narrow(1, 0, 1)?;
                let other = (first.ones_like()? - &first)?;
                Ok(Tensor::cat(&[&first, &other], 1)?)
            }
        }
        let x = Tensor::ones((1, 1, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let y = Tensor::zeros((1, 1, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let d = v(&identity_distance(&x, &y, &Fixed).unwrap());
        assert!((d[0] - 1.0).abs() < 1e-12);
    }
}
