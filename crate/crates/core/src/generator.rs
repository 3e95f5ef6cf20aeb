//! Style-based decoder: a mapping network (Z → W, applied row-wise to Z+
//! codes) feeding a pyramid of upsample + conv blocks, each modulated by one
//! AdaIN layer, and a modulated 1×1 RGB head.
//!
//! Layer layout for a `2^k` output (`n = 2k − 2` style layers):
//!
//! | style row | layer                                  |
//! |-----------|----------------------------------------|
//! | 0         | 4×4 conv on the learned constant       |
//! | 1 + 2j    | upsample ×2, conv (resolution 8·2^j)   |
//! | 2 + 2j    | conv at the same resolution            |
//! | n − 1     | modulated 1×1 RGB head                 |

use candle_core::{DType, Device, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, numeric, Result};
use crate::latent::{layer_count, ExtendedLatent};
use crate::nn::{self, ParamStore};

pub const ADAIN_EPS: f64 = 1e-5;
const ACT_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub resolution: usize,
    pub latent_dim: usize,
    pub style_dim: usize,
    pub mapping_layers: usize,
    pub max_channels: usize,
    pub min_channels: usize,
    pub image_channels: usize,
    /// Pixel-normalize each latent row before the mapping MLP.
    pub normalize_latent: bool,
    /// Leaky slope inside the mapping MLP; 1.0 makes it linear.
    pub mapping_slope: f64,
    /// Per-layer noise inputs. Off by default so synthesis is deterministic.
    pub noise: bool,
}

impl GeneratorConfig {
    /// Desk-scale defaults for a given resolution.
    pub fn toy(resolution: usize, latent_dim: usize) -> Self {
        Self {
            resolution,
            latent_dim,
            style_dim: latent_dim,
            mapping_layers: 2,
            max_channels: 32,
            min_channels: 16,
            image_channels: 3,
            normalize_latent: true,
            mapping_slope: 0.2,
            noise: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        layer_count(self.resolution)?;
        if !(2..=8).contains(&self.mapping_layers) {
            return Err(invalid!("mapping network needs 2..=8 layers, got {}", self.mapping_layers));
        }
        if self.latent_dim == 0 || self.style_dim == 0 || self.min_channels == 0 {
            return Err(invalid!("dimensions must be positive"));
        }
        if self.min_channels > self.max_channels {
            return Err(invalid!("min_channels > max_channels"));
        }
        if !matches!(self.image_channels, 1 | 3) {
            return Err(invalid!("image_channels must be 1 or 3"));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        layer_count(self.resolution).expect("validated resolution")
    }

    pub fn channels_at(&self, resolution: usize) -> usize {
        (self.max_channels * 8 / resolution.max(1)).clamp(self.min_channels, self.max_channels)
    }

    pub fn layers(&self) -> Vec<StyleLayer> {
        let c4 = self.channels_at(4);
        let mut out = vec![StyleLayer { kind: LayerKind::Conv { input: c4, output: c4, upsample: false }, resolution: 4 }];
        let mut res = 4;
        let mut ch = c4;
        while res < self.resolution {
            res *= 2;
            let next = self.channels_at(res);
            out.push(StyleLayer { kind: LayerKind::Conv { input: ch, output: next, upsample: true }, resolution: res });
            out.push(StyleLayer { kind: LayerKind::Conv { input: next, output: next, upsample: false }, resolution: res });
            ch = next;
        }
        out.push(StyleLayer { kind: LayerKind::ToRgb { input: ch }, resolution: res });
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv { input: usize, output: usize, upsample: bool },
    ToRgb { input: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StyleLayer {
    pub kind: LayerKind,
    pub resolution: usize,
}

impl StyleLayer {
    /// Width of this layer's style-modulation input.
    pub fn style_width(&self) -> usize {
        match self.kind {
            LayerKind::Conv { output, .. } => 2 * output,
            LayerKind::ToRgb { input } => input,
        }
    }
}

/// Per-layer style-modulation inputs captured during synthesis; entry `l` is a
/// `B × d_l` matrix.
#[derive(Debug, Clone)]
pub struct AdaINInputTrace {
    pub layers: Vec<Tensor>,
}

impl AdaINInputTrace {
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn batch_size(&self) -> Result<usize> {
        Ok(self.layers.first().ok_or_else(|| invalid!("empty trace"))?.dim(0)?)
    }

    pub fn detach(&self) -> Self {
        Self { layers: self.layers.iter().map(Tensor::detach).collect() }
    }

    /// Reorders the batch dimension of every layer.
    pub fn permute_batch(&self, order: &[u32]) -> Result<Self> {
        let idx = Tensor::new(order, self.layers[0].device())?;
        let layers = self.layers.iter().map(|l| l.index_select(&idx, 0)).collect::<candle_core::Result<_>>()?;
        Ok(Self { layers })
    }
}

#[derive(Debug, Clone)]
pub struct SynthesisOutput {
    pub images: Tensor,
    pub trace: AdaINInputTrace,
}

/// Mapping and synthesis parameters of one generator instance.
#[derive(Debug, Clone)]
pub struct GeneratorState {
    config: GeneratorConfig,
    mapping: ParamStore,
    synthesis: ParamStore,
}

impl GeneratorState {
    pub fn new(config: GeneratorConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mapping = ParamStore::new(dtype, device);
        let gain = (2.0f64).sqrt();
        for i in 0..config.mapping_layers {
            let input = if i == 0 { config.latent_dim } else { config.style_dim };
            nn::init_linear(&mut mapping, &mut rng, &format!("mapping.{i}"), input, config.style_dim, gain)?;
        }

        let mut synthesis = ParamStore::new(dtype, device);
        let c4 = config.channels_at(4);
        synthesis.insert("const", nn::randn(&mut rng, &[1, c4, 4, 4], 1.0, device)?)?;
        for (l, layer) in config.layers().iter().enumerate() {
            let width = layer.style_width();
            let affine = format!("layer{l}.affine");
            nn::init_linear(&mut synthesis, &mut rng, &affine, config.style_dim, width, 0.25)?;
            let bias: Vec<f64> = match layer.kind {
                LayerKind::Conv { output, .. } => (0..width).map(|i| if i < output { 1.0 } else { 0.0 }).collect(),
                LayerKind::ToRgb { .. } => vec![1.0; width],
            };
            synthesis.insert(format!("{affine}.bias"), Tensor::new(bias, device)?)?;
            synthesis.insert(format!("layer{l}.noise_strength"), Tensor::zeros(1, DType::F64, device)?)?;
            match layer.kind {
                LayerKind::Conv { input, output, .. } => {
                    nn::init_conv(&mut synthesis, &mut rng, &format!("layer{l}.conv"), input, output, 3, gain)?
                }
                LayerKind::ToRgb { input } => {
                    nn::init_conv(&mut synthesis, &mut rng, "to_rgb", input, config.image_channels, 1, 1.0)?
                }
            }
        }
        Ok(Self { config, mapping, synthesis })
    }

    /// Assembles a state from already-populated stores (checkpoint loading,
    /// weight import). Every expected parameter must be present with the
    /// shape the config implies.
    pub fn from_parts(config: GeneratorConfig, mapping: ParamStore, synthesis: ParamStore) -> Result<Self> {
        config.validate()?;
        let reference = Self::new(config.clone(), 0, mapping.dtype(), mapping.device())?;
        for (store, want) in [(&mapping, &reference.mapping), (&synthesis, &reference.synthesis)] {
            for name in want.names() {
                let have = store.get(name)?;
                let expected = want.get(name)?;
                if have.dims() != expected.dims() {
                    return Err(invalid!("parameter `{name}` has shape {:?}, expected {:?}", have.dims(), expected.dims()));
                }
            }
        }
        Ok(Self { config, mapping, synthesis })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn n(&self) -> usize {
        self.config.n()
    }

    pub fn resolution(&self) -> usize {
        self.config.resolution
    }

    pub fn dtype(&self) -> DType {
        self.synthesis.dtype()
    }

    pub fn device(&self) -> &Device {
        self.synthesis.device()
    }

    pub fn mapping(&self) -> &ParamStore {
        &self.mapping
    }

    pub fn synthesis(&self) -> &ParamStore {
        &self.synthesis
    }

    pub fn mapping_frozen(&self) -> bool {
        self.mapping.is_frozen()
    }

    pub fn set_mapping_frozen(&mut self, frozen: bool) {
        self.mapping.set_frozen(frozen);
    }

    /// Deep copy whose mapping network is frozen.
    pub fn clone_for_adaptation(&self) -> Result<Self> {
        let mut mapping = self.mapping.deep_clone()?;
        mapping.set_frozen(true);
        let mut synthesis = self.synthesis.deep_clone()?;
        synthesis.set_frozen(false);
        Ok(Self { config: self.config.clone(), mapping, synthesis })
    }

    /// Read-only view sharing this state's storage; produces no gradients for
    /// any of its parameters.
    pub fn frozen_view(&self) -> Self {
        Self { config: self.config.clone(), mapping: self.mapping.frozen_view(), synthesis: self.synthesis.frozen_view() }
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self { config: self.config.clone(), mapping: self.mapping.to_dtype(dtype)?, synthesis: self.synthesis.to_dtype(dtype)? })
    }

    pub fn trainable_vars(&self) -> Vec<candle_core::Var> {
        let mut v = self.synthesis.trainable();
        v.extend(self.mapping.trainable());
        v
    }

    pub fn mapping_checksum(&self) -> Result<String> {
        self.mapping.checksum()
    }

    pub fn checksum(&self) -> Result<String> {
        Ok(format!("{}:{}", self.mapping.checksum()?, self.synthesis.checksum()?))
    }

    /// Maps every Z+ row independently through the mapping network:
    /// `(B, n, latent_dim) → (B, n, style_dim)`.
    pub fn map_to_style(&self, zp: &Tensor) -> Result<Tensor> {
        let (b, n, d) = zp.dims3()?;
        if n != self.n() {
            return Err(invalid!("Z+ code has {n} rows, generator expects {}", self.n()));
        }
        if d != self.config.latent_dim {
            return Err(invalid!("latent dim {d} != generator latent dim {}", self.config.latent_dim));
        }
        let mut x = zp.to_dtype(self.dtype())?.reshape((b * n, d))?;
        if self.config.normalize_latent {
            let norm = (x.sqr()?.mean_keepdim(D::Minus1)? + 1e-8)?.sqrt()?;
            x = x.broadcast_div(&norm)?;
        }
        for i in 0..self.config.mapping_layers {
            x = nn::linear(&self.mapping, &format!("mapping.{i}"), &x)?;
            x = nn::leaky_relu(&x, self.config.mapping_slope)?;
        }
        Ok(x.reshape((b, n, self.config.style_dim))?)
    }

    pub fn map_latents(&self, codes: &[ExtendedLatent]) -> Result<Tensor> {
        self.map_to_style(&ExtendedLatent::batch_to_tensor(codes, self.dtype(), self.device())?)
    }

    /// Generates images for a `(B, n, latent_dim)` batch, recording every
    /// layer's style-modulation input.
    pub fn synthesize(&self, zp: &Tensor) -> Result<SynthesisOutput> {
        self.synthesize_inner(zp, None)
    }

    /// As [`GeneratorState::synthesize`] but with stochastic noise inputs when
    /// the config enables them.
    pub fn synthesize_with_noise(&self, zp: &Tensor, rng: &mut ChaCha8Rng) -> Result<SynthesisOutput> {
        self.synthesize_inner(zp, Some(rng))
    }

    pub fn synthesize_latents(&self, codes: &[ExtendedLatent]) -> Result<SynthesisOutput> {
        self.synthesize(&ExtendedLatent::batch_to_tensor(codes, self.dtype(), self.device())?)
    }

    fn synthesize_inner(&self, zp: &Tensor, mut rng: Option<&mut ChaCha8Rng>) -> Result<SynthesisOutput> {
        let w = self.map_to_style(zp)?;
        let b = w.dim(0)?;
        let s = &self.synthesis;
        let c4 = self.config.channels_at(4);
        let mut x = s.get("const")?.broadcast_as((b, c4, 4, 4))?.contiguous()?;
        let mut trace = Vec::with_capacity(self.n());
        let mut images = None;
        for (l, layer) in self.config.layers().iter().enumerate() {
            let w_l = w.narrow(1, l, 1)?.squeeze(1)?;
            let style = nn::linear(s, &format!("layer{l}.affine"), &w_l)?;
            trace.push(style.clone());
            match layer.kind {
                LayerKind::Conv { upsample, .. } => {
                    if upsample {
                        x = nn::upsample_nearest(&x, 2)?;
                    }
                    x = nn::conv2d(s, &format!("layer{l}.conv"), &x, 1)?;
                    if self.config.noise {
                        if let Some(rng) = rng.as_deref_mut() {
                            let (bb, _, h, wd) = x.dims4()?;
                            let noise = nn::randn(rng, &[bb, 1, h, wd], 1.0, x.device())?.to_dtype(x.dtype())?;
                            let strength = s.get(&format!("layer{l}.noise_strength"))?;
                            x = x.broadcast_add(&noise.broadcast_mul(&strength.reshape((1, 1, 1, 1))?)?)?;
                        }
                    }
                    x = nn::leaky_relu(&x, ACT_SLOPE)?;
                    x = adain(&x, &style)?;
                }
                LayerKind::ToRgb { .. } => {
                    let modulated = x.broadcast_mul(&style.unsqueeze(2)?.unsqueeze(3)?)?;
                    images = Some(nn::conv2d(s, "to_rgb", &modulated, 1)?.tanh()?);
                }
            }
        }
        let images = images.ok_or_else(|| numeric!("generator produced no RGB output"))?;
        nn::ensure_finite(&images, "synthesized images").map_err(|_| {
            numeric!("synthesis produced non-finite output; check generator parameters")
        })?;
        Ok(SynthesisOutput { images, trace: AdaINInputTrace { layers: trace } })
    }
}

/// Instance-normalizes every channel of `feature` over its spatial extent
/// (ε = 1e−5), then applies the per-channel scale (first `C` style entries)
/// and shift (last `C`).
pub fn adain(feature: &Tensor, style: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = feature.dims4()?;
    let (sb, sw) = style.dims2()?;
    if sb != b || sw != 2 * c {
        return Err(invalid!("AdaIN style of shape {sb}x{sw} does not fit features {b}x{c}x{h}x{w}"));
    }
    let normed = instance_norm(feature)?;
    let scale = style.narrow(1, 0, c)?.reshape((b, c, 1, 1))?;
    let shift = style.narrow(1, c, c)?.reshape((b, c, 1, 1))?;
    Ok(normed.broadcast_mul(&scale)?.broadcast_add(&shift)?)
}

pub fn instance_norm(feature: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = feature.dims4()?;
    let flat = feature.reshape((b, c, h * w))?;
    let mean = flat.mean_keepdim(2)?;
    let centered = flat.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(2)?;
    let normed = centered.broadcast_div(&(var + ADAIN_EPS)?.sqrt()?)?;
    Ok(normed.reshape((b, c, h, w))?)
}
