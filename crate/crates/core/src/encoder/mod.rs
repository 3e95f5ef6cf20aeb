//! Image-to-Z+ encoder: a three-level feature pyramid whose pooled features
//! become one token per generator layer, refined by a sub-encoder.

mod loss;
mod train;

pub use loss::{path1_loss, path2_loss, smooth_l1, LossTerms, ReconstructionKit};
pub use train::{
    latent_prediction_error, train_encoder, train_phase, EncoderConfig, EncoderObserver, EncoderStepRecord,
    NoopEncoderObserver, PathTag, TrainingPhase,
};

use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::latent::{layer_count, ExtendedLatent};
use crate::nn::{self, ParamStore};

const SLOPE: f64 = 0.2;
/// Pyramid features are pooled to this many cells per side before tokenizing.
const POOL_GRID: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubEncoderKind {
    Transformer,
    /// Transformer blocks without the feed-forward part.
    Attention,
    Linear1,
    Linear8,
}

impl FromStr for SubEncoderKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transformer" => Ok(Self::Transformer),
            "attention" => Ok(Self::Attention),
            "linear_1" => Ok(Self::Linear1),
            "linear_8" => Ok(Self::Linear8),
            other => Err(invalid!("unknown sub-encoder `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderArch {
    pub resolution: usize,
    pub latent_dim: usize,
    pub image_channels: usize,
    /// Channel widths of the three pyramid stages, fine to coarse.
    pub stage_channels: [usize; 3],
    /// Common width of the top-down pathway.
    pub pyramid_channels: usize,
    pub kind: SubEncoderKind,
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub mlp_dim: usize,
}

impl EncoderArch {
    /// Full-size sub-encoder shape.
    pub fn standard(resolution: usize) -> Self {
        Self {
            resolution,
            latent_dim: 512,
            image_channels: 3,
            stage_channels: [128, 256, 512],
            pyramid_channels: 512,
            kind: SubEncoderKind::Transformer,
            layers: 6,
            heads: 14,
            head_dim: 64,
            mlp_dim: 1024,
        }
    }

    pub fn toy(resolution: usize, latent_dim: usize) -> Self {
        Self {
            resolution,
            latent_dim,
            image_channels: 3,
            stage_channels: [16, 24, 32],
            pyramid_channels: 16,
            kind: SubEncoderKind::Transformer,
            layers: 2,
            heads: 2,
            head_dim: 16,
            mlp_dim: 64,
        }
    }

    pub fn n(&self) -> usize {
        layer_count(self.resolution).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        layer_count(self.resolution)?;
        if self.resolution < 16 {
            return Err(invalid!("encoder needs resolution >= 16, got {}", self.resolution));
        }
        if self.latent_dim == 0 || self.pyramid_channels == 0 || self.stage_channels.contains(&0) {
            return Err(invalid!("encoder widths must be positive"));
        }
        if matches!(self.kind, SubEncoderKind::Transformer | SubEncoderKind::Attention)
            && (self.layers == 0 || self.heads == 0 || self.head_dim == 0)
        {
            return Err(invalid!("attention sub-encoders need layers, heads and head_dim > 0"));
        }
        Ok(())
    }

    /// Token index ranges fed by the coarse, mid and fine pyramid levels.
    pub fn groups(&self) -> [std::ops::Range<usize>; 3] {
        let n = self.n();
        let coarse = ((n * 3) as f64 / 18.0).round().max(1.0) as usize;
        let mid = ((n * 7) as f64 / 18.0).round().max((coarse + 1) as f64) as usize;
        [0..coarse, coarse..mid.min(n - 1), mid.min(n - 1)..n]
    }
}

#[derive(Debug, Clone)]
pub struct EncoderState {
    arch: EncoderArch,
    store: ParamStore,
}

impl EncoderState {
    pub fn new(arch: EncoderArch, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new(dtype, device);
        let gain = 2f64.sqrt();
        let [c1, c2, c3] = arch.stage_channels;
        let p = arch.pyramid_channels;
        let dim = arch.latent_dim;
        nn::init_conv(&mut s, &mut rng, "stem", arch.image_channels, c1, 3, gain)?;
        nn::init_conv(&mut s, &mut rng, "stage0", c1, c1, 3, gain)?;
        nn::init_conv(&mut s, &mut rng, "stage1", c1, c2, 3, gain)?;
        nn::init_conv(&mut s, &mut rng, "stage2", c2, c3, 3, gain)?;
        for (i, c) in [c1, c2, c3].into_iter().enumerate() {
            nn::init_conv(&mut s, &mut rng, &format!("lateral{i}"), c, p, 1, 1.0)?;
        }
        for t in 0..arch.n() {
            nn::init_linear(&mut s, &mut rng, &format!("token{t}"), p * POOL_GRID * POOL_GRID, dim, 1.0)?;
        }
        s.insert("pos", nn::randn(&mut rng, &[arch.n(), dim], 0.02, device)?)?;
        match arch.kind {
            SubEncoderKind::Transformer | SubEncoderKind::Attention => {
                let inner = arch.heads * arch.head_dim;
                for l in 0..arch.layers {
                    nn::init_layer_norm(&mut s, &format!("block{l}.ln1"), dim)?;
                    nn::init_linear(&mut s, &mut rng, &format!("block{l}.qkv"), dim, 3 * inner, 1.0)?;
                    nn::init_linear(&mut s, &mut rng, &format!("block{l}.proj"), inner, dim, 0.5)?;
                    if arch.kind == SubEncoderKind::Transformer {
                        nn::init_layer_norm(&mut s, &format!("block{l}.ln2"), dim)?;
                        nn::init_linear(&mut s, &mut rng, &format!("block{l}.fc1"), dim, arch.mlp_dim, gain)?;
                        nn::init_linear(&mut s, &mut rng, &format!("block{l}.fc2"), arch.mlp_dim, dim, 0.5)?;
                    }
                }
                nn::init_layer_norm(&mut s, "final_ln", dim)?;
                nn::init_linear(&mut s, &mut rng, "out", dim, dim, 1.0)?;
            }
            SubEncoderKind::Linear1 | SubEncoderKind::Linear8 => {
                let depth = if arch.kind == SubEncoderKind::Linear1 { 1 } else { 8 };
                for l in 0..depth {
                    let g = if l + 1 == depth { 1.0 } else { gain };
                    nn::init_linear(&mut s, &mut rng, &format!("fc{l}"), dim, dim, g)?;
                }
            }
        }
        Ok(Self { arch, store: s })
    }

    pub fn from_store(arch: EncoderArch, store: ParamStore) -> Result<Self> {
        let reference = Self::new(arch.clone(), 0, store.dtype(), store.device())?;
        for name in reference.store.names() {
            let want = reference.store.get(name)?;
            let got = store.get(name)?;
            if want.dims() != got.dims() {
                return Err(invalid!("encoder parameter {name}: expected {:?}, got {:?}", want.dims(), got.dims()));
            }
        }
        Ok(Self { arch, store })
    }

    pub fn arch(&self) -> &EncoderArch {
        &self.arch
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn n(&self) -> usize {
        self.arch.n()
    }

    pub fn trainable_vars(&self) -> Vec<candle_core::Var> {
        self.store.trainable()
    }

    pub fn deep_clone(&self) -> Result<Self> {
        Ok(Self { arch: self.arch.clone(), store: self.store.deep_clone()? })
    }

    pub fn checksum(&self) -> Result<String> {
        self.store.checksum()
    }

    fn pyramid(&self, x: &Tensor) -> Result<[Tensor; 3]> {
        let s = &self.store;
        let act = |t: Tensor| nn::leaky_relu(&t, SLOPE);
        let h = act(nn::conv2d(s, "stem", x, 1)?)?;
        let c1 = act(nn::conv2d(s, "stage0", &h, 2)?)?;
        let c2 = act(nn::conv2d(s, "stage1", &c1, 2)?)?;
        let c3 = act(nn::conv2d(s, "stage2", &c2, 2)?)?;
        let up = |t: &Tensor| nn::upsample_nearest(t, 2);
        let coarse = nn::conv2d(s, "lateral2", &c3, 1)?;
        let mid = (nn::conv2d(s, "lateral1", &c2, 1)? + up(&coarse)?)?;
        let fine = (nn::conv2d(s, "lateral0", &c1, 1)? + up(&mid)?)?;
        Ok([coarse, mid, fine])
    }

    fn tokens(&self, x: &Tensor) -> Result<Tensor> {
        let levels = self.pyramid(x)?;
        let b = x.dim(0)?;
        let mut tokens = Vec::with_capacity(self.n());
        for (level, range) in levels.iter().zip(self.arch.groups()) {
            let side = level.dim(2)?;
            let pooled = level.avg_pool2d(side / POOL_GRID)?.reshape((b, ()))?;
            for t in range {
                tokens.push(nn::linear(&self.store, &format!("token{t}"), &pooled)?);
            }
        }
        let seq = Tensor::stack(&tokens, 1)?;
        Ok(seq.broadcast_add(&self.store.get("pos")?.unsqueeze(0)?)?)
    }

    fn attention(&self, prefix: &str, x: &Tensor) -> Result<Tensor> {
        let (b, n, _) = x.dims3()?;
        let (h, hd) = (self.arch.heads, self.arch.head_dim);
        let qkv = nn::linear(&self.store, &format!("{prefix}.qkv"), x)?
            .reshape((b, n, 3, h, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scores = (q.matmul(&k.t()?)? / (hd as f64).sqrt())?;
        let attn = nn::softmax(&scores)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, n, h * hd))?;
        nn::linear(&self.store, &format!("{prefix}.proj"), &out)
    }

    fn sub_encoder(&self, mut x: Tensor) -> Result<Tensor> {
        let s = &self.store;
        match self.arch.kind {
            SubEncoderKind::Transformer | SubEncoderKind::Attention => {
                for l in 0..self.arch.layers {
                    let p = format!("block{l}");
                    let a = self.attention(&p, &nn::layer_norm(s, &format!("{p}.ln1"), &x)?)?;
                    x = (x + a)?;
                    if self.arch.kind == SubEncoderKind::Transformer {
                        let h = nn::linear(s, &format!("{p}.fc1"), &nn::layer_norm(s, &format!("{p}.ln2"), &x)?)?;
                        x = (&x + nn::linear(s, &format!("{p}.fc2"), &h.gelu()?)?)?;
                    }
                }
                nn::linear(s, "out", &nn::layer_norm(s, "final_ln", &x)?)
            }
            SubEncoderKind::Linear1 | SubEncoderKind::Linear8 => {
                let depth = if self.arch.kind == SubEncoderKind::Linear1 { 1 } else { 8 };
                for l in 0..depth {
                    x = nn::linear(s, &format!("fc{l}"), &x)?;
                    if l + 1 < depth {
                        x = nn::leaky_relu(&x, SLOPE)?;
                    }
                }
                Ok(x)
            }
        }
    }

    /// `(B, C, H, W)` images to `(B, n, latent_dim)` codes.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4().map_err(|_| invalid!("encoder input must be (B, C, H, W)"))?;
        let res = self.arch.resolution;
        if h != res || w != res || c != self.arch.image_channels {
            return Err(invalid!(
                "encoder expects (B, {}, {res}, {res}) images, got {:?}",
                self.arch.image_channels,
                x.dims()
            ));
        }
        let x = x.to_dtype(self.store.dtype())?;
        let z = self.sub_encoder(self.tokens(&x)?)?;
        nn::ensure_finite(&z, "encoded latent")?;
        Ok(z)
    }

    pub fn encode_latents(&self, x: &Tensor) -> Result<Vec<ExtendedLatent>> {
        ExtendedLatent::batch_from_tensor(&self.encode(x)?.detach())
    }
}
