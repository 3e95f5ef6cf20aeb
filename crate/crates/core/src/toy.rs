//! Procedural two-domain image world for desk-scale runs.
//!
//! Every latent code maps through a fixed random projection to the
//! parameters of one shape (center, size, squareness, colors). The `Photo`
//! domain renders it softly shaded on a muted background; the `Cartoon`
//! domain renders the same shape with a complementary flat fill, a dark
//! outline and a pale background.

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::generator::{GeneratorConfig, GeneratorState};
use crate::latent::{extend_repeat, ExtendedLatent, LatentCode, LatentSampler};
use crate::nn;

const PARAMS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyDomain {
    Photo,
    Cartoon,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeParams {
    pub center: [f64; 2],
    pub radius: f64,
    /// 0 = disc, 1 = nearly square.
    pub squareness: f64,
    pub fill: [f64; 3],
    pub background: [f64; 3],
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone)]
pub struct ToyWorld {
    resolution: usize,
    latent_dim: usize,
    projection: Vec<Vec<f64>>,
}

impl ToyWorld {
    pub fn new(resolution: usize, latent_dim: usize, seed: u64) -> Result<Self> {
        if resolution < 8 || latent_dim == 0 {
            return Err(invalid!("toy world needs resolution >= 8 and latent_dim >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection = (0..PARAMS)
            .map(|_| {
                let row: Vec<f64> = (0..latent_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                row.into_iter().map(|v| v / norm).collect()
            })
            .collect();
        Ok(Self { resolution, latent_dim, projection })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn params(&self, z: &LatentCode) -> Result<ShapeParams> {
        if z.dim() != self.latent_dim {
            return Err(invalid!("code of dim {} for a world of dim {}", z.dim(), self.latent_dim));
        }
        let u: Vec<f64> = self
            .projection
            .iter()
            .map(|row| sigmoid(1.5 * row.iter().zip(z.values()).map(|(a, b)| a * *b as f64).sum::<f64>()))
            .collect();
        Ok(ShapeParams {
            center: [0.3 + 0.4 * u[0], 0.3 + 0.4 * u[1]],
            radius: 0.14 + 0.16 * u[2],
            squareness: u[3],
            fill: [u[4], u[5], u[6]],
            background: [0.15 + 0.5 * u[7], 0.15 + 0.5 * u[8], 0.15 + 0.5 * u[9]],
        })
    }

    /// `(3, H, W)` pixels in `[-1, 1]`, channel-major.
    pub fn render(&self, p: &ShapeParams, domain: ToyDomain) -> Vec<f32> {
        let r = self.resolution;
        let mut out = vec![0f32; 3 * r * r];
        let q = 2.0 + 6.0 * p.squareness;
        for y in 0..r {
            for x in 0..r {
                let px = (x as f64 + 0.5) / r as f64 - p.center[0];
                let py = (y as f64 + 0.5) / r as f64 - p.center[1];
                let d = (px.abs().powf(q) + py.abs().powf(q)).powf(1.0 / q);
                let edge = (p.radius - d) * r as f64;
                let inside = sigmoid(1.5 * edge);
                let rgb: [f64; 3] = match domain {
                    ToyDomain::Photo => {
                        // Soft radial shading on the shape.
                        let shade = 1.0 - 0.35 * (d / p.radius).min(1.0);
                        std::array::from_fn(|c| inside * p.fill[c] * shade + (1.0 - inside) * p.background[c])
                    }
                    ToyDomain::Cartoon => {
                        let outline = (-(edge / 1.2).powi(2)).exp();
                        std::array::from_fn(|c| {
                            let fill = 1.0 - p.fill[(c + 1) % 3];
                            let bg = 0.85 + 0.1 * p.background[c];
                            (inside * fill + (1.0 - inside) * bg) * (1.0 - 0.9 * outline)
                        })
                    }
                };
                for (c, v) in rgb.iter().enumerate() {
                    out[c * r * r + y * r + x] = (2.0 * v.clamp(0.0, 1.0) - 1.0) as f32;
                }
            }
        }
        out
    }

    /// `(B, 3, H, W)` renders of `codes`.
    pub fn render_codes(&self, codes: &[LatentCode], domain: ToyDomain) -> Result<Tensor> {
        let r = self.resolution;
        let mut data = Vec::with_capacity(codes.len() * 3 * r * r);
        for z in codes {
            data.extend(self.render(&self.params(z)?, domain));
        }
        Ok(Tensor::from_vec(data, (codes.len(), 3, r, r), &Device::Cpu)?)
    }

    pub fn sample_images(&self, count: usize, seed: u64, domain: ToyDomain) -> Result<Tensor> {
        let codes = LatentSampler::new(seed, self.latent_dim).sample(count)?;
        self.render_codes(&codes, domain)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 1500, batch_size: 16, learning_rate: 0.002, seed: 0 }
    }
}

/// Fits a generator to the `Photo` renders of the world by per-pixel
/// regression from the same codes. Returns the generator and the final
/// batch loss.
pub fn pretrain_source(
    world: &ToyWorld,
    config: GeneratorConfig,
    pre: &PretrainConfig,
    dtype: DType,
    device: &Device,
) -> Result<(GeneratorState, f64)> {
    if config.resolution != world.resolution() || config.latent_dim != world.latent_dim() || config.image_channels != 3 {
        return Err(invalid!("generator config does not match the toy world"));
    }
    let g = GeneratorState::new(config, pre.seed, dtype, device)?;
    let n = g.n();
    let params = ParamsAdamW { lr: pre.learning_rate, beta1: 0.9, beta2: 0.99, eps: 1e-8, weight_decay: 0.0 };
    let mut opt = AdamW::new(g.trainable_vars(), params)?;
    let mut sampler = LatentSampler::new(pre.seed ^ 0x70, world.latent_dim());
    let mut last = f64::NAN;
    for _ in 0..pre.steps {
        let codes = sampler.sample(pre.batch_size)?;
        let target = world.render_codes(&codes, ToyDomain::Photo)?.to_dtype(dtype)?.to_device(device)?;
        let ext: Vec<ExtendedLatent> = codes.iter().map(|z| extend_repeat(z, n)).collect::<Result<_>>()?;
        let images = g.synthesize_latents(&ext)?.images;
        let loss = (images - target)?.sqr()?.mean_all()?;
        last = nn::scalar_f64(&loss)?;
        opt.backward_step(&loss)?;
    }
    Ok((g, last))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_are_deterministic_and_bounded() {
        let w = ToyWorld::new(16, 8, 0).unwrap();
        let a = w.sample_images(4, 1, ToyDomain::Photo).unwrap();
        let b = w.sample_images(4, 1, ToyDomain::Photo).unwrap();
        let va: Vec<f32> = a.flatten_all().unwrap().to_vec1().unwrap();
        let vb: Vec<f32> = b.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(va, vb);
        assert!(va.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn domains_differ_on_same_codes() {
        let w = ToyWorld::new(16, 8, 0).unwrap();
        let a = w.sample_images(4, 2, ToyDomain::Photo).unwrap();
        let b = w.sample_images(4, 2, ToyDomain::Cartoon).unwrap();
        let diff = (a - b).unwrap().abs().unwrap().mean_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff > 0.2, "{diff}");
    }

    #[test]
    fn pretraining_reduces_error() {
        let w = ToyWorld::new(16, 8, 0).unwrap();
        let pre = PretrainConfig { steps: 30, batch_size: 8, ..Default::default() };
        let cfg = GeneratorConfig::toy(16, 8);
        let (_, first) = pretrain_source(&w, cfg.clone(), &PretrainConfig { steps: 1, ..pre.clone() }, DType::F32, &Device::Cpu).unwrap();
        let (_, last) = pretrain_source(&w, cfg, &pre, DType::F32, &Device::Cpu).unwrap();
        assert!(last < first, "{first} -> {last}");
    }
}
