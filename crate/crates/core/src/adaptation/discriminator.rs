//! Image-level and patch-level discriminators over a shared trunk.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::{self, ParamStore};

const SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub resolution: usize,
    pub image_channels: usize,
    pub max_channels: usize,
    pub min_channels: usize,
    /// Side of the patch-logit grid.
    pub patch_resolution: usize,
}

impl DiscriminatorConfig {
    pub fn toy(resolution: usize, image_channels: usize) -> Self {
        Self {
            resolution,
            image_channels,
            max_channels: 32,
            min_channels: 16,
            patch_resolution: (resolution / 4).clamp(4, 8),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 8 || !self.resolution.is_power_of_two() {
            return Err(invalid!("discriminator resolution must be a power of two >= 8, got {}", self.resolution));
        }
        let p = self.patch_resolution;
        if p < 4 || !p.is_power_of_two() || p >= self.resolution {
            return Err(invalid!("patch resolution {p} must be a power of two in [4, {})", self.resolution));
        }
        if self.min_channels == 0 || self.min_channels > self.max_channels {
            return Err(invalid!("bad channel range {}..{}", self.min_channels, self.max_channels));
        }
        Ok(())
    }

    pub fn channels_at(&self, resolution: usize) -> usize {
        (self.max_channels * 8 / resolution).clamp(self.min_channels, self.max_channels)
    }
}

/// Logits from both heads for one image batch.
#[derive(Debug, Clone)]
pub struct DiscriminatorOutput {
    /// `(B,)`.
    pub image: Tensor,
    /// `(B, P, P)`.
    pub patch: Tensor,
}

#[derive(Debug, Clone)]
pub struct DiscriminatorPair {
    config: DiscriminatorConfig,
    store: ParamStore,
}

impl DiscriminatorPair {
    pub fn new(config: DiscriminatorConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(dtype, device);
        let mut res = config.resolution;
        nn::init_conv(&mut store, &mut rng, "from_rgb", config.image_channels, config.channels_at(res), 1, 2f64.sqrt())?;
        let mut block = 0;
        while res > 4 {
            let (cin, cout) = (config.channels_at(res), config.channels_at(res / 2));
            nn::init_conv(&mut store, &mut rng, &format!("block{block}.conv"), cin, cout, 3, 2f64.sqrt())?;
            res /= 2;
            if res == config.patch_resolution {
                nn::init_conv(&mut store, &mut rng, "patch_head", cout, 1, 1, 1.0)?;
            }
            block += 1;
        }
        let c = config.channels_at(4);
        nn::init_conv(&mut store, &mut rng, "head.conv", c, c, 3, 2f64.sqrt())?;
        nn::init_linear(&mut store, &mut rng, "head.fc", c * 16, c, 2f64.sqrt())?;
        nn::init_linear(&mut store, &mut rng, "head.out", c, 1, 1.0)?;
        Ok(Self { config, store })
    }

    pub fn from_store(config: DiscriminatorConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let reference = Self::new(config.clone(), 0, store.dtype(), store.device())?;
        for name in reference.store.names() {
            let want = reference.store.get(name)?;
            let got = store.get(name)?;
            if want.dims() != got.dims() {
                return Err(invalid!("discriminator parameter {name}: expected {:?}, got {:?}", want.dims(), got.dims()));
            }
        }
        Ok(Self { config, store })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn trainable_vars(&self) -> Vec<candle_core::Var> {
        self.store.trainable()
    }

    pub fn deep_clone(&self) -> Result<Self> {
        Ok(Self { config: self.config.clone(), store: self.store.deep_clone()? })
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self { config: self.config.clone(), store: self.store.to_dtype(dtype)? })
    }

    pub fn forward(&self, x: &Tensor) -> Result<DiscriminatorOutput> {
        let (_, c, h, w) = x.dims4()?;
        let res = self.config.resolution;
        if c != self.config.image_channels || h != res || w != res {
            return Err(invalid!("discriminator expects (B, {}, {res}, {res}), got {:?}", self.config.image_channels, x.dims()));
        }
        let mut h = nn::leaky_relu(&nn::conv2d(&self.store, "from_rgb", x, 1)?, SLOPE)?;
        let mut res = res;
        let mut block = 0;
        let mut patch = None;
        while res > 4 {
            h = nn::leaky_relu(&nn::conv2d(&self.store, &format!("block{block}.conv"), &h, 1)?, SLOPE)?;
            h = h.avg_pool2d(2)?;
            res /= 2;
            if res == self.config.patch_resolution {
                patch = Some(nn::conv2d(&self.store, "patch_head", &h, 1)?.squeeze(1)?);
            }
            block += 1;
        }
        h = nn::leaky_relu(&nn::conv2d(&self.store, "head.conv", &h, 1)?, SLOPE)?;
        let h = nn::leaky_relu(&nn::linear(&self.store, "head.fc", &h.flatten_from(1)?)?, SLOPE)?;
        let image = nn::linear(&self.store, "head.out", &h)?.squeeze(1)?;
        Ok(DiscriminatorOutput { image, patch: patch.expect("validated patch resolution") })
    }
}
