//! Latent-space definitions: Z codes, extended Z+ codes, seeded sampling and
//! the resolution → layer-count rule shared by encoders and decoders.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const DEFAULT_LATENT_DIM: usize = 512;

/// A single latent vector `z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    values: Vec<f32>,
}

impl LatentCode {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(invalid!("latent code must be non-empty"));
        }
        Ok(Self { values })
    }

    pub fn zeros(dim: usize) -> Self {
        Self { values: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Elementwise `self + other`.
    pub fn offset(&self, delta: &[f32]) -> Result<Self> {
        if delta.len() != self.dim() {
            return Err(invalid!("offset length {} != latent dim {}", delta.len(), self.dim()));
        }
        let values = self.values.iter().zip(delta).map(|(a, b)| a + b).collect();
        Ok(Self { values })
    }
}

/// A Z+ code: `n` stacked latent rows, one per style-modulated generator layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtendedLatent {
    n: usize,
    dim: usize,
    data: Vec<f32>,
}

impl ExtendedLatent {
    pub fn from_rows(n: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if n == 0 || dim == 0 {
            return Err(invalid!("extended latent needs n >= 1 and dim >= 1"));
        }
        if data.len() != n * dim {
            return Err(invalid!("expected {} values for {n}x{dim}, got {}", n * dim, data.len()));
        }
        Ok(Self { n, dim, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks(self.dim)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// Replaces row `i`; used by style-mixing and per-layer probes.
    pub fn with_row(&self, i: usize, row: &[f32]) -> Result<Self> {
        if i >= self.n || row.len() != self.dim {
            return Err(invalid!("row {i} of length {} does not fit {}x{}", row.len(), self.n, self.dim));
        }
        let mut out = self.clone();
        out.data[i * self.dim..(i + 1) * self.dim].copy_from_slice(row);
        Ok(out)
    }

    /// `true` when every row equals the first one.
    pub fn is_repeated(&self) -> bool {
        let first = self.row(0);
        self.rows().all(|r| r == first)
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (self.n, self.dim), device)?.to_dtype(dtype)?)
    }

    /// Packs a batch into a `(B, n, dim)` tensor.
    pub fn batch_to_tensor(codes: &[ExtendedLatent], dtype: DType, device: &Device) -> Result<Tensor> {
        let first = codes.first().ok_or_else(|| invalid!("empty latent batch"))?;
        let (n, dim) = (first.n, first.dim);
        let mut flat = Vec::with_capacity(codes.len() * n * dim);
        for c in codes {
            if c.n != n || c.dim != dim {
                return Err(invalid!("mixed latent shapes in batch: {}x{} vs {n}x{dim}", c.n, c.dim));
            }
            flat.extend_from_slice(&c.data);
        }
        Ok(Tensor::from_vec(flat, (codes.len(), n, dim), device)?.to_dtype(dtype)?)
    }

    /// Inverse of [`ExtendedLatent::batch_to_tensor`].
    pub fn batch_from_tensor(t: &Tensor) -> Result<Vec<ExtendedLatent>> {
        let (b, n, dim) = t.dims3()?;
        let flat: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        (0..b)
            .map(|i| ExtendedLatent::from_rows(n, dim, flat[i * n * dim..(i + 1) * n * dim].to_vec()))
            .collect()
    }
}

/// A square output resolution and its derived style-layer count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolutionSpec {
    pub resolution: usize,
    pub n: usize,
}

impl ResolutionSpec {
    pub fn new(resolution: usize) -> Result<Self> {
        Ok(Self { resolution, n: layer_count(resolution)? })
    }

    /// Number of doublings from the 4×4 base grid.
    pub fn log2(&self) -> usize {
        self.resolution.trailing_zeros() as usize
    }
}

/// `n = 2·(log₂(resolution) − 1)`: 18 layers at 1024², 14 at 256².
pub fn layer_count(resolution: usize) -> Result<usize> {
    if resolution < 8 || !resolution.is_power_of_two() {
        return Err(invalid!("resolution must be a power of two >= 8, got {resolution}"));
    }
    let log2 = resolution.trailing_zeros() as usize;
    Ok(2 * (log2 - 1))
}

/// Seeded standard-normal sampler. One instance per pipeline stage.
#[derive(Debug, Clone)]
pub struct LatentSampler {
    rng: ChaCha8Rng,
    dim: usize,
}

impl LatentSampler {
    pub fn new(seed: u64, dim: usize) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sample_one(&mut self) -> LatentCode {
        let values = (0..self.dim).map(|_| StandardNormal.sample(&mut self.rng)).collect();
        LatentCode { values }
    }

    pub fn sample(&mut self, count: usize) -> Result<Vec<LatentCode>> {
        if count == 0 {
            return Err(invalid!("sample count must be >= 1"));
        }
        Ok((0..count).map(|_| self.sample_one()).collect())
    }

    /// Isotropic Gaussian perturbation with the given standard deviation.
    pub fn perturbation(&mut self, std: f64) -> Vec<f32> {
        (0..self.dim)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut self.rng);
                (v * std) as f32
            })
            .collect()
    }

    pub fn uniform_index(&mut self, upper: usize) -> usize {
        use rand::Rng;
        self.rng.random_range(0..upper)
    }

    pub fn uniform(&mut self) -> f64 {
        use rand::Rng;
        self.rng.random::<f64>()
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// `count` independent standard-normal codes of the given dimension.
pub fn sample_z(count: usize, seed: u64, dim: usize) -> Result<Vec<LatentCode>> {
    LatentSampler::new(seed, dim).sample(count)
}

pub fn extend_repeat(z: &LatentCode, n: usize) -> Result<ExtendedLatent> {
    if n == 0 {
        return Err(invalid!("layer count must be >= 1"));
    }
    let data = z.values.iter().copied().cycle().take(n * z.dim()).collect();
    ExtendedLatent::from_rows(n, z.dim(), data)
}

/// Stacks `codes` (one per layer, in order) into a Z+ code for a generator with
/// `n` style layers.
pub fn stack_zplus(codes: &[LatentCode], n: usize) -> Result<ExtendedLatent> {
    if codes.is_empty() {
        return Err(invalid!("cannot stack an empty list of codes"));
    }
    if codes.len() != n {
        return Err(invalid!("stacking {} codes for a generator with {n} layers", codes.len()));
    }
    let dim = codes[0].dim();
    if codes.iter().any(|c| c.dim() != dim) {
        return Err(invalid!("codes have mixed dimensions"));
    }
    let data = codes.iter().flat_map(|c| c.values.iter().copied()).collect();
    ExtendedLatent::from_rows(n, dim, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sampling_is_seed_deterministic() {
        let a = sample_z(4, 7, 512).unwrap();
        let b = sample_z(4, 7, 512).unwrap();
        assert_eq!(a, b);
        let c = sample_z(4, 8, 512).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn single_sample_shape() {
        let z = sample_z(1, 0, DEFAULT_LATENT_DIM).unwrap();
        assert_eq!(z.len(), 1);
        assert_eq!(z[0].dim(), 512);
    }

    #[test]
    fn zero_count_rejected() {
        assert!(matches!(sample_z(0, 0, 8), Err(crate::Error::InvalidArgument(_))));
    }

    #[test]
    fn moments_over_ten_thousand_samples() {
        // Reference: the law of large numbers puts the per-coordinate mean within
        // ~4/sqrt(1e4) = 0.04 of zero and the variance within ~0.06 of one.
        let dim = 16;
        let zs = sample_z(10_000, 1, dim).unwrap();
        for c in 0..dim {
            let xs: Vec<f64> = zs.iter().map(|z| z.values()[c] as f64).collect();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
            assert!(mean.abs() <= 0.05, "coord {c} mean {mean}");
            assert!((0.9..=1.1).contains(&var), "coord {c} var {var}");
        }
    }

    #[test]
    fn extend_repeat_cases() {
        let zero = LatentCode::zeros(512);
        let zp = extend_repeat(&zero, 14).unwrap();
        assert_eq!((zp.n(), zp.dim()), (14, 512));
        assert!(zp.as_slice().iter().all(|&v| v == 0.0));

        let z = sample_z(1, 3, 32).unwrap().remove(0);
        let zp = extend_repeat(&z, 3).unwrap();
        for r in 0..3 {
            assert_eq!(zp.row(r), z.values());
        }
        let one = extend_repeat(&z, 1).unwrap();
        assert_eq!(one.as_slice(), z.values());
        assert!(extend_repeat(&z, 0).is_err());
    }

    #[test]
    fn stack_matches_repeat_and_preserves_order() {
        let zs = sample_z(2, 5, 16).unwrap();
        let same = stack_zplus(&[zs[0].clone(), zs[0].clone()], 2).unwrap();
        assert_eq!(same, extend_repeat(&zs[0], 2).unwrap());

        let both = stack_zplus(&zs, 2).unwrap();
        assert_eq!(both.row(0), zs[0].values());
        assert_eq!(both.row(1), zs[1].values());

        assert!(stack_zplus(&[], 2).is_err());
        assert!(stack_zplus(&zs, 3).is_err());
    }

    #[test]
    fn layer_count_anchor_points() {
        assert_eq!(layer_count(1024).unwrap(), 18);
        assert_eq!(layer_count(256).unwrap(), 14);
        assert_eq!(layer_count(64).unwrap(), 10);
        assert_eq!(layer_count(8).unwrap(), 4);
        assert!(layer_count(48).is_err());
        assert!(layer_count(4).is_err());
        assert!(layer_count(0).is_err());
    }

    #[test]
    fn layer_count_strictly_increasing() {
        let counts: Vec<usize> = (3..=12).map(|p| layer_count(1 << p).unwrap()).collect();
        assert!(counts.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn batch_tensor_round_trip() {
        let zs = sample_z(3, 9, 8).unwrap();
        let codes: Vec<_> = zs.iter().map(|z| extend_repeat(z, 4).unwrap()).collect();
        let t = ExtendedLatent::batch_to_tensor(&codes, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[3, 4, 8]);
        assert_eq!(ExtendedLatent::batch_from_tensor(&t).unwrap(), codes);
    }

    proptest! {
        #[test]
        fn repeat_has_zero_row_variance(seed in 0u64..1000, n in 1usize..20) {
            let z = sample_z(1, seed, 12).unwrap().remove(0);
            let zp = extend_repeat(&z, n).unwrap();
            prop_assert!(zp.is_repeated());
            for c in 0..12 {
                let col: Vec<f32> = zp.rows().map(|r| r[c]).collect();
                prop_assert!(col.iter().all(|&v| v == col[0]));
            }
        }
    }
}
