//! Decoder-adaptation losses.

use std::str::FromStr;

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, numeric, Result};
use crate::generator::AdaINInputTrace;
use crate::nn;
use crate::perceptual::{pairwise_modified_lpips, FeatureBackbone, PerceptualWeights};

use super::AdaptationConfig;

/// `max(d_ap − d_an + margin, 0)`.
pub fn triplet_loss(d_ap: f64, d_an: f64, margin: f64) -> f64 {
    (d_ap - d_an + margin).max(0.0)
}

/// Square matrix of nonnegative distances; entry `(i, j)` compares anchor `i`
/// with candidate `j`.
#[derive(Debug, Clone)]
pub struct DistanceMatrix(Tensor);

impl DistanceMatrix {
    pub fn new(t: Tensor) -> Result<Self> {
        let (m, m2) = t.dims2()?;
        if m != m2 {
            return Err(invalid!("distance matrix must be square, got {m}x{m2}"));
        }
        if m < 2 {
            return Err(invalid!("distance matrix needs m >= 2, got {m}"));
        }
        let min = t.to_dtype(DType::F64)?.flatten_all()?.min(0)?.to_scalar::<f64>()?;
        if min < 0.0 || min.is_nan() {
            return Err(invalid!("distance matrix has a negative or NaN entry ({min})"));
        }
        Ok(Self(t))
    }

    /// Modified-LPIPS distances between `source[i]` and `target[j]`.
    pub fn from_images(
        source: &Tensor,
        target: &Tensor,
        backbone: &dyn FeatureBackbone,
        weights: &PerceptualWeights,
    ) -> Result<Self> {
        Self::new(pairwise_modified_lpips(source, target, backbone, weights)?)
    }

    pub fn size(&self) -> usize {
        self.0.dim(0).expect("validated 2-D")
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    /// `d⁺`: the diagonal.
    pub fn positives(&self) -> Result<Tensor> {
        let eye = Tensor::eye(self.size(), self.0.dtype(), self.0.device())?;
        Ok((&self.0 * eye)?.sum(1)?)
    }

    /// `d⁻`: row means over the off-diagonal entries.
    pub fn negatives(&self) -> Result<Tensor> {
        let m = self.size();
        let eye = Tensor::eye(m, self.0.dtype(), self.0.device())?;
        let mask = eye.ones_like()?.sub(&eye)?;
        Ok(((&self.0 * mask)?.sum(1)? / (m - 1) as f64)?)
    }
}

/// Batch mean of `max(w⁺·d⁺ − d⁻ + margin, 0)`.
fn weighted_hinge(d_pos: &Tensor, d_neg: &Tensor, margin: f64, w_plus: f64) -> Result<Tensor> {
    let arg = ((d_pos * w_plus)? - d_neg)?;
    Ok((arg + margin)?.relu()?.mean_all()?)
}

/// Cross-domain triplet loss: anchor `G_s(z_i)`, positive `G_t(z_i)` (the
/// diagonal) and negatives `G_t(z_j), j ≠ i` averaged per row.
pub fn cdt_loss(d: &DistanceMatrix, margin: f64, w_plus: f64) -> Result<Tensor> {
    weighted_hinge(&d.positives()?, &d.negatives()?, margin, w_plus)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CdtVariant {
    /// Anchor `G_s(z_i)`, positive `G_t(z_i)`, negatives `G_t(z_j)`.
    Standard,
    /// Only the `d⁺` term is minimized.
    DPlusOnly,
    /// Positive replaced by `G_t(z_i + δ)`.
    NoisedCdt,
    /// Anchor `G_t(z_i)`, positive `G_t(z_i + δ)`, negatives `G_t(z_j)`.
    InDomain,
}

impl CdtVariant {
    pub fn needs_perturbed(self) -> bool {
        matches!(self, Self::NoisedCdt | Self::InDomain)
    }
}

impl FromStr for CdtVariant {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" | "cdt" => Ok(Self::Standard),
            "d_plus_only" => Ok(Self::DPlusOnly),
            "noised_cdt" => Ok(Self::NoisedCdt),
            "in_domain" | "idt" => Ok(Self::InDomain),
            other => Err(invalid!("unknown CDT variant `{other}`")),
        }
    }
}

/// Images a triplet variant draws from, all generated from one latent batch.
#[derive(Debug, Clone, Copy)]
pub struct TripletImages<'a> {
    /// `G_s(z_i)`.
    pub source: &'a Tensor,
    /// `G_t(z_i)`.
    pub target: &'a Tensor,
    /// `G_t(z_i + δ)`; required by the noised and in-domain variants.
    pub target_perturbed: Option<&'a Tensor>,
}

pub fn cdt_variant_loss(
    variant: CdtVariant,
    images: TripletImages<'_>,
    backbone: &dyn FeatureBackbone,
    weights: &PerceptualWeights,
    margin: f64,
    w_plus: f64,
) -> Result<Tensor> {
    let perturbed = || {
        images
            .target_perturbed
            .ok_or_else(|| invalid!("{variant:?} needs perturbed target images"))
    };
    match variant {
        CdtVariant::Standard => {
            let d = DistanceMatrix::from_images(images.source, images.target, backbone, weights)?;
            cdt_loss(&d, margin, w_plus)
        }
        CdtVariant::DPlusOnly => {
            let d = DistanceMatrix::from_images(images.source, images.target, backbone, weights)?;
            Ok(d.positives()?.mean_all()?)
        }
        CdtVariant::NoisedCdt => {
            let neg = DistanceMatrix::from_images(images.source, images.target, backbone, weights)?;
            let pos = DistanceMatrix::from_images(images.source, perturbed()?, backbone, weights)?;
            weighted_hinge(&pos.positives()?, &neg.negatives()?, margin, w_plus)
        }
        CdtVariant::InDomain => {
            let neg = DistanceMatrix::from_images(images.target, images.target, backbone, weights)?;
            let pos = DistanceMatrix::from_images(images.target, perturbed()?, backbone, weights)?;
            weighted_hinge(&pos.positives()?, &neg.negatives()?, margin, w_plus)
        }
    }
}

/// Flat indices of the off-diagonal entries of an `m × m` matrix, row-major.
fn off_diagonal_index(m: usize, device: &candle_core::Device) -> Result<Tensor> {
    let idx: Vec<u32> = (0..m)
        .flat_map(|i| (0..m).filter(move |&j| j != i).map(move |j| (i * m + j) as u32))
        .collect();
    Ok(Tensor::new(idx, device)?)
}

/// Row-wise log-softmax of the pairwise cosine similarities of `f` (`m × d`),
/// excluding self-similarity: result is `m × (m − 1)`.
fn similarity_log_distribution(f: &Tensor) -> Result<Tensor> {
    let m = f.dim(0)?;
    let norm = f.sqr()?.sum_keepdim(1)?.sqrt()?;
    let min = norm.to_dtype(DType::F64)?.flatten_all()?.min(0)?.to_scalar::<f64>()?;
    if !(min > 1e-12) {
        return Err(numeric!("AdaIN input row with zero norm"));
    }
    let unit = f.broadcast_div(&norm)?;
    let cos = unit.matmul(&unit.t()?)?;
    let off = cos.flatten_all()?.index_select(&off_diagonal_index(m, f.device())?, 0)?.reshape((m, m - 1))?;
    nn::log_softmax(&off)
}

/// Sum over layers of the batch-mean KL divergence between the source and
/// target similarity distributions of AdaIN inputs.
pub fn kl_adain_loss(trace_s: &AdaINInputTrace, trace_t: &AdaINInputTrace) -> Result<Tensor> {
    if trace_s.len() != trace_t.len() || trace_s.is_empty() {
        return Err(invalid!("trace layer counts differ: {} vs {}", trace_s.len(), trace_t.len()));
    }
    let mut total: Option<Tensor> = None;
    for (fs, ft) in trace_s.layers.iter().zip(&trace_t.layers) {
        if fs.dims() != ft.dims() {
            return Err(invalid!("trace layer shapes differ: {:?} vs {:?}", fs.dims(), ft.dims()));
        }
        let m = fs.dim(0)?;
        if m < 3 {
            return Err(invalid!("KL-AdaIN needs a batch of at least 3 codes, got {m}"));
        }
        let log_ps = similarity_log_distribution(fs)?;
        let log_pt = similarity_log_distribution(ft)?;
        let kl = (log_ps.exp()? * (&log_ps - &log_pt)?)?.sum(D::Minus1)?.mean_all()?;
        total = Some(match total {
            Some(t) => (t + kl)?,
            None => kl,
        });
    }
    Ok(total.expect("non-empty trace"))
}

/// Non-saturating generator loss `mean softplus(−D(G(z)))`.
pub fn nonsaturating_g_loss(fake_logits: &Tensor) -> Result<Tensor> {
    Ok(nn::softplus(&fake_logits.neg()?)?.mean_all()?)
}

/// `mean softplus(−D(x)) + mean softplus(D(G(z)))`.
pub fn nonsaturating_d_loss(real_logits: &Tensor, fake_logits: &Tensor) -> Result<Tensor> {
    let real = nn::softplus(&real_logits.neg()?)?.mean_all()?;
    let fake = nn::softplus(fake_logits)?.mean_all()?;
    Ok((real + fake)?)
}

fn check_finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(numeric!("{name} loss is not finite ({v})"))
    }
}

/// `λ_adv·adv + λ_cdt·cdt + λ_kl·kl` on scalar tensors.
pub fn decoder_total_loss(adv: &Tensor, cdt: &Tensor, kl_adain: &Tensor, cfg: &AdaptationConfig) -> Result<Tensor> {
    for (name, t) in [("adversarial", adv), ("cdt", cdt), ("kl_adain", kl_adain)] {
        check_finite(name, nn::scalar_f64(t)?)?;
    }
    Ok(((adv * cfg.lambda_adv)? + (cdt * cfg.lambda_cdt)? + (kl_adain * cfg.lambda_kl_adain)?)?)
}

/// Scalar form of [`decoder_total_loss`].
pub fn decoder_total_value(adv: f64, cdt: f64, kl_adain: f64, cfg: &AdaptationConfig) -> Result<f64> {
    check_finite("adversarial", adv)?;
    check_finite("cdt", cdt)?;
    check_finite("kl_adain", kl_adain)?;
    Ok(cfg.lambda_adv * adv + cfg.lambda_cdt * cdt + cfg.lambda_kl_adain * kl_adain)
}
