use candle_core::Tensor;

use crate::error::{invalid, numeric, Result};
use crate::nn;
use crate::perceptual::{identity_distance, latent_regularizer, lpips, FeatureBackbone, IdentityEmbedder, PerceptualWeights};

use super::EncoderConfig;

/// Mean over elements of `0.5·d²` for `|d| < 1`, else `|d| − 0.5`.
pub fn smooth_l1(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(invalid!("smooth_l1 shapes differ: {:?} vs {:?}", a.dims(), b.dims()));
    }
    let d = (a - b)?;
    let abs = d.abs()?;
    let quad = (d.sqr()? * 0.5)?;
    let lin = (&abs - 0.5)?;
    let inside = abs.lt(1.0)?;
    Ok(inside.where_cond(&quad, &lin)?.mean_all()?)
}

/// Networks the reconstruction terms are measured with.
#[derive(Clone, Copy)]
pub struct ReconstructionKit<'a> {
    pub backbone: &'a dyn FeatureBackbone,
    pub weights: &'a PerceptualWeights,
    pub embedder: &'a dyn IdentityEmbedder,
}

/// Unweighted loss components of one step, for logging.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTerms {
    pub l2: f64,
    pub lpips: f64,
    pub reg: f64,
    pub iden: f64,
    pub z_predict: f64,
}

fn add(acc: Option<Tensor>, t: Tensor) -> Result<Option<Tensor>> {
    Ok(Some(match acc {
        Some(a) => (a + t)?,
        None => t,
    }))
}

/// `λ_L2·mse + λ_lpips·lpips + λ_reg·reg(z_e) + λ_iden·identity`; terms with a
/// zero weight are skipped.
pub fn path1_loss(
    x: &Tensor,
    x_recon: &Tensor,
    z_e: &Tensor,
    cfg: &EncoderConfig,
    kit: ReconstructionKit<'_>,
) -> Result<(Tensor, LossTerms)> {
    if x.dims() != x_recon.dims() {
        return Err(invalid!("reconstruction shape {:?} differs from input {:?}", x_recon.dims(), x.dims()));
    }
    let x = x.to_dtype(x_recon.dtype())?;
    let mut terms = LossTerms::default();
    let mut total = None;
    if cfg.lambda_l2 > 0.0 {
        let t = (&x - x_recon)?.sqr()?.mean_all()?;
        terms.l2 = nn::scalar_f64(&t)?;
        total = add(total, (t * cfg.lambda_l2)?)?;
    }
    if cfg.lambda_lpips > 0.0 {
        let t = lpips(&x, x_recon, kit.backbone, kit.weights)?.mean_all()?;
        terms.lpips = nn::scalar_f64(&t)?;
        total = add(total, (t * cfg.lambda_lpips)?)?;
    }
    if cfg.lambda_reg > 0.0 {
        let t = latent_regularizer(z_e)?;
        terms.reg = nn::scalar_f64(&t)?;
        total = add(total, (t * cfg.lambda_reg)?)?;
    }
    if cfg.lambda_iden > 0.0 {
        let t = identity_distance(&x, x_recon, kit.embedder)?.mean_all()?;
        terms.iden = nn::scalar_f64(&t)?;
        total = add(total, (t * cfg.lambda_iden)?)?;
    }
    let total = match total {
        Some(t) => t,
        None => Tensor::zeros((), x_recon.dtype(), x_recon.device())?,
    };
    let v = nn::scalar_f64(&total)?;
    if !v.is_finite() {
        return Err(numeric!("path-1 loss is not finite ({v})"));
    }
    Ok((total, terms))
}

/// `λ_path1·path1(x_syn, x_recon, z_e) + λ_z_predict·smooth_l1(z_o, z_e)`.
pub fn path2_loss(
    z_o: &Tensor,
    z_e: &Tensor,
    x_syn: &Tensor,
    x_recon: &Tensor,
    cfg: &EncoderConfig,
    kit: ReconstructionKit<'_>,
) -> Result<(Tensor, LossTerms)> {
    if z_o.dims() != z_e.dims() {
        return Err(invalid!("sampled code {:?} and encoded code {:?} differ in shape", z_o.dims(), z_e.dims()));
    }
    let (recon, mut terms) = path1_loss(x_syn, x_recon, z_e, cfg, kit)?;
    let zp = smooth_l1(&z_o.to_dtype(z_e.dtype())?, z_e)?;
    terms.z_predict = nn::scalar_f64(&zp)?;
    Ok((((recon * cfg.lambda_path1)? + (zp * cfg.lambda_z_predict)?)?, terms))
}
