use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::generator::GeneratorState;
use crate::latent::{extend_repeat, ExtendedLatent, LatentCode, LatentSampler};
use crate::nn;

use super::{path1_loss, path2_loss, smooth_l1, EncoderArch, EncoderState, LossTerms, ReconstructionKit};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub lambda_l2: f64,
    pub lambda_lpips: f64,
    pub lambda_reg: f64,
    pub lambda_iden: f64,
    pub lambda_z_predict: f64,
    pub lambda_path1: f64,
    pub learning_rate: f64,
    pub stage1_iterations: usize,
    pub dual_path_iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            lambda_l2: 1.0,
            lambda_lpips: 0.8,
            lambda_reg: 0.0,
            lambda_iden: 0.1,
            lambda_z_predict: 0.1,
            lambda_path1: 1.0,
            learning_rate: 1e-4,
            stage1_iterations: 5000,
            dual_path_iterations: 2000,
            batch_size: 8,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl EncoderConfig {
    /// Full-length schedule.
    pub fn full_scale() -> Self {
        Self { stage1_iterations: 170_000, dual_path_iterations: 70_000, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            ("lambda_l2", self.lambda_l2),
            ("lambda_lpips", self.lambda_lpips),
            ("lambda_reg", self.lambda_reg),
            ("lambda_iden", self.lambda_iden),
            ("lambda_z_predict", self.lambda_z_predict),
            ("lambda_path1", self.lambda_path1),
        ];
        for (name, v) in lambdas {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(invalid!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.learning_rate > 0.0) {
            return Err(invalid!("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(invalid!("batch size must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathTag {
    Path1,
    Path2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainingPhase {
    /// Real-image reconstruction only.
    PathOne,
    /// Reconstruction steps alternating with sample-decode-encode steps.
    DualPath,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderStepRecord {
    pub step: usize,
    pub path: PathTag,
    pub l2: f64,
    pub lpips: f64,
    pub reg: f64,
    pub iden: f64,
    pub z_predict: f64,
    pub total: f64,
}

pub trait EncoderObserver {
    fn record(&mut self, _record: &EncoderStepRecord) -> Result<()> {
        Ok(())
    }

    fn checkpoint(&mut self, _step: usize, _encoder: &EncoderState) -> Result<()> {
        Ok(())
    }
}

pub struct NoopEncoderObserver;

impl EncoderObserver for NoopEncoderObserver {}

fn check_pairing(arch: &EncoderArch, decoder: &GeneratorState, dataset: &Tensor) -> Result<usize> {
    if arch.resolution != decoder.resolution() || arch.n() != decoder.n() {
        return Err(invalid!("encoder resolution {} does not match decoder resolution {}", arch.resolution, decoder.resolution()));
    }
    if arch.latent_dim != decoder.config().latent_dim {
        return Err(invalid!("encoder latent dim {} != decoder latent dim {}", arch.latent_dim, decoder.config().latent_dim));
    }
    let count = dataset.dim(0)?;
    if count == 0 {
        return Err(invalid!("empty training set"));
    }
    let (_, c, h, w) = dataset.dims4()?;
    if h != arch.resolution || w != arch.resolution || c != arch.image_channels {
        return Err(invalid!("training images are {:?}, encoder expects {}x{} with {} channels", dataset.dims(), arch.resolution, arch.resolution, arch.image_channels));
    }
    Ok(count)
}

fn zplus(codes: &[LatentCode], n: usize, decoder: &GeneratorState) -> Result<Tensor> {
    let ext: Vec<ExtendedLatent> = codes.iter().map(|z| extend_repeat(z, n)).collect::<Result<_>>()?;
    ExtendedLatent::batch_to_tensor(&ext, decoder.dtype(), decoder.device())
}

/// Runs `iterations` optimizer steps of one phase, numbering records from
/// `first_step`. The decoder is only read.
#[allow(clippy::too_many_arguments)]
pub fn train_phase(
    encoder: EncoderState,
    dataset: &Tensor,
    decoder: &GeneratorState,
    cfg: &EncoderConfig,
    kit: ReconstructionKit<'_>,
    phase: TrainingPhase,
    iterations: usize,
    first_step: usize,
    observer: &mut dyn EncoderObserver,
) -> Result<(EncoderState, Vec<EncoderStepRecord>)> {
    cfg.validate()?;
    let count = check_pairing(encoder.arch(), decoder, dataset)?;
    let decoder = decoder.frozen_view();
    let n = decoder.n();
    let tag = match phase {
        TrainingPhase::PathOne => 1u64,
        TrainingPhase::DualPath => 2,
    };
    let stream = cfg.seed ^ (tag << 40) ^ (first_step as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(stream);
    let mut sampler = LatentSampler::new(stream ^ 0x2A, decoder.config().latent_dim);
    let params = ParamsAdamW { lr: cfg.learning_rate, weight_decay: 0.0, ..Default::default() };
    let mut opt = AdamW::new(encoder.trainable_vars(), params)?;
    let data = dataset.to_dtype(decoder.dtype())?;

    let mut history = Vec::with_capacity(iterations);
    for i in 0..iterations {
        let path = match phase {
            TrainingPhase::PathOne => PathTag::Path1,
            TrainingPhase::DualPath if i % 2 == 0 => PathTag::Path1,
            TrainingPhase::DualPath => PathTag::Path2,
        };
        let (loss, terms): (Tensor, LossTerms) = match path {
            PathTag::Path1 => {
                let idx: Vec<u32> = (0..cfg.batch_size).map(|_| rng.random_range(0..count) as u32).collect();
                let x = data.index_select(&Tensor::new(idx, data.device())?, 0)?;
                let z_e = encoder.encode(&x)?;
                let x_recon = decoder.synthesize(&z_e)?.images;
                path1_loss(&x, &x_recon, &z_e, cfg, kit)?
            }
            PathTag::Path2 => {
                let z_o = zplus(&sampler.sample(cfg.batch_size)?, n, &decoder)?;
                let x_syn = decoder.synthesize(&z_o)?.images.detach();
                let z_e = encoder.encode(&x_syn)?;
                let x_recon = decoder.synthesize(&z_e)?.images;
                path2_loss(&z_o, &z_e, &x_syn, &x_recon, cfg, kit)?
            }
        };
        let total = nn::scalar_f64(&loss)?;
        opt.backward_step(&loss)?;
        let record = EncoderStepRecord {
            step: first_step + i,
            path,
            l2: terms.l2,
            lpips: terms.lpips,
            reg: terms.reg,
            iden: terms.iden,
            z_predict: terms.z_predict,
            total,
        };
        observer.record(&record)?;
        history.push(record);
        let done = first_step + i + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            observer.checkpoint(done, &encoder)?;
        }
    }
    Ok((encoder, history))
}

/// Path-1 training followed by dual-path training.
pub fn train_encoder(
    dataset: &Tensor,
    decoder: &GeneratorState,
    arch: EncoderArch,
    cfg: &EncoderConfig,
    kit: ReconstructionKit<'_>,
    observer: &mut dyn EncoderObserver,
) -> Result<(EncoderState, Vec<EncoderStepRecord>)> {
    cfg.validate()?;
    check_pairing(&arch, decoder, dataset)?;
    let encoder = EncoderState::new(arch, cfg.seed, decoder.dtype(), decoder.device())?;
    let (encoder, mut history) = train_phase(
        encoder,
        dataset,
        decoder,
        cfg,
        kit,
        TrainingPhase::PathOne,
        cfg.stage1_iterations,
        0,
        observer,
    )?;
    let (encoder, more) = train_phase(
        encoder,
        dataset,
        decoder,
        cfg,
        kit,
        TrainingPhase::DualPath,
        cfg.dual_path_iterations,
        cfg.stage1_iterations,
        observer,
    )?;
    history.extend(more);
    Ok((encoder, history))
}

/// `smooth_l1(z_o, E(G(z_o)))` over repeat-extended codes.
pub fn latent_prediction_error(encoder: &EncoderState, decoder: &GeneratorState, codes: &[LatentCode]) -> Result<f64> {
    if codes.is_empty() {
        return Err(invalid!("no held-out codes"));
    }
    let z_o = zplus(codes, decoder.n(), decoder)?;
    let x = decoder.synthesize(&z_o)?.images.detach();
    let z_e = encoder.encode(&x)?.detach();
    nn::scalar_f64(&smooth_l1(&z_o.to_dtype(z_e.dtype())?, &z_e)?)
}
