//! The pipeline commands. Each reads only its inputs and writes only under
//! its output directory.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use fewshot_core::adaptation::{adapt, AdaptContext, AdaptObserver, DiscriminatorPair, StepRecord};
use fewshot_core::checkpoint::{
    load_backbone, load_discriminator, load_encoder, load_generator, save_discriminator, save_encoder, save_generator,
};
use fewshot_core::encoder::{
    train_encoder, EncoderArch, EncoderObserver, EncoderState, EncoderStepRecord, ReconstructionKit,
};
use fewshot_core::generator::{GeneratorConfig, GeneratorState};
use fewshot_core::images::{load_dir, make_grid, save_batch, save_image};
use fewshot_core::latent::{extend_repeat, sample_z, ExtendedLatent};
use fewshot_core::metrics::{fid, fid_features, lpips_cluster, lpips_distance_eval, MetricsReport, ReportCounts};
use fewshot_core::perceptual::{ConvBackbone, FeatureBackbone, PerceptualWeights, ToyIdentityEmbedder};
use fewshot_core::toy::{pretrain_source, PretrainConfig, ToyDomain, ToyWorld};
use serde::Serialize;

use crate::config::{require_dir, resolve_checkpoint, EncoderSize, Metric, RunConfig, Stage};
use crate::error::{config_err, CliError, CliResult};

const DTYPE: DType = DType::F32;
/// Images per forward pass when encoding or synthesizing many inputs.
const CHUNK: usize = 16;

/// Files a command wrote, in creation order.
#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub outputs: Vec<PathBuf>,
    pub summary: String,
}

fn device() -> Device {
    Device::Cpu
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn run(cfg: &RunConfig) -> CliResult<Outcome> {
    match cfg.stage {
        Stage::TrainEncoder => cmd_train_encoder(cfg),
        Stage::Adapt => cmd_adapt(cfg),
        Stage::Stylize | Stage::Invert => cmd_stylize(cfg),
        Stage::Sample => cmd_sample(cfg),
        Stage::Evaluate => cmd_evaluate(cfg),
    }
}

fn backbone(cfg: &RunConfig, channels: usize) -> CliResult<ConvBackbone> {
    let b = match &cfg.backbone.path {
        Some(p) => load_backbone(&resolve_checkpoint("backbone", Some(p))?, DTYPE, &device())?,
        None => ConvBackbone::toy(channels, cfg.backbone.seed, DTYPE, &device())?,
    };
    if b.config().in_channels != channels {
        return Err(config_err!("backbone takes {} channels, images have {channels}", b.config().in_channels));
    }
    Ok(b)
}

fn decoder(cfg: &RunConfig) -> CliResult<GeneratorState> {
    let path = resolve_checkpoint("decoder", cfg.paths.decoder.as_ref())?;
    let g = load_generator(&path, DTYPE, &device())?;
    if g.resolution() != cfg.resolution {
        return Err(config_err!("decoder resolution {} differs from run resolution {}", g.resolution(), cfg.resolution));
    }
    Ok(g)
}

fn images(what: &str, dir: Option<&PathBuf>, resolution: usize, channels: usize) -> CliResult<(Tensor, Vec<PathBuf>)> {
    let dir = require_dir(what, dir)?;
    Ok(load_dir(&dir, resolution, channels)?)
}

/// Writes the loss curve as JSON lines plus periodic checkpoints and grids.
pub struct RunObserver {
    dir: PathBuf,
    log: BufWriter<File>,
    grid_columns: usize,
    written: Vec<PathBuf>,
}

impl RunObserver {
    pub fn create(dir: &Path, grid_columns: usize) -> CliResult<Self> {
        create_dir(dir)?;
        let path = dir.join("loss.jsonl");
        let log = BufWriter::new(File::create(&path).map_err(|e| io_err(&path, e))?);
        Ok(Self { dir: dir.to_path_buf(), log, grid_columns, written: vec![path] })
    }

    fn line<T: Serialize>(&mut self, record: &T) -> fewshot_core::Result<()> {
        serde_json::to_writer(&mut self.log, record)?;
        self.log.write_all(b"\n")?;
        Ok(())
    }

    fn sub_path(&mut self, sub: &str, name: String) -> fewshot_core::Result<PathBuf> {
        let dir = self.dir.join(sub);
        std::fs::create_dir_all(&dir)?;
        let p = dir.join(name);
        self.written.push(p.clone());
        Ok(p)
    }

    pub fn finish(mut self) -> CliResult<Vec<PathBuf>> {
        self.log.flush().map_err(|e| io_err(&self.dir, e))?;
        Ok(self.written)
    }
}

impl AdaptObserver for RunObserver {
    fn record(&mut self, record: &StepRecord) -> fewshot_core::Result<()> {
        self.line(record)
    }

    fn checkpoint(&mut self, step: usize, g: &GeneratorState, d: &DiscriminatorPair) -> fewshot_core::Result<()> {
        save_generator(g, &self.sub_path("checkpoints", format!("decoder_{step:06}.safetensors"))?)?;
        save_discriminator(d, &self.sub_path("checkpoints", format!("discriminator_{step:06}.safetensors"))?)
    }

    fn samples(&mut self, step: usize, images: &Tensor) -> fewshot_core::Result<()> {
        let grid = make_grid(images, self.grid_columns)?;
        save_image(&grid, &self.sub_path("samples", format!("step_{step:06}.png"))?)
    }
}

impl EncoderObserver for RunObserver {
    fn record(&mut self, record: &EncoderStepRecord) -> fewshot_core::Result<()> {
        self.line(record)
    }

    fn checkpoint(&mut self, step: usize, e: &EncoderState) -> fewshot_core::Result<()> {
        save_encoder(e, &self.sub_path("checkpoints", format!("encoder_{step:06}.safetensors"))?)
    }
}

fn save_config(cfg: &RunConfig, dir: &Path) -> CliResult<PathBuf> {
    let p = dir.join("config.toml");
    write_text(&p, &cfg.to_toml()?)?;
    Ok(p)
}

pub fn cmd_train_encoder(cfg: &RunConfig) -> CliResult<Outcome> {
    let dec = decoder(cfg)?;
    let channels = dec.config().image_channels;
    let (data, _) = images("dataset", cfg.paths.dataset.as_ref(), cfg.resolution, channels)?;
    let arch = match cfg.encoder_size {
        EncoderSize::Toy => EncoderArch::toy(cfg.resolution, dec.config().latent_dim),
        EncoderSize::Standard => EncoderArch { image_channels: channels, ..EncoderArch::standard(cfg.resolution) },
    };
    if arch.latent_dim != dec.config().latent_dim {
        return Err(config_err!("encoder latent dim {} does not match decoder latent dim {}", arch.latent_dim, dec.config().latent_dim));
    }
    arch.validate().map_err(|e| config_err!("encoder: {e}"))?;
    let bb = backbone(cfg, channels)?;
    let weights = PerceptualWeights::toy(bb.num_taps());
    let embedder = ToyIdentityEmbedder::new(channels, 4, 16, cfg.backbone.seed, DTYPE, &device())?;
    let kit = ReconstructionKit { backbone: &bb, weights: &weights, embedder: &embedder };

    let out = cfg.out_dir();
    let before = dec.checksum()?;
    let mut obs = RunObserver::create(&out, cfg.sample.grid_columns)?;
    let (encoder, history) = train_encoder(&data, &dec, arch, &cfg.encoder, kit, &mut obs)?;
    if dec.checksum()? != before {
        return Err(CliError::Numeric("decoder parameters changed during encoder training".into()));
    }
    let mut outputs = obs.finish()?;
    let path = out.join("encoder.safetensors");
    save_encoder(&encoder, &path)?;
    outputs.push(path);
    outputs.push(save_config(cfg, &out)?);
    let last = history.last().map(|r| format!(", final loss {:.4}", r.total)).unwrap_or_default();
    Ok(Outcome { outputs, summary: format!("trained encoder for {} steps{last}", history.len()) })
}

pub fn cmd_adapt(cfg: &RunConfig) -> CliResult<Outcome> {
    let source = decoder(cfg)?;
    let channels = source.config().image_channels;
    let (targets, _) = images("target image", cfg.paths.dataset.as_ref(), cfg.resolution, channels)?;
    let k = targets.dim(0).map_err(fewshot_core::Error::from)?;
    if k > 10 && !cfg.adaptation.allow_many_shots {
        return Err(CliError::Input(format!("{k} target images; few-shot adaptation takes 1 to 10 (pass --allow-many-shots to override)")));
    }
    let disc = match &cfg.paths.discriminator {
        Some(p) => Some(load_discriminator(&resolve_checkpoint("discriminator", Some(p))?, DTYPE, &device())?),
        None => None,
    };
    let bb = backbone(cfg, channels)?;
    let weights = PerceptualWeights::toy(bb.num_taps());

    let out = cfg.out_dir();
    let mut obs = RunObserver::create(&out, cfg.sample.grid_columns)?;
    let ctx = AdaptContext { backbone: &bb, weights: &weights, discriminator: disc, observer: &mut obs };
    let outcome = adapt(&source, &targets, &cfg.adaptation, ctx)?;
    let mut outputs = obs.finish()?;
    let g_path = out.join("decoder.safetensors");
    save_generator(&outcome.generator, &g_path)?;
    let d_path = out.join("discriminator.safetensors");
    save_discriminator(&outcome.discriminator, &d_path)?;
    outputs.extend([g_path, d_path, save_config(cfg, &out)?]);
    let last = outcome.history.last().map(|r| format!(", final loss {:.4}", r.total)).unwrap_or_default();
    Ok(Outcome { outputs, summary: format!("adapted to {k} target images in {} steps{last}", outcome.history.len()) })
}

/// `stylize` and `invert`: decode the encoding of every input photo. Which
/// of the two it is depends only on the decoder checkpoint.
pub fn cmd_stylize(cfg: &RunConfig) -> CliResult<Outcome> {
    let enc_path = resolve_checkpoint("encoder", cfg.paths.encoder.as_ref())?;
    let encoder = load_encoder(&enc_path, DTYPE, &device())?;
    let dec = decoder(cfg)?;
    if encoder.arch().resolution != dec.resolution() || encoder.n() != dec.n() {
        return Err(config_err!(
            "encoder resolution {} does not match decoder resolution {}",
            encoder.arch().resolution,
            dec.resolution()
        ));
    }
    if encoder.arch().latent_dim != dec.config().latent_dim {
        return Err(config_err!("encoder and decoder latent dims differ"));
    }
    let channels = dec.config().image_channels;
    let (photos, paths) = images("input photo", cfg.paths.dataset.as_ref(), cfg.resolution, channels)?;
    let names = output_names(&paths)?;

    let out = cfg.out_dir();
    create_dir(&out)?;
    let mut outputs = Vec::with_capacity(paths.len());
    let mut start = 0;
    while start < paths.len() {
        let len = CHUNK.min(paths.len() - start);
        let batch = photos.narrow(0, start, len).map_err(fewshot_core::Error::from)?;
        let z = encoder.encode(&batch.to_dtype(DTYPE).map_err(fewshot_core::Error::from)?)?;
        let generated = dec.synthesize(&z)?.images;
        for i in 0..len {
            let p = out.join(&names[start + i]);
            save_image(&generated.get(i).map_err(fewshot_core::Error::from)?, &p)?;
            outputs.push(p);
        }
        start += len;
    }
    let verb = if cfg.stage == Stage::Invert { "inverted" } else { "stylized" };
    Ok(Outcome { summary: format!("{verb} {} images", outputs.len()), outputs })
}

/// `<stem>.png` for every input, rejecting collisions such as `a.jpg` + `a.png`.
fn output_names(paths: &[PathBuf]) -> CliResult<Vec<String>> {
    let mut seen = std::collections::BTreeSet::new();
    paths
        .iter()
        .map(|p| {
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let name = format!("{stem}.png");
            if !seen.insert(name.clone()) {
                return Err(CliError::Input(format!("two inputs map to the output name {name}")));
            }
            Ok(name)
        })
        .collect()
}

pub fn cmd_sample(cfg: &RunConfig) -> CliResult<Outcome> {
    let dec = decoder(cfg)?;
    let count = cfg.sample.count;
    if count == 0 {
        return Ok(Outcome { outputs: vec![], summary: "sampled 0 images".into() });
    }
    let codes = sample_z(count, cfg.seed, dec.config().latent_dim)?;
    let ext: Vec<ExtendedLatent> = codes.iter().map(|z| extend_repeat(z, dec.n())).collect::<Result<_, _>>()?;
    if let Some(i) = ext.iter().position(|c| !c.is_repeated()) {
        return Err(CliError::Numeric(format!("sampled code {i} is not repeat-extended")));
    }
    let mut batches = Vec::new();
    for chunk in ext.chunks(CHUNK) {
        batches.push(dec.synthesize_latents(chunk)?.images);
    }
    let all = Tensor::cat(&batches, 0).map_err(fewshot_core::Error::from)?;
    let out = cfg.out_dir();
    let mut outputs = save_batch(&all, &out.join("images"), "sample_")?;
    let grid = out.join("grid.png");
    save_image(&make_grid(&all, cfg.sample.grid_columns)?, &grid)?;
    outputs.push(grid);
    Ok(Outcome { outputs, summary: format!("sampled {count} images") })
}

pub fn cmd_evaluate(cfg: &RunConfig) -> CliResult<Outcome> {
    let wanted = &cfg.evaluate.metrics;
    if wanted.is_empty() {
        return Err(config_err!("evaluate.metrics is empty"));
    }
    let missing: Vec<&str> = wanted
        .iter()
        .filter(|m| match m {
            Metric::Fid => cfg.paths.reference.is_none(),
            Metric::LpipsCluster => cfg.paths.training.is_none(),
            Metric::LpipsDistance => cfg.paths.inputs.is_none(),
        })
        .map(|m| m.name())
        .collect();
    if !missing.is_empty() {
        return Err(config_err!("missing reference set for metric(s): {}", missing.join(", ")));
    }
    let channels = 3;
    let res = cfg.resolution;
    let (generated, _) = images("generated image", cfg.paths.dataset.as_ref(), res, channels)?;
    let bb = backbone(cfg, channels)?;
    let weights = PerceptualWeights::toy(bb.num_taps());
    let n = generated.dim(0).map_err(fewshot_core::Error::from)?;
    let mut report = MetricsReport { counts: ReportCounts::default(), ..Default::default() };
    if wanted.contains(&Metric::Fid) {
        let (reference, _) = images("reference", cfg.paths.reference.as_ref(), res, channels)?;
        let fa = fid_features(&generated, &bb)?;
        let fb = fid_features(&reference, &bb)?;
        report.fid = Some(fid(&fa, &fb)?);
        report.counts.fid_generated = n;
        report.counts.fid_reference = reference.dim(0).map_err(fewshot_core::Error::from)?;
    }
    if wanted.contains(&Metric::LpipsDistance) {
        let (inputs, _) = images("input photo", cfg.paths.inputs.as_ref(), res, channels)?;
        report.lpips_distance_mean = Some(lpips_distance_eval(&inputs, &generated, &bb, &weights)?);
        report.counts.lpips_distance_pairs = n;
    }
    if wanted.contains(&Metric::LpipsCluster) {
        let (training, _) = images("training", cfg.paths.training.as_ref(), res, channels)?;
        let stats = lpips_cluster(&generated, &training, &bb, &weights)?;
        report.lpips_cluster_mean = Some(stats.mean);
        report.lpips_cluster_std = Some(stats.std);
        report.counts.lpips_cluster_generated = n;
        report.counts.lpips_cluster_training = training.dim(0).map_err(fewshot_core::Error::from)?;
    }
    let out = cfg.out_dir();
    create_dir(&out)?;
    let path = out.join("metrics.json");
    write_text(&path, &report.to_json()?)?;
    let summary = format!(
        "fid {} | lpips-distance {} | lpips-cluster {}",
        fmt_opt(report.fid),
        fmt_opt(report.lpips_distance_mean),
        report.cluster_summary().unwrap_or_else(|| "-".into())
    );
    Ok(Outcome { outputs: vec![path], summary })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
}

/// Settings of the procedural toy world used by `init-decoder` and
/// `make-toy-data`; both must agree on them.
#[derive(Debug, Clone)]
pub struct ToySettings {
    pub resolution: usize,
    pub latent_dim: usize,
    pub world_seed: u64,
}

/// Writes a fresh toy decoder; with `pretrain_steps > 0` it is first fitted
/// to the photo domain of the toy world.
pub fn init_decoder(toy: &ToySettings, pretrain_steps: usize, seed: u64, out: &Path) -> CliResult<Outcome> {
    let gcfg = GeneratorConfig::toy(toy.resolution, toy.latent_dim);
    gcfg.validate().map_err(|e| config_err!("decoder: {e}"))?;
    let (g, summary) = if pretrain_steps == 0 {
        (GeneratorState::new(gcfg, seed, DTYPE, &device())?, "initialized decoder".to_string())
    } else {
        let world = ToyWorld::new(toy.resolution, toy.latent_dim, toy.world_seed)?;
        let pre = PretrainConfig { steps: pretrain_steps, seed, ..Default::default() };
        let (g, loss) = pretrain_source(&world, gcfg, &pre, DTYPE, &device())?;
        (g, format!("pretrained decoder for {pretrain_steps} steps, final loss {loss:.4}"))
    };
    save_generator(&g, out)?;
    Ok(Outcome { outputs: vec![out.to_path_buf()], summary })
}

pub fn make_toy_data(toy: &ToySettings, domain: ToyDomain, count: usize, seed: u64, out: &Path) -> CliResult<Outcome> {
    let world = ToyWorld::new(toy.resolution, toy.latent_dim, toy.world_seed)?;
    let outputs = if count == 0 { vec![] } else { save_batch(&world.sample_images(count, seed, domain)?, out, "toy_")? };
    Ok(Outcome { summary: format!("wrote {} toy images", outputs.len()), outputs })
}
