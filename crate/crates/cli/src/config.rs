//! Run configuration: one TOML file, an optional named preset, and flag
//! overrides. Precedence is defaults < preset < file < flags.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use fewshot_core::adaptation::{AdaptationConfig, TargetDomain};
use fewshot_core::encoder::EncoderConfig;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, CliResult};

/// Environment variable naming the default checkpoint directory.
pub const CACHE_ENV: &str = "FEWSHOT_CACHE_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    TrainEncoder,
    Adapt,
    Stylize,
    Sample,
    Evaluate,
    Invert,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Fid,
    LpipsDistance,
    LpipsCluster,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Self::Fid, Self::LpipsDistance, Self::LpipsCluster];

    pub fn name(self) -> &'static str {
        match self {
            Self::Fid => "fid",
            Self::LpipsDistance => "lpips-distance",
            Self::LpipsCluster => "lpips-cluster",
        }
    }
}

/// Which encoder size `train-encoder` builds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderSize {
    Toy,
    Standard,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Input image directory: photos, adaptation targets, or generated images
    /// for `evaluate`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decoder: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub encoder: Option<PathBuf>,
    /// Source-domain discriminator to start adaptation from.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub discriminator: Option<PathBuf>,
    /// FID reference set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<PathBuf>,
    /// The few-shot training images, for LPIPS-cluster.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub training: Option<PathBuf>,
    /// Input photos paired with the generated images, for LPIPS-distance.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inputs: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

/// Feature backbone used by perceptual losses and metrics. Without a path,
/// a toy backbone is built from `seed`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneChoice {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSettings {
    pub count: usize,
    pub grid_columns: usize,
}

impl Default for SampleSettings {
    fn default() -> Self {
        Self { count: 16, grid_columns: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSettings {
    pub metrics: Vec<Metric>,
}

impl Default for EvaluateSettings {
    fn default() -> Self {
        Self { metrics: Metric::ALL.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub stage: Stage,
    pub resolution: usize,
    /// Seeds every random stream of the run; overrides the seeds inside the
    /// adaptation and encoder sections.
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub encoder_size: EncoderSize,
    pub paths: Paths,
    pub backbone: BackboneChoice,
    pub sample: SampleSettings,
    pub evaluate: EvaluateSettings,
    pub adaptation: AdaptationConfig,
    pub encoder: EncoderConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Sample,
            resolution: 32,
            seed: 0,
            preset: None,
            encoder_size: EncoderSize::Toy,
            paths: Paths::default(),
            backbone: BackboneChoice::default(),
            sample: SampleSettings::default(),
            evaluate: EvaluateSettings::default(),
            adaptation: AdaptationConfig::default(),
            encoder: EncoderConfig::default(),
        }
    }
}

/// Named starting points. `paper-<domain>` carries the adaptation recipe of
/// that domain; `paper-encoder` the full-length encoder schedule.
pub fn preset_names() -> Vec<String> {
    let mut names = vec!["toy".to_string(), "paper-encoder".to_string()];
    names.extend(TargetDomain::ALL.iter().map(|d| format!("paper-{}", d.name().replace('_', "-"))));
    names
}

pub fn apply_preset(cfg: &mut RunConfig, name: &str) -> CliResult<()> {
    match name {
        "toy" => {}
        "paper-encoder" => {
            cfg.encoder = EncoderConfig::full_scale();
            cfg.encoder_size = EncoderSize::Standard;
        }
        _ => {
            let domain = name
                .strip_prefix("paper-")
                .and_then(|d| TargetDomain::from_str(d).ok())
                .ok_or_else(|| config_err!("unknown preset `{name}`; known: {}", preset_names().join(", ")))?;
            cfg.adaptation = AdaptationConfig::for_domain(domain);
        }
    }
    cfg.preset = Some(name.to_string());
    Ok(())
}

/// Values given on the command line; `None` leaves the file value alone.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub stage: Option<Stage>,
    pub preset: Option<String>,
    pub seed: Option<u64>,
    pub resolution: Option<usize>,
    pub out: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub decoder: Option<PathBuf>,
    pub encoder: Option<PathBuf>,
    pub count: Option<usize>,
    pub iterations: Option<usize>,
    pub allow_many_shots: bool,
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| config_err!("{e}"))
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string_pretty(self).map_err(|e| config_err!("{e}"))
    }

    /// Builds the effective configuration from an optional file plus flags.
    pub fn resolve(file: Option<&Path>, flags: &Overrides) -> CliResult<Self> {
        let file_table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| config_err!("{}: {e}", p.display()))?;
                text.parse::<toml::Table>().map_err(|e| config_err!("{}: {e}", p.display()))?
            }
            None => toml::Table::new(),
        };
        let preset = flags
            .preset
            .clone()
            .or_else(|| file_table.get("preset").and_then(|v| v.as_str()).map(String::from));
        let mut base = RunConfig::default();
        if let Some(name) = &preset {
            apply_preset(&mut base, name)?;
        }
        let mut table = toml::Table::try_from(&base).map_err(|e| config_err!("{e}"))?;
        merge(&mut table, file_table);
        let mut cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| config_err!("{e}"))?;
        cfg.preset = preset;
        cfg.apply(flags);
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, f: &Overrides) {
        if let Some(s) = f.stage {
            self.stage = s;
        }
        if let Some(s) = f.seed {
            self.seed = s;
        }
        if let Some(r) = f.resolution {
            self.resolution = r;
        }
        for (dst, src) in [
            (&mut self.paths.out, &f.out),
            (&mut self.paths.dataset, &f.dataset),
            (&mut self.paths.decoder, &f.decoder),
            (&mut self.paths.encoder, &f.encoder),
        ] {
            if src.is_some() {
                dst.clone_from(src);
            }
        }
        if let Some(c) = f.count {
            self.sample.count = c;
        }
        if let Some(i) = f.iterations {
            self.adaptation.iterations = i;
        }
        if f.allow_many_shots {
            self.adaptation.allow_many_shots = true;
        }
        self.adaptation.seed = self.seed;
        self.encoder.seed = self.seed;
    }

    pub fn validate(&self) -> CliResult<()> {
        fewshot_core::latent::layer_count(self.resolution).map_err(|e| config_err!("resolution: {e}"))?;
        if self.seed > i64::MAX as u64 {
            return Err(config_err!("seed must fit in a signed 64-bit integer"));
        }
        self.adaptation.validate().map_err(|e| config_err!("adaptation: {e}"))?;
        self.encoder.validate().map_err(|e| config_err!("encoder: {e}"))?;
        if self.sample.grid_columns == 0 {
            return Err(config_err!("sample.grid_columns must be >= 1"));
        }
        Ok(())
    }

    /// Output directory, falling back to `<cache>/<stage>` and then
    /// `runs/<stage>`.
    pub fn out_dir(&self) -> PathBuf {
        if let Some(p) = &self.paths.out {
            return p.clone();
        }
        let stage = toml::Value::try_from(self.stage)
            .ok()
            .and_then(|v| v.as_str().map(String::from))
            .unwrap_or_else(|| "run".into());
        match cache_dir() {
            Some(c) => c.join(stage),
            None => PathBuf::from("runs").join(stage),
        }
    }
}

pub fn cache_dir() -> Option<PathBuf> {
    std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

/// Resolves a checkpoint path: as given if it exists, else relative to the
/// cache directory.
pub fn resolve_checkpoint(what: &str, path: Option<&PathBuf>) -> CliResult<PathBuf> {
    let p = path.ok_or_else(|| config_err!("no {what} checkpoint given"))?;
    if p.is_file() {
        return Ok(p.clone());
    }
    if p.is_relative() {
        if let Some(c) = cache_dir() {
            let cached = c.join(p);
            if cached.is_file() {
                return Ok(cached);
            }
        }
    }
    Err(config_err!("{what} checkpoint {} not found", p.display()))
}

/// An input directory that must exist.
pub fn require_dir(what: &str, path: Option<&PathBuf>) -> CliResult<PathBuf> {
    let p = path.ok_or_else(|| config_err!("no {what} directory given"))?;
    if !p.is_dir() {
        return Err(config_err!("{what} directory {} does not exist", p.display()));
    }
    Ok(p.clone())
}
