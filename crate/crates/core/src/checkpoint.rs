//! Checkpoint container.
//!
//! A checkpoint is a safetensors file. Its header metadata holds:
//!
//! | key       | value                                                        |
//! |-----------|--------------------------------------------------------------|
//! | `format`  | `fewshot-checkpoint`                                         |
//! | `version` | container major version, currently `1`                       |
//! | `kind`    | `generator`, `encoder`, `discriminator` or `backbone`        |
//! | `config`  | JSON of the architecture config for `kind`                   |
//!
//! Generator checkpoints also carry `resolution`, `n` and `mapping_frozen`.
//! Tensor names are `<group>/<parameter>`; generators use the groups
//! `mapping` and `synthesis`, every other kind uses `params`. Readers accept
//! any file with the same major version and ignore unknown metadata keys.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::safetensors::Load;
use candle_core::{DType, Device, Tensor};
use safetensors::SafeTensors;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::adaptation::{DiscriminatorConfig, DiscriminatorPair};
use crate::encoder::{EncoderArch, EncoderState};
use crate::error::{Error, Result};
use crate::generator::{GeneratorConfig, GeneratorState};
use crate::nn::ParamStore;
use crate::perceptual::{BackboneConfig, ConvBackbone};

pub const FORMAT: &str = "fewshot-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Generator,
    Encoder,
    Discriminator,
    Backbone,
}

impl CheckpointKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Generator => "generator",
            Self::Encoder => "encoder",
            Self::Discriminator => "discriminator",
            Self::Backbone => "backbone",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "generator" => Ok(Self::Generator),
            "encoder" => Ok(Self::Encoder),
            "discriminator" => Ok(Self::Discriminator),
            "backbone" => Ok(Self::Backbone),
            other => Err(Error::Checkpoint(format!("unknown checkpoint kind `{other}`"))),
        }
    }
}

fn ckpt_err(e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(e.to_string())
}

/// In-memory form of one checkpoint file.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(kind: CheckpointKind) -> Self {
        Self { kind, metadata: BTreeMap::new(), tensors: BTreeMap::new() }
    }

    pub fn with_config<C: Serialize>(mut self, config: &C) -> Result<Self> {
        self.metadata.insert("config".into(), serde_json::to_string(config)?);
        Ok(self)
    }

    pub fn config<C: DeserializeOwned>(&self) -> Result<C> {
        let text = self.metadata.get("config").ok_or_else(|| ckpt_err("checkpoint has no config"))?;
        serde_json::from_str(text).map_err(|e| ckpt_err(format!("bad config in checkpoint: {e}")))
    }

    pub fn add_store(&mut self, group: &str, store: &ParamStore) {
        for (name, t) in store.tensors() {
            self.tensors.insert(format!("{group}/{name}"), t);
        }
    }

    /// Parameters under `group`, as a trainable store.
    pub fn store(&self, group: &str, dtype: DType, device: &Device) -> Result<ParamStore> {
        let prefix = format!("{group}/");
        let mut store = ParamStore::new(dtype, device);
        for (name, t) in &self.tensors {
            if let Some(rest) = name.strip_prefix(&prefix) {
                store.insert(rest, t.clone())?;
            }
        }
        if store.is_empty() {
            return Err(ckpt_err(format!("checkpoint has no `{group}` parameters")));
        }
        Ok(store)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut info: HashMap<String, String> = self.metadata.clone().into_iter().collect();
        info.insert("format".into(), FORMAT.into());
        info.insert("version".into(), VERSION.to_string());
        info.insert("kind".into(), self.kind.as_str().into());
        let tensors: Vec<(String, Tensor)> =
            self.tensors.iter().map(|(k, v)| Ok((k.clone(), v.contiguous()?))).collect::<Result<_>>()?;
        safetensors::serialize(tensors, Some(info)).map_err(ckpt_err)
    }

    pub fn from_bytes(bytes: &[u8], device: &Device) -> Result<Self> {
        let st = SafeTensors::deserialize(bytes).map_err(ckpt_err)?;
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(ckpt_err)?;
        let info = header.metadata().clone().unwrap_or_default();
        if info.get("format").map(String::as_str) != Some(FORMAT) {
            return Err(ckpt_err("not a fewshot checkpoint"));
        }
        let version = info.get("version").ok_or_else(|| ckpt_err("missing version"))?;
        if version.parse::<u32>().map_err(ckpt_err)? != VERSION {
            return Err(ckpt_err(format!("unsupported checkpoint version {version}")));
        }
        let kind = CheckpointKind::parse(info.get("kind").ok_or_else(|| ckpt_err("missing kind"))?)?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            tensors.insert(name, view.load(device)?);
        }
        let metadata = info
            .into_iter()
            .filter(|(k, _)| !matches!(k.as_str(), "format" | "version" | "kind"))
            .collect();
        Ok(Self { kind, metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| ckpt_err(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes, device)
    }

    fn expect(self, kind: CheckpointKind) -> Result<Self> {
        if self.kind != kind {
            return Err(ckpt_err(format!("expected a {} checkpoint, found {}", kind.as_str(), self.kind.as_str())));
        }
        Ok(self)
    }
}

pub fn generator_checkpoint(g: &GeneratorState) -> Result<Checkpoint> {
    let mut c = Checkpoint::new(CheckpointKind::Generator).with_config(g.config())?;
    c.metadata.insert("resolution".into(), g.resolution().to_string());
    c.metadata.insert("n".into(), g.n().to_string());
    c.metadata.insert("mapping_frozen".into(), g.mapping_frozen().to_string());
    c.add_store("mapping", g.mapping());
    c.add_store("synthesis", g.synthesis());
    Ok(c)
}

pub fn save_generator(g: &GeneratorState, path: &Path) -> Result<()> {
    generator_checkpoint(g)?.save(path)
}

pub fn generator_from_checkpoint(c: Checkpoint, dtype: DType, device: &Device) -> Result<GeneratorState> {
    let c = c.expect(CheckpointKind::Generator)?;
    let config: GeneratorConfig = c.config()?;
    if let Some(n) = c.metadata.get("n") {
        if n.parse::<usize>().map_err(ckpt_err)? != config.n() {
            return Err(ckpt_err(format!("checkpoint n = {n} disagrees with its config ({})", config.n())));
        }
    }
    let mapping = c.store("mapping", dtype, device)?;
    let synthesis = c.store("synthesis", dtype, device)?;
    let mut g = GeneratorState::from_parts(config, mapping, synthesis)?;
    g.set_mapping_frozen(c.metadata.get("mapping_frozen").map(String::as_str) == Some("true"));
    Ok(g)
}

pub fn load_generator(path: &Path, dtype: DType, device: &Device) -> Result<GeneratorState> {
    generator_from_checkpoint(Checkpoint::load(path, device)?, dtype, device)
}

pub fn save_encoder(e: &EncoderState, path: &Path) -> Result<()> {
    let mut c = Checkpoint::new(CheckpointKind::Encoder).with_config(e.arch())?;
    c.metadata.insert("resolution".into(), e.arch().resolution.to_string());
    c.metadata.insert("n".into(), e.n().to_string());
    c.add_store("params", e.store());
    c.save(path)
}

pub fn load_encoder(path: &Path, dtype: DType, device: &Device) -> Result<EncoderState> {
    let c = Checkpoint::load(path, device)?.expect(CheckpointKind::Encoder)?;
    let arch: EncoderArch = c.config()?;
    EncoderState::from_store(arch, c.store("params", dtype, device)?)
}

pub fn save_discriminator(d: &DiscriminatorPair, path: &Path) -> Result<()> {
    let mut c = Checkpoint::new(CheckpointKind::Discriminator).with_config(d.config())?;
    c.add_store("params", d.store());
    c.save(path)
}

pub fn load_discriminator(path: &Path, dtype: DType, device: &Device) -> Result<DiscriminatorPair> {
    let c = Checkpoint::load(path, device)?.expect(CheckpointKind::Discriminator)?;
    let config: DiscriminatorConfig = c.config()?;
    DiscriminatorPair::from_store(config, c.store("params", dtype, device)?)
}

pub fn save_backbone(b: &ConvBackbone, path: &Path) -> Result<()> {
    let mut c = Checkpoint::new(CheckpointKind::Backbone).with_config(b.config())?;
    c.add_store("params", b.store());
    c.save(path)
}

/// Loads backbone weights, e.g. converted classifier weights following the
/// naming contract of [`ConvBackbone::from_store`].
pub fn load_backbone(path: &Path, dtype: DType, device: &Device) -> Result<ConvBackbone> {
    let c = Checkpoint::load(path, device)?.expect(CheckpointKind::Backbone)?;
    let config: BackboneConfig = c.config()?;
    ConvBackbone::from_store(config, c.store("params", dtype, device)?)
}
