//! Run configuration: one TOML document covering every module, named
//! presets, and `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{synthetic::synthetic_mask, RegionMask, SplitPolicy};
use crate::decoder::{DataKind, DecoderConfig, DecoderVariant, NoiseEncoderVariant};
use crate::diffusion::{DiffusionConfig, LossKind};
use crate::error::{Error, Result};
use crate::speech::{BackendName, EncoderConfig};
use crate::trainer::TrainConfig;

/// Environment variable naming the dataset root.
pub const DATA_ROOT_ENV: &str = "TALKDIFF_DATA_ROOT";

pub const PRESETS: &[&str] = &[
    "biwi-vertex",
    "vocaset-vertex",
    "multiface-vertex",
    "beat-rig",
    "uudamm-rig",
    "synthetic",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub sequences: usize,
    pub frames: usize,
    pub dims: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    /// Dataset root; falls back to the environment variable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    #[serde(default = "default_manifest")]
    pub manifest: PathBuf,
    /// `biwi`, `vocaset`, `multiface`, `ratio-A-B-C` or `all` (every sequence trains and validates).
    pub split: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    /// Condition on training subjects; sets `decoder.num_styles` from the split when that is 0.
    #[serde(default = "default_true")]
    pub styles: bool,
    /// Generate an in-memory dataset instead of reading a manifest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
}

fn default_manifest() -> PathBuf {
    "manifest.csv".into()
}

fn default_true() -> bool {
    true
}

impl DataConfig {
    pub fn root(&self) -> Result<PathBuf> {
        if let Some(r) = &self.root {
            return Ok(r.clone());
        }
        std::env::var_os(DATA_ROOT_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| Error::Config(format!("data.root is not set and {DATA_ROOT_ENV} is empty")))
    }

    /// `None` for the `all` policy.
    pub fn split_policy(&self) -> Result<Option<SplitPolicy>> {
        if self.split == "all" {
            return Ok(None);
        }
        self.split.parse().map(Some)
    }

    pub fn region_mask(&self, n_groups: usize) -> Result<RegionMask> {
        let mask = match (&self.mask, &self.synthetic) {
            (Some(p), _) => {
                let p = if p.is_relative() && self.synthetic.is_none() {
                    self.root()?.join(p)
                } else {
                    p.clone()
                };
                RegionMask::read(&p)?
            }
            (None, Some(_)) => synthetic_mask(n_groups),
            (None, None) => RegionMask::full(n_groups),
        };
        mask.validate(n_groups)?;
        Ok(mask)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    /// Denoising iterations; defaults to the full schedule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    /// Clamp rig exports to the training range.
    #[serde(default = "default_true")]
    pub clamp_rig: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps: None,
            clamp_rig: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    pub diffusion: DiffusionConfig,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub sample: SampleConfig,
}

fn default_out() -> PathBuf {
    "runs".into()
}

fn vertex_decoder(embedding: usize) -> DecoderConfig {
    DecoderConfig {
        kind: DataKind::Vertex,
        input_embedding_dim: embedding,
        gru_layers: 2,
        hidden_size: 512,
        dropout: 0.3,
        decoder_variant: DecoderVariant::Gru,
        noise_encoder_variant: NoiseEncoderVariant::ConvMax,
        timestep_dim: crate::decoder::DEFAULT_TIMESTEP_DIM,
        num_styles: 0,
        style_every_layer: false,
        attention_heads: 4,
    }
}

fn rig_decoder(layers: usize, hidden: usize) -> DecoderConfig {
    DecoderConfig {
        kind: DataKind::Rig,
        input_embedding_dim: 0,
        gru_layers: layers,
        hidden_size: hidden,
        noise_encoder_variant: NoiseEncoderVariant::None,
        ..vertex_decoder(0)
    }
}

fn hubert() -> EncoderConfig {
    EncoderConfig {
        name: BackendName::ReferencePretrained,
        feature_dim: 768,
        ..EncoderConfig::default()
    }
}

fn data(kind: DataKind, split: &str) -> DataConfig {
    DataConfig {
        kind,
        root: None,
        manifest: default_manifest(),
        split: split.into(),
        mask: None,
        styles: true,
        synthetic: None,
    }
}

fn schedule(steps: usize) -> DiffusionConfig {
    DiffusionConfig {
        steps,
        beta_start: 1e-4,
        beta_end: 0.02,
        loss: LossKind::Mse,
        enabled: true,
    }
}

fn train(epochs: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-4,
        epochs,
        ..TrainConfig::default()
    }
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let (data, encoder, diffusion, decoder, train) = match name {
            "biwi-vertex" => (data(DataKind::Vertex, "biwi"), hubert(), schedule(500), vertex_decoder(512), train(50)),
            "vocaset-vertex" => (data(DataKind::Vertex, "vocaset"), hubert(), schedule(500), vertex_decoder(256), train(50)),
            "multiface-vertex" => (
                data(DataKind::Vertex, "multiface"),
                hubert(),
                schedule(500),
                vertex_decoder(256),
                train(50),
            ),
            "beat-rig" => (data(DataKind::Rig, "ratio-80-10-10"), hubert(), schedule(1000), rig_decoder(2, 256), train(100)),
            "uudamm-rig" => (data(DataKind::Rig, "ratio-80-10-10"), hubert(), schedule(1000), rig_decoder(4, 1024), train(100)),
            "synthetic" => (
                DataConfig {
                    synthetic: Some(SyntheticConfig {
                        sequences: 8,
                        frames: 20,
                        dims: 30,
                        seed: 0,
                    }),
                    ..data(DataKind::Rig, "all")
                },
                EncoderConfig::default(),
                schedule(100),
                DecoderConfig {
                    dropout: 0.0,
                    ..rig_decoder(2, 64)
                },
                TrainConfig {
                    learning_rate: 3e-3,
                    ..train(200)
                },
            ),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset `{other}` (known: {})",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(Self {
            preset: Some(name.to_string()),
            seed: 0,
            out_dir: default_out(),
            data,
            encoder,
            diffusion,
            decoder,
            train,
            sample: SampleConfig::default(),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Builds a config from an optional preset, an optional TOML file layered
    /// on top, then `key=value` overrides (values parsed as TOML, bare words as strings).
    pub fn resolve(preset: Option<&str>, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = match preset {
            Some(p) => toml::Table::try_from(Self::preset(p)?).expect("preset serializes"),
            None => toml::Table::new(),
        };
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let layer: toml::Table = text
                .parse()
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            if preset.is_none() {
                if let Some(toml::Value::String(p)) = layer.get("preset") {
                    doc = toml::Table::try_from(Self::preset(p)?).expect("preset serializes");
                }
            }
            merge(&mut doc, layer);
        }
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            set_path(&mut doc, key.trim(), parse_value(value.trim()))?;
        }
        let cfg: Self = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.train.validate()?;
        self.diffusion.schedule()?;
        self.data.split_policy()?;
        if self.decoder.kind != self.data.kind {
            return Err(Error::Config(format!(
                "decoder.kind {:?} does not match data.kind {:?}",
                self.decoder.kind, self.data.kind
            )));
        }
        if let Some(s) = &self.data.synthetic {
            if self.data.kind == DataKind::Vertex && s.dims % 3 != 0 {
                return Err(Error::Config(format!(
                    "data.synthetic.dims = {} cannot be read as vertices (needs a multiple of 3)",
                    s.dims
                )));
            }
        }
        if let Some(s) = self.sample.steps {
            if s == 0 || s > self.diffusion.steps {
                return Err(Error::Config(format!(
                    "sample.steps {s} outside [1, {}]",
                    self.diffusion.steps
                )));
            }
        }
        Ok(())
    }
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn merge(base: &mut toml::Table, layer: toml::Table) {
    for (k, v) in layer {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(l)) => merge(b, l),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn set_path(doc: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("empty override key `{key}`")))?;
    let mut table = doc;
    for p in parts {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(Error::Config(format!("`{p}` in `{key}` is not a section"))),
        };
    }
    table.insert(last.to_string(), value);
    Ok(())
}
