//! Run configuration file: TOML with one table per section, so every key is
//! addressed as `section.key` (`train.lr`, `loss.lambda`, `synth.n_classes`).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::check::ToyCheck;
use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthSpec,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub gradcheck: ToyCheck,
    pub paths: Paths,
}

const SECTIONS: [(&str, &[&str]); 5] = [
    (
        "synth",
        &[
            "n_classes",
            "captions_per_class",
            "l_text",
            "l_pc",
            "width",
            "snr",
            "seed",
        ],
    ),
    (
        "train",
        &[
            "epochs",
            "batch_size",
            "lr",
            "beta1",
            "beta2",
            "eps",
            "weight_decay",
            "warmup_fraction",
            "d",
            "heads",
            "layers",
            "seed",
            "curvature_init",
            "alpha_init",
            "shared_encoder",
        ],
    ),
    ("loss", &["tau", "lambda", "k"]),
    (
        "gradcheck",
        &["batch", "tokens", "d_in", "d", "heads", "layers", "step", "seed"],
    ),
    ("paths", &["data", "checkpoint", "metrics"]),
];

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<file>", e.message()))?;
        for (section, value) in &table {
            let Some((_, keys)) = SECTIONS.iter().find(|(s, _)| s == section) else {
                return Err(Error::config(section.clone(), "unknown section"));
            };
            let inner = value
                .as_table()
                .ok_or_else(|| Error::config(section.clone(), "expected a table of keys"))?;
            for (key, v) in inner {
                let dotted = format!("{section}.{key}");
                if !keys.contains(&key.as_str()) {
                    return Err(Error::config(dotted, "unknown key"));
                }
                // type-check one key at a time so the error can name it
                let mut probe = toml::Table::new();
                probe.insert(key.clone(), v.clone());
                let mut wrapper = toml::Table::new();
                wrapper.insert(section.clone(), toml::Value::Table(probe));
                toml::Value::Table(wrapper)
                    .try_into::<RunConfig>()
                    .map_err(|e| Error::config(dotted, e.message()))?;
            }
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::config("<file>", e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.gradcheck.validate()
    }

    /// Every key with its default value, as a config file.
    pub fn documented_defaults() -> String {
        let mut text = toml::to_string(&RunConfig::default()).expect("defaults serialize");
        text = text.replace(
            "shared_encoder = false\n",
            "shared_encoder = false\n# alpha_init = 0.125  (unset: 1/sqrt(train.d))\n",
        );
        text.push_str("\n# [paths] data, checkpoint, metrics: optional, command-line flags take precedence\n");
        text
    }
}
