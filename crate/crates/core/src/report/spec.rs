use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::SigmaInput;
use crate::pipeline::{IngestOptions, SplitFractions};
use crate::train::{LossWeights, Mode, TrainConfig};
use crate::{Error, Result};

/// Environment variable naming the default dataset root.
pub const DATA_ENV: &str = "LATENTVISION_DATA";

/// File name of the archived, fully resolved run configuration.
pub const RESOLVED_NAME: &str = "config.resolved.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommandKind {
    Train,
}

fn default_command() -> CommandKind {
    CommandKind::Train
}

fn one() -> usize {
    1
}

/// A training run, read from a TOML file.
///
/// ```toml
/// output_dir = "runs/q4-frozen"
/// seed = 0
///
/// [data]
/// root = "data/minc"
///
/// [codec]
/// quality_index = 4
/// weights = "weights/hyperprior-mse-q4.codec"
///
/// [train]
/// mode = "frozen"
/// epochs = 30
/// batch_size = 32
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    #[serde(default = "default_command")]
    pub command: CommandKind,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data: DataSpec,
    pub codec: CodecSpec,
    #[serde(default)]
    pub classifier: ClassifierSpec,
    pub train: TrainSpec,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    /// Falls back to `$LATENTVISION_DATA`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    /// Tab-separated `path, class, split` lines; without it classes are the
    /// subdirectories of the root.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fractions: Option<SplitFractions>,
    #[serde(default)]
    pub verify_images: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecSpec {
    pub quality_index: u8,
    /// Only used when the codec is created from scratch.
    #[serde(default = "one")]
    pub width_divisor: usize,
    /// Required for frozen and joint runs; codec runs continue from it
    /// when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierSpec {
    #[serde(default = "one")]
    pub width_divisor: usize,
    #[serde(default = "default_sigma_input")]
    pub sigma_input: SigmaInput,
    /// Start from these weights instead of a fresh model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<PathBuf>,
}

fn default_sigma_input() -> SigmaInput {
    SigmaInput::Raw
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        ClassifierSpec {
            width_divisor: 1,
            sigma_input: SigmaInput::Raw,
            init: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rd_weight: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub loss_weights: LossWeights,
}

/// Every key a spec may contain, by table.
const SCHEMA: &[(&str, &[&str])] = &[
    (
        "",
        &["command", "output_dir", "seed", "data", "codec", "classifier", "train"],
    ),
    (
        "data",
        &["root", "manifest", "split_seed", "fractions", "verify_images"],
    ),
    ("data.fractions", &["train", "val", "test"]),
    ("codec", &["quality_index", "width_divisor", "weights"]),
    ("classifier", &["width_divisor", "sigma_input", "init"]),
    (
        "train",
        &[
            "mode",
            "epochs",
            "batch_size",
            "learning_rate",
            "rd_weight",
            "grad_clip",
            "loss_weights",
        ],
    ),
    ("train.loss_weights", &["task", "rate", "dist"]),
];

fn unknown_keys(table: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    let allowed = SCHEMA.iter().find(|(p, _)| *p == prefix).map(|(_, k)| *k);
    for (k, v) in table {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match allowed {
            Some(keys) if keys.contains(&k.as_str()) => {
                if let toml::Value::Table(t) = v {
                    unknown_keys(t, &path, out);
                }
            }
            _ => out.push(path),
        }
    }
}

/// Parse a `--set` value as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Apply `key.path=value` overrides to a parsed spec table.
pub fn apply_overrides(table: &mut toml::Table, overrides: &[String]) -> Result<()> {
    for ov in overrides {
        let Some((key, raw)) = ov.split_once('=') else {
            return Err(Error::Config(format!("override {ov:?} is not of the form key=value")));
        };
        let parts: Vec<&str> = key.trim().split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!("override {ov:?} has an empty key")));
        }
        let mut t = &mut *table;
        for p in &parts[..parts.len() - 1] {
            let entry = t
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            t = match entry {
                toml::Value::Table(inner) => inner,
                _ => return Err(Error::Config(format!("override {ov:?}: {p} is not a table"))),
            };
        }
        t.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    }
    Ok(())
}

impl RunSpec {
    /// Parse TOML text with overrides applied. Unknown keys are all listed
    /// in one error.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("spec is not valid TOML: {e}")))?;
        apply_overrides(&mut table, overrides)?;
        let mut unknown = Vec::new();
        unknown_keys(&table, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))));
        }
        let spec: RunSpec = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("invalid spec: {}", e.message())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read spec {}: {e}", path.display())))?;
        Self::parse(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            mode: t.mode,
            quality_index: self.codec.quality_index,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            seed: self.seed,
            rd_weight: t.rd_weight,
            loss_weights: t.loss_weights,
            grad_clip: t.grad_clip,
        }
    }

    pub fn ingest_options(&self) -> IngestOptions {
        IngestOptions {
            fractions: self.data.fractions.unwrap_or_default(),
            seed: self.data.split_seed,
            verify_images: self.data.verify_images,
        }
    }

    /// Fill in the dataset root from the environment if the spec has none.
    pub fn resolve_root(&mut self) -> Result<PathBuf> {
        if self.data.root.is_none() {
            self.data.root = std::env::var_os(DATA_ENV).map(PathBuf::from);
        }
        self.data
            .root
            .clone()
            .ok_or_else(|| Error::Config(format!("data.root is not set and ${DATA_ENV} is empty")))
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if let Err(Error::Config(m)) = self.train_config().validate() {
            bad.push(m);
        }
        if self.codec.width_divisor == 0 {
            bad.push("codec.width_divisor must be positive".into());
        }
        if self.classifier.width_divisor == 0 {
            bad.push("classifier.width_divisor must be positive".into());
        }
        if self.train.mode != Mode::Codec && self.codec.weights.is_none() {
            bad.push(format!(
                "codec.weights is required for {} training",
                self.train.mode.as_str()
            ));
        }
        if let Some(f) = self.data.fractions {
            if let Err(Error::Config(m) | Error::Dataset(m)) = f.validate() {
                bad.push(m);
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}
