//! The run configuration file and its echo next to every artifact.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use t2m_core::metrics::EvalConfig;
use t2m_core::model::ModelConfig;
use t2m_core::perturb::RsrOptions;
use t2m_core::toyworld::GrammarConfig;
use t2m_core::train::TrainConfig;

use crate::error::CliError;

/// Every tunable of the pipeline. Each section falls back to its defaults,
/// so an empty file is a valid configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub grammar: GrammarConfig,
    pub perturb: RsrOptions,
    pub model: ModelConfig,
    /// Base training.
    pub train: TrainConfig,
    /// Stability fine-tuning, including the `[finetune.sato]` weights.
    /// Keys left out fall back to the fine-tuning defaults, not the base
    /// training ones.
    #[serde(deserialize_with = "finetune_over_defaults")]
    pub finetune: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            grammar: GrammarConfig::default(),
            perturb: RsrOptions::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            finetune: TrainConfig::finetune(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = read_text(path)?;
        toml::from_str(&text)
            .map_err(|e| CliError::Validation(format!("{}: {}", path.display(), e.message())))
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

fn finetune_over_defaults<'de, D: serde::Deserializer<'de>>(d: D) -> Result<TrainConfig, D::Error> {
    use serde::de::Error;
    let overlay = toml::Table::deserialize(d)?;
    let mut table = toml::Table::try_from(TrainConfig::finetune()).map_err(D::Error::custom)?;
    merge(&mut table, overlay);
    TrainConfig::deserialize(table).map_err(D::Error::custom)
}

/// What produced an artifact: the command, its seed and inputs, and the
/// configuration in effect after flags were applied.
#[derive(Serialize)]
struct Echo<'a> {
    run: RunInfo<'a>,
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<&'a RunConfig>,
}

#[derive(Serialize)]
struct RunInfo<'a> {
    command: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    inputs: Vec<String>,
}

pub struct Provenance<'a> {
    pub command: &'a str,
    /// `None` for commands without randomness.
    pub seed: Option<u64>,
    pub inputs: Vec<&'a Path>,
    /// `None` for commands that take no configuration.
    pub config: Option<&'a RunConfig>,
}

/// `<artifact>.config.toml`.
pub fn echo_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.as_os_str().to_owned();
    name.push(".config.toml");
    PathBuf::from(name)
}

pub fn write_echo(artifact: &Path, prov: &Provenance<'_>) -> Result<(), CliError> {
    let echo = Echo {
        run: RunInfo {
            command: prov.command,
            seed: prov.seed,
            inputs: prov
                .inputs
                .iter()
                .map(|p| p.display().to_string())
                .collect(),
        },
        config: prov.config,
    };
    let text = toml::to_string(&echo)
        .map_err(|e| CliError::Validation(format!("cannot echo config: {e}")))?;
    write_text(&echo_path(artifact), &text)
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    if !path.exists() {
        return Err(CliError::MissingFile(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let config = RunConfig::default();
        let text = toml::to_string(&config).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn empty_and_partial_files_fall_back_to_defaults() {
        let empty: RunConfig = toml::from_str("").unwrap();
        assert_eq!(empty, RunConfig::default());
        let partial: RunConfig = toml::from_str("[finetune.sato]\nlambda2 = 0.5\n").unwrap();
        assert_eq!(partial.finetune.sato.lambda2, 0.5);
        assert_eq!(
            partial.finetune.learning_rate,
            TrainConfig::finetune().learning_rate
        );
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[train]\nlearning_rat = 0.1\n").is_err());
        assert!(toml::from_str::<RunConfig>("[nope]\n").is_err());
        assert!(toml::from_str::<RunConfig>("[finetune.sato]\nlambda4 = 1.0\n").is_err());
    }
}
