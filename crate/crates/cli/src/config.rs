//! Whole-run configuration file: `[gen]`, `[model]` and `[train]` tables
//! layered over built-in defaults, then flag overrides on top.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sdsnet::datagen::GenSpec;
use sdsnet::models::ModelConfig;
use sdsnet::train_eval::TrainConfig;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Session store root; flags and `SDSNET_DATA` take precedence.
    pub data: Option<PathBuf>,
    pub gen: toml::Table,
    /// `preset = "tiny" | "full"` plus any `ModelConfig` field.
    pub model: toml::Table,
    pub train: toml::Table,
}

/// A config problem: reported with exit status 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn bad(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| bad(format!("{}: {e}", path.display())))
    }

    pub fn gen_spec(&self) -> Result<GenSpec, ConfigError> {
        overlay("gen", GenSpec::default(), &self.gen)
    }

    /// The preset named in `[model]` (or `preset_flag`, which wins), with
    /// the remaining `[model]` keys applied on top.
    pub fn model(&self, preset_flag: Option<&str>) -> Result<(String, ModelConfig), ConfigError> {
        let mut table = self.model.clone();
        let from_file = match table.remove("preset") {
            Some(toml::Value::String(s)) => Some(s),
            Some(other) => return Err(bad(format!("model.preset must be a string, got {other}"))),
            None => None,
        };
        let preset = preset_flag.map(str::to_string).or(from_file).unwrap_or_else(|| "tiny".into());
        let base = ModelConfig::preset(&preset).map_err(|e| bad(e.to_string()))?;
        Ok((preset, overlay("model", base, &table)?))
    }

    /// Training defaults follow the preset: 30 epochs for tiny, 200 for full.
    pub fn train(&self, preset: &str) -> Result<TrainConfig, ConfigError> {
        let base = if preset == "full" { TrainConfig::full() } else { TrainConfig::default() };
        overlay("train", base, &self.train)
    }
}

fn overlay<T: Serialize + DeserializeOwned>(section: &str, base: T, over: &toml::Table) -> Result<T, ConfigError> {
    let mut table = toml::Table::try_from(&base).map_err(|e| bad(format!("[{section}]: {e}")))?;
    for (k, v) in over {
        table.insert(k.clone(), v.clone());
    }
    table.try_into().map_err(|e| bad(format!("[{section}]: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use sdsnet::models::EncoderKind;

    fn parse(text: &str) -> RunConfig {
        toml::from_str(text).unwrap()
    }

    #[test]
    fn empty_file_gives_defaults() {
        let rc = parse("");
        let (preset, model) = rc.model(None).unwrap();
        assert_eq!((preset.as_str(), model), ("tiny", ModelConfig::tiny()));
        assert_eq!(rc.train("tiny").unwrap(), TrainConfig::default());
        assert_eq!(rc.train("full").unwrap().epochs, 200);
        assert_eq!(rc.gen_spec().unwrap(), GenSpec::default());
    }

    #[test]
    fn sections_override_defaults() {
        let rc = parse(
            "data = \"/tmp/x\"\n[gen]\nn_subjects = 60\n[model]\npreset = \"tiny\"\nencoder = \"bilstm\"\n[train]\nepochs = 3\nseeds = [9]\n",
        );
        assert_eq!(rc.gen_spec().unwrap().n_subjects, 60);
        assert_eq!(rc.model(None).unwrap().1.encoder, EncoderKind::Bilstm);
        let t = rc.train("tiny").unwrap();
        assert_eq!((t.epochs, t.seeds.clone(), t.batch_size), (3, vec![9], 2));
        assert_eq!(rc.model(Some("full")).unwrap().1.frames, 100);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[other]\nx = 1\n").is_err());
        assert!(parse("[train]\nepoch = 3\n").train("tiny").is_err());
        assert!(parse("[model]\nencoder = \"gru\"\n").model(None).is_err());
        assert!(parse("[model]\npreset = \"huge\"\n").model(None).is_err());
        assert!(parse("[gen]\nsubjects = 3\n").gen_spec().is_err());
    }
}
