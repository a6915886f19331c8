//! Run configuration: one TOML file with a section per stage. Command-line
//! flags are applied on top by the CLI.
//!
//! ```toml
//! [prompt]
//! lambda_margin = 20
//!
//! [predictor]
//! kind = "random"
//! seed = 7
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::assign::AssignConfig;
use crate::error::{Error, Result};
use crate::hha::HhaConfig;
use crate::metrics::MetricConfig;
use crate::predictors::PredictorSpec;
use crate::prompt::PromptConfig;

pub const CONFIG_ENV: &str = "GAZEKIT_CONFIG";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub hha: HhaConfig,
    pub prompt: PromptConfig,
    pub assign: AssignConfig,
    pub metrics: MetricConfig,
    pub predictor: PredictorSpec,
    /// Set when the file names a predictor seed explicitly.
    #[serde(skip)]
    pub seed_given: bool,
}

impl CliConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let value: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let seed_given = value
            .get("predictor")
            .and_then(|p| p.as_table())
            .is_some_and(|p| p.contains_key("seed"));
        let mut cfg: CliConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.seed_given = seed_given;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Load from `path`, else from `$GAZEKIT_CONFIG`, else defaults.
    pub fn resolve(path: Option<&Path>) -> Result<(Self, Option<PathBuf>)> {
        let chosen = path.map(Path::to_path_buf).or_else(|| {
            std::env::var_os(CONFIG_ENV)
                .filter(|v| !v.is_empty())
                .map(PathBuf::from)
        });
        match chosen {
            Some(p) => Ok((Self::load(&p)?, Some(p))),
            None => Ok((Self::default(), None)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hha.validate()?;
        self.prompt.validate()?;
        self.assign.validate()?;
        self.metrics.validate()?;
        self.predictor.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to toml")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Task;
    use crate::predictors::PredictorKind;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = CliConfig::default();
        cfg.validate().unwrap();
        let back = CliConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(back.prompt, cfg.prompt);
        assert_eq!(back.metrics, cfg.metrics);
        assert!(back.seed_given);
    }

    #[test]
    fn sections_override_defaults() {
        let cfg = CliConfig::parse(
            "[prompt]\nlambda_margin = 5\n[prompt.task_prompt_templates]\ngaze_target = \"where? {head}\"\n[predictor]\nkind = \"oracle\"\n",
        )
        .unwrap();
        assert_eq!(cfg.prompt.lambda_margin, 5);
        assert_eq!(cfg.predictor.kind, PredictorKind::Oracle);
        assert!(!cfg.seed_given);
        // a partial template table replaces the whole map
        assert_eq!(
            cfg.prompt.task_prompt_templates[&Task::GazeTarget],
            "where? {head}"
        );
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            CliConfig::parse("[hha]\nepsilonn = 1.0\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            CliConfig::parse("[nope]\n"),
            Err(Error::Config(_))
        ));
    }
}
