//! Experiment description read from a single TOML document.

use crate::error::{CliError, CliResult};
use acfr_core::datagen::{DatasetSpec, Split};
use acfr_core::model::{Method, ModelConfig};
use acfr_core::trainer::{AdversaryConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Splits scored by `eval` when no `--split` is given.
    pub splits: Vec<Split>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            splits: vec![Split::Test, Split::Train],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub alphas: Vec<f64>,
    pub methods: Vec<Method>,
    /// Realizations per alpha; seeds are `0..realizations`.
    pub realizations: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            alphas: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            methods: vec![Method::Acfr, Method::Mlp],
            realizations: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// One dataset realization and one training run per seed.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default = "AdversaryConfig::linear")]
    pub probe: AdversaryConfig,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Parses `path`, resolves relative paths against its directory and
    /// validates every section.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(cov) = &cfg.dataset.covariates {
            let resolved = if cov.is_relative() { base.join(cov) } else { cov.clone() };
            if !resolved.is_file() {
                return Err(CliError::Config(format!("dataset.covariates: {} does not exist", resolved.display())));
            }
            cfg.dataset.covariates = Some(resolved);
        }
        if let Some(out) = &cfg.out_dir {
            if out.is_relative() {
                cfg.out_dir = Some(base.join(out));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds must not be empty".into()));
        }
        self.dataset.validate()?;
        if self.model.input_dim != self.dataset.d {
            return Err(CliError::Config(format!(
                "model.input_dim ({}) must equal dataset.d ({})",
                self.model.input_dim, self.dataset.d
            )));
        }
        self.model.validate()?;
        self.train.validate()?;
        for &a in &self.sweep.alphas {
            if !(a >= 1.0 && a.is_finite()) {
                return Err(CliError::Config(format!("sweep.alphas entries must be >= 1, got {a}")));
            }
        }
        Ok(())
    }

    /// Warnings about settings that have no effect.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.model.method == Method::Mlp {
            let d = ModelConfig::default();
            let attn = (self.model.key_dim, self.model.value_dim, self.model.tokens, self.model.head_dim, self.model.fixed_query);
            if attn != (d.key_dim, d.value_dim, d.tokens, d.head_dim, d.fixed_query) || self.model.spline != d.spline {
                w.push("model.method = \"mlp\" ignores the attention and spline settings".to_string());
            }
            if self.train.adversary && self.train.gamma != 0.0 {
                w.push("model.method = \"mlp\" has no treatment predictor; train.gamma has no effect".to_string());
            }
        }
        w
    }

    /// Dataset spec for one realization.
    pub fn dataset_for(&self, seed: u64, alpha: Option<f64>) -> DatasetSpec {
        DatasetSpec {
            seed,
            alpha: alpha.unwrap_or(self.dataset.alpha),
            ..self.dataset.clone()
        }
    }

    pub fn train_for(&self, seed: u64) -> TrainConfig {
        TrainConfig { seed, ..self.train.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seeds = [1, 2]
[dataset]
kind = "news-like"
n = 200
d = 10
[model]
input_dim = 10
"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = RunConfig::from_toml(MINIMAL).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.seeds, vec![1, 2]);
        assert_eq!(cfg.dataset.alpha, 2.0);
        assert_eq!(cfg.train.inner_steps, 10);
        assert_eq!(cfg.probe.hidden_layers, 0);
        assert_eq!(cfg.eval.splits, vec![Split::Test, Split::Train]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let typos = [
            format!("bogus = 1\n{MINIMAL}"),
            MINIMAL.replace("input_dim = 10", "input_dim = 10\nhiden = 3"),
            format!("{MINIMAL}[train]\nlearning_rate = 0.1\n"),
            MINIMAL.replace("d = 10", "d = 10\nalpah = 3"),
        ];
        for text in typos {
            assert!(RunConfig::from_toml(&text).is_err(), "{text}");
        }
    }

    #[test]
    fn dimension_mismatch_is_a_config_error() {
        let cfg = RunConfig::from_toml(&MINIMAL.replace("input_dim = 10", "input_dim = 11")).unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn missing_covariate_file_fails_at_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, MINIMAL.replace("d = 10\n", "d = 10\ncovariates = \"missing.csv\"\n")).unwrap();
        let err = RunConfig::load(&path).unwrap_err().to_string();
        assert!(err.contains("missing.csv"), "{err}");
    }

    #[test]
    fn mlp_with_attention_settings_warns() {
        let text = MINIMAL.replace("input_dim = 10", "input_dim = 10\nmethod = \"mlp\"\nkey_dim = 8");
        let cfg = RunConfig::from_toml(&text).unwrap();
        assert!(cfg.warnings().iter().any(|w| w.contains("attention")));
    }
}
