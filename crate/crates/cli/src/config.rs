//! Run configuration: a TOML file merged under command-line flags and
//! `SANLM_*` environment variables. The fully resolved values are written
//! to `resolved_config.toml` in every output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use sanlm_core::model::{Direction, ModelConfig};
use sanlm_core::rescoring::default_grid;
use sanlm_core::training::TrainConfig;

use crate::UsageError;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    #[serde(default)]
    pub vocab: VocabSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub rescore: RescoreSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabSection {
    pub path: Option<String>,
    pub size: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub mode: Option<Direction>,
    pub num_layers: Option<usize>,
    pub model_dim: Option<usize>,
    pub num_heads: Option<usize>,
    pub ffn_dim: Option<usize>,
    pub max_len: Option<usize>,
    pub dropout: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub adam_eps: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_steps: Option<u64>,
    pub eval_interval: Option<u64>,
    pub checkpoint_interval: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RescoreSection {
    pub lambda: Option<f64>,
    pub alpha: Option<f64>,
    pub grid: Option<Vec<f64>>,
    pub max_n: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, UsageError> {
        let text = fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| UsageError(format!("invalid config {}: {e}", path.display())))
    }
}

/// Every setting after merging, as echoed into output directories.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Resolved {
    pub command: String,
    pub seed: u64,
    pub threads: usize,
    pub vocab: ResolvedVocab,
    pub model: ResolvedModel,
    pub train: ResolvedTrain,
    pub rescore: ResolvedRescore,
    /// Input and output paths of the command.
    pub paths: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedVocab {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedModel {
    pub mode: Direction,
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedTrain {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub eval_interval: u64,
    pub checkpoint_interval: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedRescore {
    pub lambda: f64,
    pub alpha: f64,
    pub grid: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_n: Option<usize>,
}

/// Values given on the command line or through the environment. `None`
/// falls through to the config file, then to the built-in default.
#[derive(Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub vocab: Option<String>,
    pub vocab_size: Option<usize>,
    pub mode: Option<Direction>,
    pub max_steps: Option<u64>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub eval_interval: Option<u64>,
    pub checkpoint_interval: Option<u64>,
    pub lambda: Option<f64>,
    pub alpha: Option<f64>,
    pub grid: Option<Vec<f64>>,
    pub max_n: Option<usize>,
}

pub const DEFAULT_SEED: u64 = 1;
pub const DEFAULT_VOCAB_SIZE: usize = 10_000;
pub const DEFAULT_LAMBDA: f64 = 0.2;
pub const DEFAULT_ALPHA: f64 = 1.0;

impl Resolved {
    pub fn new(command: &str, file: &FileConfig, o: &Overrides) -> Result<Self, UsageError> {
        // Desk-scale architecture unless the config says otherwise; the
        // vocabulary size is filled in from the vocabulary file.
        let desk = ModelConfig::desk(Direction::Bidirectional, 0);
        let m = &file.model;
        let t = &file.train;
        let defaults = TrainConfig::new(desk, 0);
        let r = &file.rescore;
        let resolved = Self {
            command: command.to_string(),
            seed: o.seed.or(file.seed).unwrap_or(DEFAULT_SEED),
            threads: o.threads.or(file.threads).unwrap_or(1),
            vocab: ResolvedVocab {
                path: o.vocab.clone().or_else(|| file.vocab.path.clone()),
                size: o.vocab_size.or(file.vocab.size).unwrap_or(DEFAULT_VOCAB_SIZE),
            },
            model: ResolvedModel {
                mode: o.mode.or(m.mode).unwrap_or(Direction::Bidirectional),
                num_layers: m.num_layers.unwrap_or(desk.num_layers),
                model_dim: m.model_dim.unwrap_or(desk.model_dim),
                num_heads: m.num_heads.unwrap_or(desk.num_heads),
                ffn_dim: m.ffn_dim.unwrap_or(desk.ffn_dim),
                max_len: m.max_len.unwrap_or(desk.max_len),
                dropout: m.dropout.unwrap_or(desk.dropout),
            },
            train: ResolvedTrain {
                learning_rate: o.learning_rate.or(t.learning_rate).unwrap_or(defaults.learning_rate),
                beta1: t.beta1.unwrap_or(defaults.beta1),
                beta2: t.beta2.unwrap_or(defaults.beta2),
                adam_eps: t.adam_eps.unwrap_or(defaults.adam_eps),
                batch_size: o.batch_size.or(t.batch_size).unwrap_or(defaults.batch_size),
                max_steps: o.max_steps.or(t.max_steps).unwrap_or(defaults.max_steps),
                eval_interval: o.eval_interval.or(t.eval_interval).unwrap_or(defaults.eval_interval),
                checkpoint_interval: o
                    .checkpoint_interval
                    .or(t.checkpoint_interval)
                    .unwrap_or(defaults.checkpoint_interval),
            },
            rescore: ResolvedRescore {
                lambda: o.lambda.or(r.lambda).unwrap_or(DEFAULT_LAMBDA),
                alpha: o.alpha.or(r.alpha).unwrap_or(DEFAULT_ALPHA),
                grid: o.grid.clone().or_else(|| r.grid.clone()).unwrap_or_else(default_grid),
                max_n: o.max_n.or(r.max_n),
            },
            paths: BTreeMap::new(),
        };
        resolved.validate()?;
        Ok(resolved)
    }

    fn validate(&self) -> Result<(), UsageError> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(UsageError(format!("{name} = {v} must lie in [0, 1]")))
            }
        };
        unit("lambda", self.rescore.lambda)?;
        unit("alpha", self.rescore.alpha)?;
        for &g in &self.rescore.grid {
            unit("grid value", g)?;
        }
        if self.rescore.grid.is_empty() {
            return Err(UsageError("lambda grid is empty".into()));
        }
        if self.threads == 0 {
            return Err(UsageError("threads must be at least 1".into()));
        }
        if self.vocab.size == 0 {
            return Err(UsageError("vocabulary size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            mode: m.mode,
            num_layers: m.num_layers,
            model_dim: m.model_dim,
            num_heads: m.num_heads,
            ffn_dim: m.ffn_dim,
            max_len: m.max_len,
            vocab_size,
            dropout: m.dropout,
        }
    }

    pub fn train_config(&self, vocab_size: usize) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            model: self.model_config(vocab_size),
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            batch_size: t.batch_size,
            max_steps: t.max_steps,
            eval_interval: t.eval_interval,
            checkpoint_interval: t.checkpoint_interval,
            seed: self.seed,
            checkpoint_dir: None,
        }
    }

    pub fn set_path(&mut self, key: &str, path: &Path) {
        self.paths.insert(key.to_string(), path.display().to_string());
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("resolved config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_win_over_file_which_wins_over_defaults() {
        let file: FileConfig = toml::from_str("seed = 5\n[rescore]\nlambda = 0.3\nalpha = 0.5\n").unwrap();
        let o = Overrides {
            lambda: Some(0.7),
            ..Overrides::default()
        };
        let r = Resolved::new("rescore", &file, &o).unwrap();
        assert_eq!(r.seed, 5);
        assert_eq!(r.rescore.lambda, 0.7);
        assert_eq!(r.rescore.alpha, 0.5);
        assert_eq!(r.threads, 1);
        assert_eq!(r.rescore.grid.len(), 21);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<FileConfig>("sed = 5\n").is_err());
        assert!(toml::from_str::<FileConfig>("[model]\nlayers = 2\n").is_err());
    }

    #[test]
    fn out_of_range_weights_are_usage_errors() {
        let o = Overrides {
            alpha: Some(1.5),
            ..Overrides::default()
        };
        assert!(Resolved::new("rescore", &FileConfig::default(), &o).is_err());
    }

    #[test]
    fn resolved_config_is_valid_toml() {
        let mut r = Resolved::new("train", &FileConfig::default(), &Overrides::default()).unwrap();
        r.set_path("out", Path::new("/tmp/x"));
        let text = r.to_toml();
        let parsed: toml::Table = toml::from_str(&text).unwrap();
        assert_eq!(parsed["model"]["mode"].as_str(), Some("bi"));
        assert_eq!(parsed["paths"]["out"].as_str(), Some("/tmp/x"));
    }
}
