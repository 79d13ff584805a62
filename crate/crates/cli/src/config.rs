//! Run configuration: one JSON document selecting the evolution
//! hyper-parameters and exactly one fitness backend.

use anyhow::{bail, Context, Result};
use evonas_core::evaluation::dataset::DatasetSpec;
use evonas_core::evaluation::{SurrogateParams, TrainerConfig, WorkerConfig};
use evonas_core::genome::TensorShape;
use evonas_core::succession::SuccessionConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvaluatorSpec {
    Surrogate(SurrogateParams),
    Builtin {
        dataset: DatasetSpec,
        #[serde(default)]
        trainer: TrainerConfig,
    },
    External(WorkerConfig),
}

impl EvaluatorSpec {
    pub fn name(&self) -> &'static str {
        match self {
            EvaluatorSpec::Surrogate(_) => "surrogate",
            EvaluatorSpec::Builtin { .. } => "builtin",
            EvaluatorSpec::External(_) => "external",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub succession: SuccessionConfig,
    pub evaluator: EvaluatorSpec,
    /// Input image shape; required for the surrogate and external
    /// backends, derived from (and checked against) the dataset for the
    /// built-in one.
    #[serde(default)]
    pub input_shape: Option<TensorShape>,
    #[serde(default)]
    pub num_classes: Option<u32>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Continue from an existing checkpoint in `output_dir` instead of
    /// refusing to overwrite it.
    #[serde(default)]
    pub resume: bool,
    /// Evaluation worker pool size; defaults to the available cores.
    #[serde(default)]
    pub worker_threads: Option<usize>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        // Check the single-backend rule on the raw document first, so the
        // diagnostic names the offending keys instead of a serde enum
        // mismatch.
        let raw: serde_json::Value =
            serde_json::from_str(text).context("config is not valid JSON")?;
        if let Some(evaluator) = raw.get("evaluator") {
            let Some(object) = evaluator.as_object() else {
                bail!("\"evaluator\" must be an object with exactly one backend key");
            };
            if object.len() != 1 {
                let keys: Vec<&str> = object.keys().map(String::as_str).collect();
                bail!(
                    "exactly one evaluator backend must be configured, found {}: {}",
                    object.len(),
                    keys.join(", ")
                );
            }
        }
        let config: RunConfig =
            serde_json::from_value(raw).context("config does not match the expected schema")?;
        config.check()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn check(&self) -> Result<()> {
        self.succession.check().map_err(|e| anyhow::anyhow!(e))?;
        match &self.evaluator {
            EvaluatorSpec::Surrogate(_) | EvaluatorSpec::External(_) => {
                if self.input_shape.is_none() || self.num_classes.is_none() {
                    bail!(
                        "the {} backend needs explicit input_shape and num_classes",
                        self.evaluator.name()
                    );
                }
                if self.succession.mimicry.is_some() {
                    bail!("mimicry requires the builtin trainer backend");
                }
                if let EvaluatorSpec::External(worker) = &self.evaluator {
                    worker.check().map_err(|e| anyhow::anyhow!(e))?;
                }
            }
            EvaluatorSpec::Builtin { trainer, .. } => {
                trainer.check().map_err(|e| anyhow::anyhow!(e))?;
            }
        }
        if let Some(shape) = self.input_shape {
            if !shape.is_valid() {
                bail!("input_shape dimensions must be positive");
            }
        }
        if let Some(classes) = self.num_classes {
            if classes < 2 {
                bail!("num_classes must be at least 2");
            }
        }
        Ok(())
    }

    /// The effective config serialized canonically (written into the
    /// output directory; its digest guards resumption).
    pub fn canonical_text(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("config serializes");
        text.push('\n');
        text
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_surrogate_config_parses() {
        let text = r#"{
            "succession": {"seed": 7},
            "evaluator": {"surrogate": {}},
            "input_shape": {"depth": 3, "width": 16, "height": 16},
            "num_classes": 10
        }"#;
        let config = RunConfig::parse(text).unwrap();
        assert_eq!(config.succession.seed, 7);
        assert_eq!(config.succession.population_size, 10);
        assert_eq!(config.evaluator.name(), "surrogate");
    }

    #[test]
    fn two_backends_are_rejected() {
        let text = r#"{
            "evaluator": {"surrogate": {}, "external": {"command": ["x"]}},
            "input_shape": {"depth": 3, "width": 16, "height": 16},
            "num_classes": 10
        }"#;
        let err = RunConfig::parse(text).unwrap_err();
        assert!(err.to_string().contains("exactly one evaluator backend"), "{err}");
    }

    #[test]
    fn tiny_population_is_rejected() {
        let text = r#"{
            "succession": {"population_size": 1},
            "evaluator": {"surrogate": {}},
            "input_shape": {"depth": 3, "width": 16, "height": 16},
            "num_classes": 10
        }"#;
        let err = RunConfig::parse(text).unwrap_err();
        assert!(format!("{err:#}").contains("population_size"), "{err:#}");
    }

    #[test]
    fn surrogate_requires_shape_metadata() {
        let text = r#"{"evaluator": {"surrogate": {}}}"#;
        assert!(RunConfig::parse(text).is_err());
    }

    #[test]
    fn mimicry_outside_builtin_is_rejected() {
        let text = r#"{
            "succession": {"mimicry": {"teacher": "reference_model"}},
            "evaluator": {"surrogate": {}},
            "input_shape": {"depth": 3, "width": 16, "height": 16},
            "num_classes": 10
        }"#;
        let err = RunConfig::parse(text).unwrap_err();
        assert!(format!("{err:#}").contains("mimicry"), "{err:#}");
    }

    #[test]
    fn canonical_text_round_trips() {
        let text = r#"{
            "succession": {"seed": 3},
            "evaluator": {"builtin": {"dataset": {"kind": "synthetic_two_class",
                "n_train": 64, "n_val": 32, "depth": 1, "width": 8, "height": 8, "seed": 1}}}
        }"#;
        let config = RunConfig::parse(text).unwrap();
        let canonical = config.canonical_text();
        let back = RunConfig::parse(&canonical).unwrap();
        assert_eq!(back, config);
        assert_eq!(back.canonical_text(), canonical);
    }
}
