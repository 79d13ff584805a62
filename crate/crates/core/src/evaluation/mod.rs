//! Fitness backends behind one contract: a deterministic surrogate
//! landscape, a built-in minimal differentiable trainer with an optional
//! mimicry (distillation) loss, and an external worker-process protocol.

pub mod dataset;
pub mod external;
pub mod loss;
pub mod scripted;
pub mod surrogate;
pub mod trainer;

use crate::genome::Genome;
use crate::succession::Phase;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use thiserror::Error;

pub use dataset::Dataset;
pub use external::{evaluate_external, ExternalEvaluator, WorkerConfig};
pub use loss::{cross_entropy, distillation_loss, softmax};
pub use scripted::ScriptedEvaluator;
pub use surrogate::{surrogate_fitness, SurrogateEvaluator, SurrogateParams};
pub use trainer::{train_and_score, BuiltinEvaluator, TrainerConfig};

/// Why an evaluation could not produce a fitness score. Surfaced per
/// individual; the affected individual is extinguished, the run continues.
#[derive(Debug, Clone, Error)]
pub enum EvaluatorFailure {
    #[error("worker crashed: {0}")]
    WorkerCrash(String),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("worker timed out after {0:.1}s")]
    Timeout(f64),
    #[error("genome/dataset shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("fitness out of range: {0}")]
    InvalidFitness(f64),
    #[error("evaluator error: {0}")]
    Internal(String),
}

/// One incremental training request: bring `genome` from `train_from` to
/// `train_to` cumulative iterations and report validation fitness there.
#[derive(Debug, Clone, Copy)]
pub struct EvalRequest<'a> {
    pub genome: &'a Genome,
    pub individual_id: u64,
    pub generation: u32,
    pub phase: Phase,
    pub train_from: u64,
    pub train_to: u64,
    pub seed: u64,
}

/// A fitness backend. Implementations must be safe to call from multiple
/// worker threads at once; per-individual training state is keyed by
/// `individual_id` so segments can resume where the previous one stopped.
pub trait Evaluator: Send + Sync {
    fn train_segment(&self, req: &EvalRequest<'_>) -> Result<f64, EvaluatorFailure>;

    /// Drop any cached state for an extinguished individual.
    fn discard(&self, _individual_id: u64) {}
}

/// Validation fitness at each checkpoint of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointFitness {
    pub iterations: u64,
    pub fitness: f64,
    /// Wall time of the segment ending at this checkpoint, in seconds.
    /// Reported to the caller only; never written to the lineage log.
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FitnessReport {
    pub checkpoints: Vec<CheckpointFitness>,
}

impl FitnessReport {
    pub fn final_fitness(&self) -> Option<f64> {
        self.checkpoints.last().map(|c| c.fitness)
    }

    /// Iterations strictly increasing, fitness within [0, 1].
    pub fn check(&self) -> Result<(), String> {
        for pair in self.checkpoints.windows(2) {
            if pair[1].iterations <= pair[0].iterations {
                return Err(format!(
                    "checkpoint iterations not strictly increasing: {} then {}",
                    pair[0].iterations, pair[1].iterations
                ));
            }
        }
        for c in &self.checkpoints {
            if !(c.fitness.is_finite() && (0.0..=1.0).contains(&c.fitness)) {
                return Err(format!("fitness {} out of [0, 1]", c.fitness));
            }
        }
        Ok(())
    }
}

/// Where teacher logits come from for mimicry training.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherSource {
    /// Train a fixed known-good genome to convergence first and cache its
    /// logits on the training set.
    ReferenceModel,
    /// JSON file with `{"logits": [[...], ...]}` keyed by training-example
    /// index.
    LogitsFile(PathBuf),
}

/// Which evolution phases train with the mimicry loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MimicryPhases {
    pub primary: bool,
    pub secondary: bool,
    pub duplication: bool,
}

impl Default for MimicryPhases {
    fn default() -> Self {
        MimicryPhases { primary: true, secondary: true, duplication: true }
    }
}

impl MimicryPhases {
    pub fn enabled_for(&self, phase: Phase) -> bool {
        match phase {
            Phase::Primary => self.primary,
            Phase::Secondary => self.secondary,
            Phase::Duplication => self.duplication,
        }
    }
}

/// Mimicry (distillation) settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MimicryConfig {
    /// Weight of the teacher term in the combined loss.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Softmax temperature for both student and teacher logits.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    pub teacher: TeacherSource,
    #[serde(default)]
    pub phases: MimicryPhases,
}

fn default_alpha() -> f64 {
    0.9
}

fn default_temperature() -> f64 {
    5.0
}

impl MimicryConfig {
    pub fn check(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(format!("mimicry alpha {} outside [0, 1]", self.alpha));
        }
        if !(self.temperature > 0.0) {
            return Err(format!("mimicry temperature {} must be positive", self.temperature));
        }
        Ok(())
    }
}
