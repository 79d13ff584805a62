//! An evaluator that replays a scripted table of fitness values, keyed by
//! (individual id, cumulative iterations). Used to drive the extinction
//! algorithm through exact, hand-checkable traces.

use super::{EvalRequest, Evaluator, EvaluatorFailure};
use std::collections::BTreeMap;
use std::collections::BTreeSet;

#[derive(Debug, Default, Clone)]
pub struct ScriptedEvaluator {
    table: BTreeMap<(u64, u64), f64>,
    failures: BTreeSet<(u64, u64)>,
}

impl ScriptedEvaluator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Script the fitness an individual reports after training to
    /// `cumulative_iterations`.
    pub fn score(mut self, individual: u64, cumulative_iterations: u64, fitness: f64) -> Self {
        self.table.insert((individual, cumulative_iterations), fitness);
        self
    }

    /// Script an evaluation failure at the given checkpoint.
    pub fn failure(mut self, individual: u64, cumulative_iterations: u64) -> Self {
        self.failures.insert((individual, cumulative_iterations));
        self
    }
}

impl Evaluator for ScriptedEvaluator {
    fn train_segment(&self, req: &EvalRequest<'_>) -> Result<f64, EvaluatorFailure> {
        let key = (req.individual_id, req.train_to);
        if self.failures.contains(&key) {
            return Err(EvaluatorFailure::Internal(format!(
                "scripted failure for individual {} at {} iterations",
                key.0, key.1
            )));
        }
        self.table.get(&key).copied().ok_or_else(|| {
            EvaluatorFailure::Internal(format!(
                "no scripted fitness for individual {} at {} iterations",
                key.0, key.1
            ))
        })
    }
}
