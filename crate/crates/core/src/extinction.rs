//! Staged early elimination of weak individuals at landmark training
//! iterations, using monotone thresholds carried across generations.
//!
//! Each generation trains in three segments (T1, T2, T3 iterations). After
//! T1 and after T1+T2 the population is scored and everything below the
//! active threshold is extinguished; thresholds only ever rise, being the
//! max of the current generation's k-th best score and the previous value.

use crate::evaluation::{EvalRequest, Evaluator, EvaluatorFailure};
use crate::lineage::{CheckpointLabel, EventSink, LineageError, LineageEvent, Verdict};
use crate::succession::Individual;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Extinction thresholds carried across generations. Both values are
/// non-decreasing over the lifetime of a run by construction of
/// [`update_threshold`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtinctionState {
    pub v_t1: f64,
    pub v_t2: f64,
}

impl Default for ExtinctionState {
    /// No elimination pressure before evidence exists.
    fn default() -> Self {
        ExtinctionState { v_t1: 0.0, v_t2: 0.0 }
    }
}

/// Per-generation training schedule and threshold ranks.
///
/// `t1`, `t2`, `t3` are incremental segment lengths: individuals are scored
/// after `t1` and `t1+t2` cumulative iterations and finish at `t1+t2+t3`.
/// `p` and `q` pick the p-th and q-th best scores as threshold candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtinctionConfig {
    pub t1: u64,
    pub t2: u64,
    pub t3: u64,
    pub p: usize,
    pub q: usize,
}

impl ExtinctionConfig {
    pub fn total_iterations(&self) -> u64 {
        self.t1 + self.t2 + self.t3
    }
}

/// Scores gathered at one checkpoint of one generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointScores {
    pub generation: u32,
    pub checkpoint: CheckpointLabel,
    pub scores: Vec<(u64, f64)>,
}

#[derive(Debug, Error)]
pub enum ExtinctionError {
    #[error("score list is empty")]
    EmptyScores,
    #[error("population is empty")]
    EmptyPopulation,
    #[error("every evaluation failed at checkpoint {0:?} of generation {1}")]
    AllEvaluationsFailed(CheckpointLabel, u32),
    #[error(transparent)]
    Log(#[from] LineageError),
}

/// The k-th largest score (1-indexed). Degenerate guard: `k` beyond the
/// list length returns the minimum.
pub fn sorted_threshold(scores: &[f64], k: usize) -> Result<f64, ExtinctionError> {
    assert!(k >= 1, "rank k must be at least 1");
    if scores.is_empty() {
        return Err(ExtinctionError::EmptyScores);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    Ok(sorted[k.min(sorted.len()) - 1])
}

/// Threshold update rule: the k-th best current score, or the previous
/// threshold if that is higher.
pub fn update_threshold(prev: f64, scores: &[f64], k: usize) -> Result<f64, ExtinctionError> {
    Ok(sorted_threshold(scores, k)?.max(prev))
}

/// Everything produced by one generation's train/extinguish cycle.
#[derive(Debug, Clone)]
pub struct GenerationOutcome {
    /// Individuals alive after the full schedule, with fitness histories
    /// extended at every checkpoint they reached.
    pub survivors: Vec<Individual>,
    /// The best survivor: highest final fitness, ties broken by fewer
    /// parameters, then lower id.
    pub best: Individual,
    pub state: ExtinctionState,
}

/// Train one generation through the three-segment schedule, extinguishing
/// below-threshold individuals after T1 and T1+T2.
///
/// An evaluation failure extinguishes that individual with a logged cause;
/// it never aborts the run. If a gate would extinguish everyone, the top
/// scorer at that checkpoint is spared so the generation still produces a
/// parent.
pub fn run_generation_extinction(
    population: Vec<Individual>,
    evaluator: &dyn Evaluator,
    state: ExtinctionState,
    config: &ExtinctionConfig,
    generation: u32,
    sink: &mut dyn EventSink,
) -> Result<GenerationOutcome, ExtinctionError> {
    if population.is_empty() {
        return Err(ExtinctionError::EmptyPopulation);
    }

    let mut alive = population;

    // Segment 1: 0 -> t1, gate on v_t1 at rank p.
    let cumulative_t1 = config.t1;
    let mut state = state;
    alive = train_segment(alive, evaluator, 0, cumulative_t1, CheckpointLabel::T1, generation, sink)?;
    if alive.is_empty() {
        return Err(ExtinctionError::AllEvaluationsFailed(CheckpointLabel::T1, generation));
    }
    let scores: Vec<f64> = final_scores(&alive);
    state.v_t1 = update_threshold(state.v_t1, &scores, config.p)?;
    sink.record(
        generation,
        alive[0].phase,
        LineageEvent::Threshold { checkpoint: CheckpointLabel::T1, value: state.v_t1 },
    )?;
    alive = apply_gate(alive, state.v_t1, CheckpointLabel::T1, generation, evaluator, sink)?;

    // Segment 2: t1 -> t1+t2, gate on v_t2 at rank q.
    let cumulative_t2 = config.t1 + config.t2;
    alive = train_segment(
        alive,
        evaluator,
        cumulative_t1,
        cumulative_t2,
        CheckpointLabel::T2,
        generation,
        sink,
    )?;
    if alive.is_empty() {
        return Err(ExtinctionError::AllEvaluationsFailed(CheckpointLabel::T2, generation));
    }
    let scores: Vec<f64> = final_scores(&alive);
    state.v_t2 = update_threshold(state.v_t2, &scores, config.q)?;
    sink.record(
        generation,
        alive[0].phase,
        LineageEvent::Threshold { checkpoint: CheckpointLabel::T2, value: state.v_t2 },
    )?;
    alive = apply_gate(alive, state.v_t2, CheckpointLabel::T2, generation, evaluator, sink)?;

    // Segment 3: t1+t2 -> t1+t2+t3, final scoring, no gate.
    let cumulative_t3 = config.total_iterations();
    alive = train_segment(
        alive,
        evaluator,
        cumulative_t2,
        cumulative_t3,
        CheckpointLabel::T3,
        generation,
        sink,
    )?;
    if alive.is_empty() {
        return Err(ExtinctionError::AllEvaluationsFailed(CheckpointLabel::T3, generation));
    }

    let best = alive
        .iter()
        .min_by(|a, b| Individual::rank(a, b))
        .expect("population non-empty")
        .clone();

    Ok(GenerationOutcome { survivors: alive, best, state })
}

fn final_scores(alive: &[Individual]) -> Vec<f64> {
    alive
        .iter()
        .map(|ind| ind.final_fitness().expect("scored at this checkpoint"))
        .collect()
}

/// Train everyone from `from` to `to` cumulative iterations, in parallel,
/// then log scores in id order. Failed individuals are dropped with a
/// logged cause.
fn train_segment(
    alive: Vec<Individual>,
    evaluator: &dyn Evaluator,
    from: u64,
    to: u64,
    checkpoint: CheckpointLabel,
    generation: u32,
    sink: &mut dyn EventSink,
) -> Result<Vec<Individual>, ExtinctionError> {
    let results: Vec<Result<f64, EvaluatorFailure>> = alive
        .par_iter()
        .map(|ind| {
            let req = EvalRequest {
                genome: &ind.genome,
                individual_id: ind.id,
                generation,
                phase: ind.phase,
                train_from: from,
                train_to: to,
                seed: ind.train_seed,
            };
            evaluator.train_segment(&req).and_then(|fitness| {
                if fitness.is_finite() && (0.0..=1.0).contains(&fitness) {
                    Ok(fitness)
                } else {
                    Err(EvaluatorFailure::InvalidFitness(fitness))
                }
            })
        })
        .collect();

    let mut kept = Vec::with_capacity(alive.len());
    for (mut ind, result) in alive.into_iter().zip(results) {
        match result {
            Ok(fitness) => {
                ind.push_fitness(to, fitness);
                sink.record(
                    generation,
                    ind.phase,
                    LineageEvent::Score {
                        individual: ind.id,
                        checkpoint,
                        iterations: to,
                        fitness,
                    },
                )?;
                kept.push(ind);
            }
            Err(failure) => {
                log::warn!("individual {} failed evaluation: {failure}", ind.id);
                sink.record(
                    generation,
                    ind.phase,
                    LineageEvent::EvaluationFailed { individual: ind.id, cause: failure.to_string() },
                )?;
                evaluator.discard(ind.id);
            }
        }
    }
    Ok(kept)
}

/// Extinguish individuals strictly below `threshold`; individuals equal to
/// it survive. Sparing rule: if nobody clears the gate, the top scorer is
/// kept so the generation cannot go extinct.
fn apply_gate(
    alive: Vec<Individual>,
    threshold: f64,
    checkpoint: CheckpointLabel,
    generation: u32,
    evaluator: &dyn Evaluator,
    sink: &mut dyn EventSink,
) -> Result<Vec<Individual>, ExtinctionError> {
    let any_clears = alive
        .iter()
        .any(|ind| ind.final_fitness().expect("scored") >= threshold);
    let spared_id = if any_clears {
        None
    } else {
        alive
            .iter()
            .min_by(|a, b| Individual::rank(a, b))
            .map(|ind| ind.id)
    };

    let mut kept = Vec::with_capacity(alive.len());
    for ind in alive {
        let fitness = ind.final_fitness().expect("scored");
        let verdict = if fitness >= threshold {
            Verdict::Survived
        } else if Some(ind.id) == spared_id {
            Verdict::Spared
        } else {
            Verdict::Extinguished
        };
        sink.record(
            generation,
            ind.phase,
            LineageEvent::Verdict {
                individual: ind.id,
                checkpoint,
                fitness,
                threshold,
                verdict,
            },
        )?;
        if matches!(verdict, Verdict::Extinguished) {
            evaluator.discard(ind.id);
        } else {
            kept.push(ind);
        }
    }
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kth_largest_basic() {
        assert_eq!(sorted_threshold(&[0.5, 0.9, 0.7], 1).unwrap(), 0.9);
        assert_eq!(sorted_threshold(&[0.6, 0.7, 0.8, 0.9, 1.0], 2).unwrap(), 0.9);
        assert_eq!(sorted_threshold(&[0.4, 0.4, 0.4], 2).unwrap(), 0.4);
    }

    #[test]
    fn kth_beyond_length_takes_minimum() {
        assert_eq!(sorted_threshold(&[0.3, 0.8], 5).unwrap(), 0.3);
    }

    #[test]
    fn empty_scores_is_an_error() {
        assert!(matches!(sorted_threshold(&[], 1), Err(ExtinctionError::EmptyScores)));
    }

    #[test]
    fn update_takes_max_with_previous() {
        let scores = [0.6, 0.7, 0.8, 0.9, 1.0];
        assert_eq!(update_threshold(0.85, &scores, 2).unwrap(), 0.9);
        assert_eq!(update_threshold(0.95, &scores, 2).unwrap(), 0.95);
        assert_eq!(update_threshold(0.0, &scores, 1).unwrap(), 1.0);
    }
}
