//! The evolution driver: primary succession with a large mutation
//! step-size, secondary succession with a small one, elitist single-parent
//! selection, saturation detection, and the post-succession block
//! duplication phase.
//!
//! All randomness is derived from the master seed by (purpose, generation,
//! index), so a run is reproducible and can resume from any generation
//! boundary with a byte-identical lineage log.

use crate::evaluation::{EvalRequest, Evaluator, EvaluatorFailure, MimicryConfig};
use crate::extinction::{
    run_generation_extinction, ExtinctionConfig, ExtinctionError, ExtinctionState,
};
use crate::genome::Genome;
use crate::lineage::{EventSink, LineageError, LineageEvent, LogCursor};
use crate::mutation::{duplicate_block, mutate_child_traced, partition_blocks, MutationStepSize};
use crate::rng::{derive_seed, stream, STREAM_CHILD, STREAM_DUPLICATION, STREAM_TRAIN};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::path::PathBuf;
use thiserror::Error;

/// Which stage of the run an individual belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Primary,
    Secondary,
    Duplication,
}

/// One member of a population: a genome plus its training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub id: u64,
    pub genome: Genome,
    pub parent_id: Option<u64>,
    /// `(cumulative iterations, fitness)` per checkpoint reached; the
    /// iteration values are strictly increasing.
    pub fitness_history: Vec<(u64, f64)>,
    pub phase: Phase,
    /// Seed of this individual's training stream.
    pub train_seed: u64,
}

impl Individual {
    pub fn final_fitness(&self) -> Option<f64> {
        self.fitness_history.last().map(|(_, f)| *f)
    }

    pub fn push_fitness(&mut self, iterations: u64, fitness: f64) {
        if let Some(&(prev, _)) = self.fitness_history.last() {
            assert!(iterations > prev, "fitness history iterations must increase");
        }
        self.fitness_history.push((iterations, fitness));
    }

    pub fn params(&self) -> u64 {
        self.genome.count_params().unwrap_or(u64::MAX)
    }

    /// Ranking for selection: higher final fitness first, then fewer
    /// parameters, then lower id. `min_by(rank)` picks the best.
    pub fn rank(a: &Individual, b: &Individual) -> Ordering {
        let fa = a.final_fitness().unwrap_or(f64::NEG_INFINITY);
        let fb = b.final_fitness().unwrap_or(f64::NEG_INFINITY);
        fb.total_cmp(&fa)
            .then_with(|| a.params().cmp(&b.params()))
            .then_with(|| a.id.cmp(&b.id))
    }
}

/// All evolution hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuccessionConfig {
    pub population_size: usize,
    pub m_primary: u32,
    pub m_secondary: u32,
    pub t1: u64,
    pub t2: u64,
    pub t3: u64,
    pub p: usize,
    pub q: usize,
    pub saturation_window: usize,
    pub saturation_delta: f64,
    pub max_generations: u32,
    pub seed: u64,
    pub mimicry: Option<MimicryConfig>,
    pub duplication_trials: u32,
}

impl Default for SuccessionConfig {
    fn default() -> Self {
        SuccessionConfig {
            population_size: 10,
            m_primary: 100,
            m_secondary: 10,
            t1: 5_000,
            t2: 15_000,
            t3: 5_000,
            p: 5,
            q: 2,
            saturation_window: 5,
            saturation_delta: 0.002,
            max_generations: 64,
            seed: 0,
            mimicry: None,
            duplication_trials: 4,
        }
    }
}

impl SuccessionConfig {
    pub fn check(&self) -> Result<(), String> {
        if self.population_size < 2 {
            return Err("population_size must be at least 2".into());
        }
        if self.m_secondary < 1 || self.m_primary < self.m_secondary {
            return Err("need m_primary >= m_secondary >= 1".into());
        }
        if self.q < 1 || self.p < self.q {
            return Err("need p >= q >= 1".into());
        }
        if self.saturation_window < 2 {
            return Err("saturation_window must be at least 2".into());
        }
        if !(self.saturation_delta > 0.0) {
            return Err("saturation_delta must be positive".into());
        }
        if self.t1 == 0 || self.t2 == 0 || self.t3 == 0 {
            return Err("t1, t2 and t3 must be positive".into());
        }
        if self.max_generations == 0 {
            return Err("max_generations must be at least 1".into());
        }
        if let Some(mimicry) = &self.mimicry {
            mimicry.check()?;
        }
        Ok(())
    }

    pub fn extinction(&self) -> ExtinctionConfig {
        ExtinctionConfig { t1: self.t1, t2: self.t2, t3: self.t3, p: self.p, q: self.q }
    }

    pub fn total_iterations(&self) -> u64 {
        self.t1 + self.t2 + self.t3
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("population is empty")]
    EmptyPopulation,
    #[error(transparent)]
    Extinction(#[from] ExtinctionError),
    #[error(transparent)]
    Log(#[from] LineageError),
    #[error("evaluator setup failed: {0}")]
    Evaluator(#[from] EvaluatorFailure),
    #[error("checkpoint hook failed: {0}")]
    Hook(String),
}

/// The best individual of an evaluated set: maximum final fitness, ties
/// broken by fewer parameters, then lower id.
pub fn select_parent(evaluated: &[Individual]) -> Result<&Individual, RunError> {
    evaluated
        .iter()
        .min_by(|a, b| Individual::rank(a, b))
        .ok_or(RunError::EmptyPopulation)
}

/// True once the best-fitness improvement over the trailing window,
/// `history[last] - history[last - window + 1]`, falls below `delta`.
/// Histories shorter than the window never saturate.
pub fn check_saturation(best_history: &[f64], window: usize, delta: f64) -> bool {
    assert!(window >= 2, "saturation window must be at least 2");
    let n = best_history.len();
    if n < window {
        return false;
    }
    best_history[n - 1] - best_history[n - window] < delta
}

/// Final state of a finished run.
#[derive(Debug, Clone)]
pub struct EvolutionResult {
    pub best: Individual,
    pub generations_run: u32,
    /// Last generation index of the primary and secondary phases.
    pub phase_boundaries: (u32, u32),
    /// Filled by the harness when the lineage log lives on disk.
    pub log_path: Option<PathBuf>,
}

/// Serializable driver state: everything needed to continue a run from a
/// generation boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriverState {
    /// Next generation index to run.
    pub generation: u32,
    pub phase: Phase,
    pub extinction: ExtinctionState,
    pub parent: Option<Individual>,
    pub next_individual_id: u64,
    /// Parent fitness after each completed generation.
    pub best_history: Vec<f64>,
    /// Index into `best_history` where the current phase's saturation
    /// window starts (the switch-generation value is the baseline).
    pub phase_start: usize,
    pub primary_end: Option<u32>,
    pub secondary_end: Option<u32>,
    pub complete: bool,
}

impl DriverState {
    pub fn initial() -> Self {
        DriverState {
            generation: 0,
            phase: Phase::Primary,
            extinction: ExtinctionState::default(),
            parent: None,
            next_individual_id: 1,
            best_history: Vec::new(),
            phase_start: 0,
            primary_end: None,
            secondary_end: None,
            complete: false,
        }
    }
}

/// Run the full succession from scratch. See [`drive`] for resumption.
pub fn run_succession(
    config: &SuccessionConfig,
    seed_genome: &Genome,
    evaluator: &dyn Evaluator,
    sink: &mut dyn EventSink,
) -> Result<EvolutionResult, RunError> {
    drive(config, seed_genome, evaluator, sink, DriverState::initial(), &mut |_, _| Ok(()))
}

/// The evolution loop. `state` may come from a checkpoint; the hook runs
/// after every completed generation (and once more when the run finishes)
/// with the current state and the lineage log cursor, so the harness can
/// persist checkpoints at the natural barrier.
pub fn drive(
    config: &SuccessionConfig,
    seed_genome: &Genome,
    evaluator: &dyn Evaluator,
    sink: &mut dyn EventSink,
    mut state: DriverState,
    checkpoint_hook: &mut dyn FnMut(&DriverState, LogCursor) -> Result<(), String>,
) -> Result<EvolutionResult, RunError> {
    config.check().map_err(RunError::Config)?;
    let violations = seed_genome.validate();
    if !violations.is_empty() {
        return Err(RunError::Config(format!("seed genome invalid: {}", violations[0])));
    }

    let extinction_config = config.extinction();
    let master = config.seed;

    while !state.complete && state.generation < config.max_generations {
        let generation = state.generation;
        let phase = state.phase;
        let m = MutationStepSize::new(match phase {
            Phase::Primary => config.m_primary,
            _ => config.m_secondary,
        });
        let parent_genome =
            state.parent.as_ref().map(|p| &p.genome).unwrap_or(seed_genome);
        let parent_id = state.parent.as_ref().map(|p| p.id);

        // Spawn exactly n children from the surviving parent.
        let mut children = Vec::with_capacity(config.population_size);
        for index in 0..config.population_size {
            let mut rng = stream(master, &[STREAM_CHILD, generation as u64, index as u64]);
            let (genome, trace) = mutate_child_traced(parent_genome, m, &mut rng);
            let id = state.next_individual_id;
            state.next_individual_id += 1;
            let child = Individual {
                id,
                parent_id,
                fitness_history: Vec::new(),
                phase,
                train_seed: derive_seed(master, &[STREAM_TRAIN, generation as u64, index as u64]),
                genome,
            };
            sink.record(
                generation,
                phase,
                LineageEvent::Spawn {
                    individual: id,
                    parent: parent_id,
                    params: child.params(),
                    ops: trace,
                },
            )?;
            children.push(child);
        }

        let outcome = run_generation_extinction(
            children,
            evaluator,
            state.extinction,
            &extinction_config,
            generation,
            sink,
        )?;
        state.extinction = outcome.state;
        for survivor in &outcome.survivors {
            evaluator.discard(survivor.id);
        }

        // Elitism: the carried parent keeps its recorded fitness and is
        // only replaced by a strictly better child (ties favor the
        // incumbent's rank ordering).
        let new_parent = match state.parent.take() {
            Some(incumbent)
                if Individual::rank(&incumbent, &outcome.best) != Ordering::Greater =>
            {
                incumbent
            }
            _ => outcome.best,
        };
        let fitness = new_parent.final_fitness().expect("parent has fitness");
        if let Some(&last) = state.best_history.last() {
            debug_assert!(fitness >= last, "elitism must be monotone");
        }
        sink.record(
            generation,
            phase,
            LineageEvent::Selection {
                individual: new_parent.id,
                fitness,
                params: new_parent.params(),
            },
        )?;
        state.best_history.push(fitness);
        state.parent = Some(new_parent);
        state.generation += 1;

        let slice = &state.best_history[state.phase_start..];
        if check_saturation(slice, config.saturation_window, config.saturation_delta) {
            match phase {
                Phase::Primary => {
                    sink.record(
                        generation,
                        phase,
                        LineageEvent::PhaseSwitch { from: Phase::Primary, to: Phase::Secondary },
                    )?;
                    state.primary_end = Some(generation);
                    state.phase = Phase::Secondary;
                    state.phase_start = state.best_history.len() - 1;
                }
                Phase::Secondary => {
                    state.secondary_end = Some(generation);
                    state.complete = true;
                }
                Phase::Duplication => unreachable!("duplication runs outside the loop"),
            }
        }

        checkpoint_hook(&state, sink.cursor()?).map_err(RunError::Hook)?;
    }

    let last_generation = state.generation.saturating_sub(1);
    let primary_end = state.primary_end.unwrap_or(last_generation);
    let secondary_end = state.secondary_end.unwrap_or(last_generation);
    state.complete = true;

    let parent = state.parent.clone().ok_or(RunError::EmptyPopulation)?;
    let best = run_duplication_phase(&parent, config, evaluator, sink, &mut state)?;

    sink.record(
        state.generation,
        Phase::Duplication,
        LineageEvent::RunComplete {
            best_individual: best.id,
            best_fitness: best.final_fitness().unwrap_or(0.0),
            best_params: best.params(),
            generations: state.generation,
        },
    )?;
    state.parent = Some(best.clone());
    checkpoint_hook(&state, sink.cursor()?).map_err(RunError::Hook)?;

    Ok(EvolutionResult {
        best,
        generations_run: state.generation,
        phase_boundaries: (primary_end, secondary_end),
        log_path: None,
    })
}

/// Grow duplication candidates from the best individual's conv-bearing
/// blocks, train each on the full schedule, and keep the best candidate
/// only if it strictly beats the input.
pub fn run_duplication_phase(
    best: &Individual,
    config: &SuccessionConfig,
    evaluator: &dyn Evaluator,
    sink: &mut dyn EventSink,
    state: &mut DriverState,
) -> Result<Individual, RunError> {
    let generation = state.generation;
    if config.duplication_trials == 0 {
        return Ok(best.clone());
    }
    let Ok(shapes) = best.genome.infer_shapes() else {
        return Ok(best.clone());
    };
    let blocks = partition_blocks(&best.genome, &shapes);
    let conv_blocks: Vec<usize> = (0..blocks.len())
        .filter(|&i| blocks[i].contains_conv(&best.genome))
        .collect();
    if conv_blocks.is_empty() {
        return Ok(best.clone());
    }

    let mut rng = stream(config.seed, &[STREAM_DUPLICATION]);
    let total = config.total_iterations();
    struct Trial {
        trial: u32,
        block_index: usize,
        candidate: Option<Individual>,
    }
    let mut trials = Vec::new();
    for trial in 0..config.duplication_trials {
        let block_index = conv_blocks[rng.gen_range(0..conv_blocks.len())];
        let candidate = match duplicate_block(&best.genome, block_index) {
            Ok(genome) => {
                let id = state.next_individual_id;
                state.next_individual_id += 1;
                let mut individual = Individual {
                    id,
                    genome,
                    parent_id: Some(best.id),
                    fitness_history: Vec::new(),
                    phase: Phase::Duplication,
                    train_seed: derive_seed(
                        config.seed,
                        &[STREAM_TRAIN, generation as u64, trial as u64],
                    ),
                };
                let req = EvalRequest {
                    genome: &individual.genome,
                    individual_id: id,
                    generation,
                    phase: Phase::Duplication,
                    train_from: 0,
                    train_to: total,
                    seed: individual.train_seed,
                };
                match evaluator.train_segment(&req) {
                    Ok(fitness) if fitness.is_finite() && (0.0..=1.0).contains(&fitness) => {
                        individual.push_fitness(total, fitness);
                        evaluator.discard(id);
                        Some(individual)
                    }
                    Ok(bad) => {
                        sink.record(
                            generation,
                            Phase::Duplication,
                            LineageEvent::EvaluationFailed {
                                individual: id,
                                cause: EvaluatorFailure::InvalidFitness(bad).to_string(),
                            },
                        )?;
                        evaluator.discard(id);
                        None
                    }
                    Err(failure) => {
                        sink.record(
                            generation,
                            Phase::Duplication,
                            LineageEvent::EvaluationFailed {
                                individual: id,
                                cause: failure.to_string(),
                            },
                        )?;
                        evaluator.discard(id);
                        None
                    }
                }
            }
            Err(inapplicable) => {
                log::debug!("duplication trial {trial}: {inapplicable}");
                None
            }
        };
        trials.push(Trial { trial, block_index, candidate });
    }

    let winner = trials
        .iter()
        .filter_map(|t| t.candidate.as_ref())
        .min_by(|a, b| Individual::rank(a, b))
        .cloned();
    let accepted_id = match &winner {
        Some(candidate)
            if candidate.final_fitness().unwrap_or(0.0)
                > best.final_fitness().unwrap_or(0.0) =>
        {
            Some(candidate.id)
        }
        _ => None,
    };

    for t in &trials {
        sink.record(
            generation,
            Phase::Duplication,
            LineageEvent::DuplicationTrial {
                trial: t.trial,
                block_index: t.block_index,
                individual: t.candidate.as_ref().map(|c| c.id),
                params: t.candidate.as_ref().map(|c| c.params()),
                fitness: t.candidate.as_ref().and_then(|c| c.final_fitness()),
                accepted: t.candidate.as_ref().map(|c| c.id) == accepted_id
                    && accepted_id.is_some(),
            },
        )?;
    }

    match accepted_id {
        Some(_) => Ok(winner.expect("accepted winner exists")),
        None => Ok(best.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genome::TensorShape;

    fn individual(id: u64, fitness: f64, with_conv: bool) -> Individual {
        let mut genome = Genome::seed(TensorShape::new(3, 8, 8), 10);
        if with_conv {
            let c = genome.add_node(crate::genome::LayerKind::Conv {
                channels: 16,
                kernel: 1,
                stride: 1,
            });
            genome.add_edge(c, crate::genome::NodeId(0));
        }
        Individual {
            id,
            genome,
            parent_id: None,
            fitness_history: vec![(100, fitness)],
            phase: Phase::Primary,
            train_seed: 0,
        }
    }

    #[test]
    fn select_parent_takes_highest_fitness() {
        let population = vec![individual(1, 0.8, false), individual(2, 0.9, false)];
        assert_eq!(select_parent(&population).unwrap().id, 2);
    }

    #[test]
    fn select_parent_breaks_ties_by_params() {
        // id 1 carries an extra conv, so more parameters at equal fitness.
        let population = vec![individual(1, 0.9, true), individual(2, 0.9, false)];
        assert_eq!(select_parent(&population).unwrap().id, 2);
    }

    #[test]
    fn select_parent_singleton() {
        let population = vec![individual(7, 0.5, false)];
        assert_eq!(select_parent(&population).unwrap().id, 7);
    }

    #[test]
    fn select_parent_empty_is_an_error() {
        assert!(select_parent(&[]).is_err());
    }

    #[test]
    fn saturation_examples() {
        assert!(check_saturation(&[0.5, 0.51, 0.512], 3, 0.02));
        assert!(!check_saturation(&[0.5, 0.51], 3, 0.02));
        assert!(!check_saturation(&[0.5, 0.6, 0.7], 3, 0.02));
    }

    #[test]
    fn config_invariants_are_enforced() {
        let mut config = SuccessionConfig::default();
        assert!(config.check().is_ok());
        config.population_size = 1;
        assert!(config.check().is_err());
        config.population_size = 10;
        config.m_secondary = config.m_primary + 1;
        assert!(config.check().is_err());
    }
}
