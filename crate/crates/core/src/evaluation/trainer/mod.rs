//! The built-in desk-scale trainer: SGD with momentum and weight decay
//! over the compiled genome graph, cross-entropy or mimicry loss, paused
//! at arbitrary checkpoints for incremental training.

mod network;

pub use network::{Act, Network};

use super::dataset::Dataset;
use super::loss::{cross_entropy, distillation_grad, distillation_loss, softmax, supervised_grad};
use super::{
    EvalRequest, Evaluator, EvaluatorFailure, FitnessReport, CheckpointFitness, MimicryConfig,
    MimicryPhases, TeacherSource,
};
use crate::genome::{Genome, LayerKind, TensorShape};
use crate::rng::{stream, STREAM_TEACHER};
use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Instant;

const STREAM_INIT: u64 = 11;
const STREAM_SHUFFLE: u64 = 12;

/// Optimizer and schedule settings for the built-in trainer.
///
/// Without an explicit `lr_schedule`, the default schedule starts at 0.1
/// and drops to 0.01 and 0.001 at 60% and 80% of the configured total
/// iterations (the 15k/20k breakpoints of a 25k-iteration run, rescaled
/// proportionally).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Explicit `(start_iteration, learning_rate)` breakpoints; absolute
    /// iterations, first entry at 0.
    pub lr_schedule: Option<Vec<(u64, f64)>>,
    /// Base seed for direct trainer use; evaluation requests carry their
    /// own per-individual seeds.
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            batch_size: 128,
            momentum: 0.9,
            weight_decay: 0.0005,
            lr_schedule: None,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn check(&self) -> Result<(), String> {
        if self.batch_size == 0 {
            return Err("batch_size must be positive".into());
        }
        if let Some(schedule) = &self.lr_schedule {
            if schedule.is_empty() {
                return Err("lr_schedule must not be empty".into());
            }
            if schedule[0].0 != 0 {
                return Err("lr_schedule must start at iteration 0".into());
            }
            let mut prev_lr = f64::INFINITY;
            let mut prev_it = None;
            for &(it, lr) in schedule {
                if !(lr > 0.0) {
                    return Err(format!("learning rate {lr} must be positive"));
                }
                if lr > prev_lr {
                    return Err("learning rates must be non-increasing".into());
                }
                if prev_it.is_some_and(|p| it <= p) {
                    return Err("lr_schedule iterations must be increasing".into());
                }
                prev_lr = lr;
                prev_it = Some(it);
            }
        }
        Ok(())
    }

    /// The schedule actually used for a run of `total` iterations.
    pub fn resolve_schedule(&self, total: u64) -> Vec<(u64, f64)> {
        match &self.lr_schedule {
            Some(schedule) => schedule.clone(),
            None => vec![
                (0, 0.1),
                ((total as f64 * 0.6).round() as u64, 0.01),
                ((total as f64 * 0.8).round() as u64, 0.001),
            ],
        }
    }
}

fn lr_at(schedule: &[(u64, f64)], iteration: u64) -> f64 {
    let mut lr = schedule[0].1;
    for &(start, value) in schedule {
        if iteration >= start {
            lr = value;
        }
    }
    lr
}

/// Resolved mimicry settings: teacher logits aligned with the training set.
#[derive(Debug, Clone)]
pub struct MimicryContext {
    pub alpha: f64,
    pub temperature: f64,
    pub teacher_logits: Arc<Vec<Vec<f64>>>,
}

/// A network mid-training, resumable at any iteration boundary.
///
/// The minibatch sequence is a pure function of the iteration index (one
/// shuffled permutation per epoch, derived from the seed), so training
/// 0..A then A..B reproduces exactly the weights of training 0..B.
pub struct TrainedNetwork {
    net: Network,
    dataset: Arc<Dataset>,
    schedule: Vec<(u64, f64)>,
    batch_size: usize,
    momentum: f64,
    weight_decay: f64,
    mimicry: Option<MimicryContext>,
    seed: u64,
    iteration: u64,
    diverged: bool,
    epoch_order: Vec<usize>,
    epoch_index: u64,
}

impl TrainedNetwork {
    pub fn new(
        genome: &Genome,
        dataset: Arc<Dataset>,
        trainer: &TrainerConfig,
        total_iterations: u64,
        mimicry: Option<MimicryContext>,
        seed: u64,
    ) -> Result<Self, EvaluatorFailure> {
        if genome.input_shape() != dataset.input_shape {
            return Err(EvaluatorFailure::ShapeMismatch(format!(
                "genome expects input {} but the dataset provides {}",
                genome.input_shape(),
                dataset.input_shape
            )));
        }
        if genome.num_classes() != dataset.num_classes {
            return Err(EvaluatorFailure::ShapeMismatch(format!(
                "genome has {} classes but the dataset has {}",
                genome.num_classes(),
                dataset.num_classes
            )));
        }
        if let Some(ctx) = &mimicry {
            if ctx.teacher_logits.len() != dataset.train.len() {
                return Err(EvaluatorFailure::Internal(format!(
                    "{} teacher logit rows for {} training examples",
                    ctx.teacher_logits.len(),
                    dataset.train.len()
                )));
            }
        }
        let mut init_rng = stream(seed, &[STREAM_INIT]);
        let net = Network::new(genome, &mut init_rng)?;
        Ok(TrainedNetwork {
            net,
            dataset,
            schedule: trainer.resolve_schedule(total_iterations),
            batch_size: trainer.batch_size,
            momentum: trainer.momentum,
            weight_decay: trainer.weight_decay,
            mimicry,
            seed,
            iteration: 0,
            diverged: false,
            epoch_order: Vec::new(),
            epoch_index: u64::MAX,
        })
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn diverged(&self) -> bool {
        self.diverged
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    fn batches_per_epoch(&self) -> u64 {
        let n = self.dataset.train.len() as u64;
        let b = self.batch_size as u64;
        n.div_ceil(b).max(1)
    }

    /// Training-example indices of the minibatch at `iteration`.
    fn batch_indices(&mut self, iteration: u64) -> Vec<usize> {
        let bpe = self.batches_per_epoch();
        let epoch = iteration / bpe;
        let slot = (iteration % bpe) as usize;
        if epoch != self.epoch_index {
            let mut order: Vec<usize> = (0..self.dataset.train.len()).collect();
            order.shuffle(&mut stream(self.seed, &[STREAM_SHUFFLE, epoch]));
            self.epoch_order = order;
            self.epoch_index = epoch;
        }
        let start = slot * self.batch_size;
        let end = (start + self.batch_size).min(self.epoch_order.len());
        self.epoch_order[start..end].to_vec()
    }

    fn batch_tensor(&self, indices: &[usize]) -> Act {
        batch_from_examples(&self.dataset, indices, self.dataset.input_shape)
    }

    /// Loss and logits-gradient (mean over the batch) for the configured
    /// objective.
    fn loss_and_dlogits(&self, logits: &Array2<f64>, indices: &[usize]) -> (f64, Array2<f64>) {
        let n = indices.len();
        let k = self.net.classes();
        let mut dlogits = Array2::zeros((n, k));
        let mut total = 0.0;
        for (row, &example) in indices.iter().enumerate() {
            let label = self.dataset.train[example].label as usize;
            let mut y = vec![0.0; k];
            y[label] = 1.0;
            let s: Vec<f64> = logits.row(row).to_vec();
            let (loss, grad) = match &self.mimicry {
                Some(ctx) => {
                    let t = &ctx.teacher_logits[example];
                    (
                        distillation_loss(&y, &s, t, ctx.alpha, ctx.temperature),
                        distillation_grad(&y, &s, t, ctx.alpha, ctx.temperature),
                    )
                }
                None => (
                    cross_entropy(&y, &softmax(&s, 1.0)),
                    supervised_grad(&y, &s),
                ),
            };
            total += loss;
            for (j, g) in grad.iter().enumerate() {
                dlogits[(row, j)] = g / n as f64;
            }
        }
        (total / n as f64, dlogits)
    }

    /// Train until the cumulative iteration counter reaches `target`.
    /// After numerical divergence remaining work is skipped and the
    /// network reports fitness 0.
    pub fn advance_to(&mut self, target: u64) -> Result<(), EvaluatorFailure> {
        if target < self.iteration {
            return Err(EvaluatorFailure::Internal(format!(
                "cannot train backwards: at {} asked for {target}",
                self.iteration
            )));
        }
        while self.iteration < target {
            if self.diverged {
                self.iteration = target;
                break;
            }
            let indices = self.batch_indices(self.iteration);
            let batch = self.batch_tensor(&indices);
            let (logits, cache) = self.net.forward(&batch, true);
            let (loss, dlogits) = self.loss_and_dlogits(&logits, &indices);
            if !loss.is_finite() {
                log::warn!("training loss diverged at iteration {}", self.iteration);
                self.diverged = true;
                self.iteration = target;
                break;
            }
            let grads = self.net.backward(&cache, &dlogits);
            let lr = lr_at(&self.schedule, self.iteration);
            self.net.sgd_step(&grads, lr, self.momentum, self.weight_decay);
            self.iteration += 1;
        }
        Ok(())
    }

    /// Mean training loss on an explicit batch, without updating weights.
    /// Used by gradient verification.
    pub fn loss_on_indices(&mut self, indices: &[usize]) -> f64 {
        let batch = self.batch_tensor(indices);
        let (logits, _) = self.net.forward(&batch, true);
        self.loss_and_dlogits(&logits, indices).0
    }

    /// Parameter gradients on an explicit batch, flattened like
    /// [`Network::param_vector`], without updating weights.
    pub fn grads_on_indices(&mut self, indices: &[usize]) -> Vec<f64> {
        let batch = self.batch_tensor(indices);
        let (logits, cache) = self.net.forward(&batch, true);
        let (_, dlogits) = self.loss_and_dlogits(&logits, &indices.to_vec());
        let grads = self.net.backward(&cache, &dlogits);
        self.net.grad_vector(&grads)
    }

    /// Validation accuracy with frozen running statistics.
    pub fn validation_accuracy(&mut self) -> f64 {
        if self.diverged {
            return 0.0;
        }
        let val_len = self.dataset.val.len();
        if val_len == 0 {
            return 0.0;
        }
        let mut correct = 0usize;
        let mut start = 0usize;
        let dataset = Arc::clone(&self.dataset);
        while start < val_len {
            let end = (start + self.batch_size).min(val_len);
            let indices: Vec<usize> = (start..end).collect();
            let batch = batch_from_val(&dataset, &indices, dataset.input_shape);
            let (logits, _) = self.net.forward(&batch, false);
            for (row, &i) in indices.iter().enumerate() {
                let predicted = argmax(logits.row(row).as_slice().expect("contiguous"));
                if predicted == dataset.val[i].label as usize {
                    correct += 1;
                }
            }
            start = end;
        }
        correct as f64 / val_len as f64
    }

    /// Logits for every training example under the current weights (eval
    /// mode). Used to cache a teacher's outputs.
    pub fn train_logits(&mut self) -> Vec<Vec<f64>> {
        let len = self.dataset.train.len();
        let mut rows = Vec::with_capacity(len);
        let dataset = Arc::clone(&self.dataset);
        let mut start = 0usize;
        while start < len {
            let end = (start + self.batch_size).min(len);
            let indices: Vec<usize> = (start..end).collect();
            let batch = batch_from_examples(&dataset, &indices, dataset.input_shape);
            let (logits, _) = self.net.forward(&batch, false);
            for row in 0..indices.len() {
                rows.push(logits.row(row).to_vec());
            }
            start = end;
        }
        rows
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn batch_from_examples(dataset: &Dataset, indices: &[usize], shape: TensorShape) -> Act {
    build_batch(indices.iter().map(|&i| &dataset.train[i]), indices.len(), shape)
}

fn batch_from_val(dataset: &Dataset, indices: &[usize], shape: TensorShape) -> Act {
    build_batch(indices.iter().map(|&i| &dataset.val[i]), indices.len(), shape)
}

/// Examples store pixels depth-major `[c][h][w]`; activations are NHWC.
fn build_batch<'a>(
    examples: impl Iterator<Item = &'a super::dataset::Example>,
    count: usize,
    shape: TensorShape,
) -> Act {
    let (c, h, w) = (shape.depth as usize, shape.height as usize, shape.width as usize);
    let mut batch = Act::zeros(count, h, w, c);
    for (n, ex) in examples.enumerate() {
        for cc in 0..c {
            for hh in 0..h {
                for ww in 0..w {
                    let dst = batch.index(n, hh, ww, cc);
                    batch.data[dst] = ex.pixels[(cc * h + hh) * w + ww];
                }
            }
        }
    }
    batch
}

/// Train `genome` through the cumulative `checkpoints`, reporting
/// validation accuracy and wall time at each. An empty checkpoint list
/// reports nothing and trains nothing.
pub fn train_and_score(
    genome: &Genome,
    dataset: &Arc<Dataset>,
    checkpoints: &[u64],
    trainer: &TrainerConfig,
    mimicry: Option<&MimicryContext>,
    seed: u64,
) -> Result<FitnessReport, EvaluatorFailure> {
    let mut report = FitnessReport::default();
    let Some(&total) = checkpoints.last() else {
        return Ok(report);
    };
    for pair in checkpoints.windows(2) {
        if pair[1] <= pair[0] {
            return Err(EvaluatorFailure::Internal(format!(
                "checkpoints must increase: {} then {}",
                pair[0], pair[1]
            )));
        }
    }
    let mut state = TrainedNetwork::new(
        genome,
        Arc::clone(dataset),
        trainer,
        total,
        mimicry.cloned(),
        seed,
    )?;
    for &checkpoint in checkpoints {
        let start = Instant::now();
        state.advance_to(checkpoint)?;
        let fitness = state.validation_accuracy();
        report.checkpoints.push(CheckpointFitness {
            iterations: checkpoint,
            fitness,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(report)
}

/// The fixed known-good genome used as a reference teacher: two
/// convolution stages around a pooling step.
pub fn reference_genome(input_shape: TensorShape, num_classes: u32) -> Genome {
    let mut g = Genome::seed(input_shape, num_classes);
    let c1 = g.add_node(LayerKind::Conv { channels: 32, kernel: 3, stride: 1 });
    let pool = g.add_node(LayerKind::Pool);
    let c2 = g.add_node(LayerKind::Conv { channels: 64, kernel: 3, stride: 1 });
    g.add_edge(c1, pool);
    g.add_edge(pool, c2);
    g.add_edge(c2, crate::genome::NodeId(0));
    debug_assert!(g.validate().is_empty());
    g
}

/// Serialized teacher logits: `{"logits": [[...], ...]}` keyed by training
/// example index.
#[derive(Serialize, Deserialize)]
pub struct TeacherLogitsFile {
    pub logits: Vec<Vec<f64>>,
}

pub fn load_teacher_logits(path: &Path) -> Result<Vec<Vec<f64>>, EvaluatorFailure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| EvaluatorFailure::Internal(format!("teacher logits {path:?}: {e}")))?;
    let file: TeacherLogitsFile = serde_json::from_str(&text)
        .map_err(|e| EvaluatorFailure::Internal(format!("teacher logits {path:?}: {e}")))?;
    Ok(file.logits)
}

/// Resolve a mimicry configuration into concrete teacher logits, training
/// the reference model when asked for.
pub fn resolve_mimicry(
    config: &MimicryConfig,
    dataset: &Arc<Dataset>,
    trainer: &TrainerConfig,
    teacher_iterations: u64,
    seed: u64,
) -> Result<MimicryContext, EvaluatorFailure> {
    config.check().map_err(EvaluatorFailure::Internal)?;
    let logits = match &config.teacher {
        TeacherSource::LogitsFile(path) => load_teacher_logits(path)?,
        TeacherSource::ReferenceModel => {
            let genome = reference_genome(dataset.input_shape, dataset.num_classes);
            let mut teacher = TrainedNetwork::new(
                &genome,
                Arc::clone(dataset),
                trainer,
                teacher_iterations,
                None,
                crate::rng::derive_seed(seed, &[STREAM_TEACHER]),
            )?;
            teacher.advance_to(teacher_iterations)?;
            log::info!(
                "reference teacher trained to {} iterations, validation accuracy {:.4}",
                teacher_iterations,
                teacher.validation_accuracy()
            );
            teacher.train_logits()
        }
    };
    if logits.len() != dataset.train.len() {
        return Err(EvaluatorFailure::Internal(format!(
            "{} teacher logit rows for {} training examples",
            logits.len(),
            dataset.train.len()
        )));
    }
    for (i, row) in logits.iter().enumerate() {
        if row.len() != dataset.num_classes as usize {
            return Err(EvaluatorFailure::Internal(format!(
                "teacher logits row {i} has {} entries, expected {}",
                row.len(),
                dataset.num_classes
            )));
        }
    }
    Ok(MimicryContext {
        alpha: config.alpha,
        temperature: config.temperature,
        teacher_logits: Arc::new(logits),
    })
}

/// The built-in fitness backend: trains each individual incrementally,
/// caching its network between segments until the individual is discarded.
pub struct BuiltinEvaluator {
    dataset: Arc<Dataset>,
    trainer: TrainerConfig,
    total_iterations: u64,
    mimicry: Option<(MimicryContext, MimicryPhases)>,
    cache: Mutex<HashMap<u64, TrainedNetwork>>,
}

impl BuiltinEvaluator {
    pub fn new(
        dataset: Arc<Dataset>,
        trainer: TrainerConfig,
        total_iterations: u64,
        mimicry: Option<(MimicryContext, MimicryPhases)>,
    ) -> Self {
        BuiltinEvaluator {
            dataset,
            trainer,
            total_iterations,
            mimicry,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn dataset(&self) -> &Arc<Dataset> {
        &self.dataset
    }
}

impl Evaluator for BuiltinEvaluator {
    fn train_segment(&self, req: &EvalRequest<'_>) -> Result<f64, EvaluatorFailure> {
        let cached = self.cache.lock().expect("trainer cache").remove(&req.individual_id);
        let mut state = match cached {
            Some(state) if state.iteration() <= req.train_from => state,
            _ => {
                let mimicry = self.mimicry.as_ref().and_then(|(ctx, phases)| {
                    phases.enabled_for(req.phase).then(|| ctx.clone())
                });
                TrainedNetwork::new(
                    req.genome,
                    Arc::clone(&self.dataset),
                    &self.trainer,
                    self.total_iterations,
                    mimicry,
                    req.seed,
                )?
            }
        };
        state.advance_to(req.train_from)?;
        state.advance_to(req.train_to)?;
        let fitness = state.validation_accuracy();
        self.cache
            .lock()
            .expect("trainer cache")
            .insert(req.individual_id, state);
        Ok(fitness)
    }

    fn discard(&self, individual_id: u64) {
        self.cache.lock().expect("trainer cache").remove(&individual_id);
    }
}
