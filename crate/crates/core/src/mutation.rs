//! The nine mutation operations, step-size-driven child generation, block
//! partitioning, and the block duplication operator.
//!
//! All operations are pure functions over immutable genomes plus an explicit
//! seeded generator. Concurrent child generation uses one independent stream
//! per child, derived from the master seed.

use crate::genome::{
    Genome, LayerKind, NodeId, ShapeMap, CONV_CHANNEL_CHOICES, CONV_KERNEL_CHOICES,
    CONV_STRIDE_CHOICES,
};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;

/// The nine mutation operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutationOpKind {
    InsertConvolution,
    InsertConcatenation,
    InsertPooling,
    RemoveConvolution,
    RemoveConcatenation,
    RemovePooling,
    AlterNumberOfChannels,
    AlterStride,
    AlterFilterSize,
}

impl MutationOpKind {
    pub const ALL: [MutationOpKind; 9] = [
        MutationOpKind::InsertConvolution,
        MutationOpKind::InsertConcatenation,
        MutationOpKind::InsertPooling,
        MutationOpKind::RemoveConvolution,
        MutationOpKind::RemoveConcatenation,
        MutationOpKind::RemovePooling,
        MutationOpKind::AlterNumberOfChannels,
        MutationOpKind::AlterStride,
        MutationOpKind::AlterFilterSize,
    ];
}

impl fmt::Display for MutationOpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            MutationOpKind::InsertConvolution => "insert_convolution",
            MutationOpKind::InsertConcatenation => "insert_concatenation",
            MutationOpKind::InsertPooling => "insert_pooling",
            MutationOpKind::RemoveConvolution => "remove_convolution",
            MutationOpKind::RemoveConcatenation => "remove_concatenation",
            MutationOpKind::RemovePooling => "remove_pooling",
            MutationOpKind::AlterNumberOfChannels => "alter_number_of_channels",
            MutationOpKind::AlterStride => "alter_stride",
            MutationOpKind::AlterFilterSize => "alter_filter_size",
        };
        f.write_str(name)
    }
}

/// Maximum mutation iterations between a parent and its children.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MutationStepSize(u32);

impl MutationStepSize {
    /// Panics if `m` is zero; step sizes are at least 1.
    pub fn new(m: u32) -> Self {
        assert!(m >= 1, "mutation step-size must be at least 1");
        MutationStepSize(m)
    }

    pub fn get(self) -> u32 {
        self.0
    }
}

/// The named edit could not be applied anywhere on this genome. Not a
/// failure: the caller redraws another operation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Inapplicable {
    pub op: MutationOpKind,
    pub reason: String,
}

impl fmt::Display for Inapplicable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} inapplicable: {}", self.op, self.reason)
    }
}

/// One entry of a child's mutation trace, for the lineage log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MutationTrace {
    pub op: MutationOpKind,
    pub site: String,
    pub applied: bool,
}

/// A successfully applied edit: the new genome plus a site description.
#[derive(Debug, Clone)]
pub struct AppliedMutation {
    pub genome: Genome,
    pub site: String,
}

/// Number of operation redraws allowed per mutation step before giving up.
pub const STEP_RETRY_BUDGET: usize = 50;

/// Draw the actual mutation step count, uniform on `[1, m]`.
pub fn sample_step_count<R: Rng>(m: MutationStepSize, rng: &mut R) -> u32 {
    rng.gen_range(1..=m.get())
}

/// Where a new node can be spliced in: before the current input node, or on
/// an existing edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum InsertSite {
    BeforeInput(NodeId),
    OnEdge(NodeId, NodeId),
}

impl fmt::Display for InsertSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InsertSite::BeforeInput(n) => write!(f, "before input node {n}"),
            InsertSite::OnEdge(a, b) => write!(f, "on edge {a}->{b}"),
        }
    }
}

/// Apply one named mutation at a uniform-random valid site.
///
/// Candidate sites are enumerated deterministically and tried in a
/// uniform-random order; the first candidate whose edit passes validation
/// wins, which makes the accepted site uniform over all valid sites.
/// `Inapplicable` is returned only when every candidate fails.
pub fn apply_named_mutation<R: Rng>(
    genome: &Genome,
    op: MutationOpKind,
    rng: &mut R,
) -> Result<AppliedMutation, Inapplicable> {
    match op {
        MutationOpKind::InsertConvolution => insert_layer(
            genome,
            op,
            LayerKind::Conv { channels: 32, kernel: 3, stride: 1 },
            rng,
        ),
        MutationOpKind::InsertPooling => insert_layer(genome, op, LayerKind::Pool, rng),
        MutationOpKind::InsertConcatenation => insert_concat(genome, rng),
        MutationOpKind::RemoveConvolution => remove_simple(genome, op, |k| k.is_conv(), rng),
        MutationOpKind::RemovePooling => {
            remove_simple(genome, op, |k| matches!(k, LayerKind::Pool), rng)
        }
        MutationOpKind::RemoveConcatenation => remove_concat(genome, rng),
        MutationOpKind::AlterNumberOfChannels
        | MutationOpKind::AlterStride
        | MutationOpKind::AlterFilterSize => alter_conv(genome, op, rng),
    }
}

/// Try candidates in a uniformly shuffled order, returning the first edit
/// that yields a valid genome.
fn first_valid<T, R, F>(mut candidates: Vec<T>, rng: &mut R, mut build: F) -> Option<(Genome, T)>
where
    T: Copy,
    R: Rng,
    F: FnMut(T) -> Genome,
{
    let len = candidates.len();
    for i in 0..len {
        let j = rng.gen_range(i..len);
        candidates.swap(i, j);
        let candidate = candidates[i];
        let mutated = build(candidate);
        if mutated.validate().is_empty() {
            return Some((mutated, candidate));
        }
    }
    None
}

fn insert_layer<R: Rng>(
    genome: &Genome,
    op: MutationOpKind,
    kind: LayerKind,
    rng: &mut R,
) -> Result<AppliedMutation, Inapplicable> {
    let mut sites = Vec::with_capacity(genome.edges().len() + 1);
    if let Some(input) = genome.input_node() {
        sites.push(InsertSite::BeforeInput(input));
    }
    sites.extend(genome.edges().iter().map(|&(a, b)| InsertSite::OnEdge(a, b)));

    let found = first_valid(sites, rng, |site| {
        let mut g = genome.clone();
        let new = g.add_node(kind);
        match site {
            InsertSite::BeforeInput(head) => g.add_edge(new, head),
            InsertSite::OnEdge(a, b) => {
                g.remove_edge(a, b);
                g.add_edge(a, new);
                g.add_edge(new, b);
            }
        }
        g
    });
    match found {
        Some((genome, site)) => Ok(AppliedMutation { genome, site: site.to_string() }),
        None => Err(Inapplicable { op, reason: "no valid insertion site".into() }),
    }
}

fn insert_concat<R: Rng>(genome: &Genome, rng: &mut R) -> Result<AppliedMutation, Inapplicable> {
    let op = MutationOpKind::InsertConcatenation;
    let shapes = match genome.infer_shapes() {
        Ok(shapes) => shapes,
        Err(e) => return Err(Inapplicable { op, reason: e.to_string() }),
    };

    // A concat merges the outputs of `a` and a partner `b` with the same
    // spatial size, feeding a's former consumer `x`. Cycle-creating picks
    // (x reaching b) are rejected by validation.
    let mut candidates = Vec::new();
    for &(a, x) in genome.edges() {
        let spatial = match shapes.get(a) {
            Some(s) => s.spatial(),
            None => continue,
        };
        for node in genome.nodes() {
            let b = node.id;
            if b == a || node.kind.is_classifier() {
                continue;
            }
            if shapes.get(b).map(|s| s.spatial()) == Some(spatial) {
                candidates.push((a, b, x));
            }
        }
    }

    let found = first_valid(candidates, rng, |(a, b, x)| {
        let mut g = genome.clone();
        let cat = g.add_node(LayerKind::Concat);
        g.remove_edge(a, x);
        g.add_edge(a, cat);
        g.add_edge(b, cat);
        g.add_edge(cat, x);
        g
    });
    match found {
        Some((genome, (a, b, x))) => Ok(AppliedMutation {
            genome,
            site: format!("concat({a}, {b}) feeding {x}"),
        }),
        None => Err(Inapplicable { op, reason: "no joinable pair of nodes".into() }),
    }
}

/// Remove a node with a single input, splicing its predecessor (if any) to
/// all of its successors.
fn remove_simple<R: Rng>(
    genome: &Genome,
    op: MutationOpKind,
    select: impl Fn(&LayerKind) -> bool,
    rng: &mut R,
) -> Result<AppliedMutation, Inapplicable> {
    let targets: Vec<NodeId> = genome
        .nodes()
        .iter()
        .filter(|n| select(&n.kind))
        .map(|n| n.id)
        .collect();
    if targets.is_empty() {
        return Err(Inapplicable { op, reason: "no node of this kind".into() });
    }

    let found = first_valid(targets, rng, |id| {
        let mut g = genome.clone();
        let preds = g.preds(id);
        let succs = g.succs(id);
        g.remove_node(id);
        for &p in &preds {
            for &s in &succs {
                g.add_edge(p, s);
            }
        }
        g
    });
    match found {
        Some((genome, id)) => Ok(AppliedMutation { genome, site: format!("node {id}") }),
        None => Err(Inapplicable { op, reason: "every removal breaks the genome".into() }),
    }
}

/// Remove a concat node. One of its two inputs takes over the concat's
/// consumers; the other keeps whatever other consumers it had. Candidates
/// where the orphaned branch goes dead are rejected by validation.
fn remove_concat<R: Rng>(genome: &Genome, rng: &mut R) -> Result<AppliedMutation, Inapplicable> {
    let op = MutationOpKind::RemoveConcatenation;
    let mut candidates = Vec::new();
    for node in genome.nodes() {
        if matches!(node.kind, LayerKind::Concat) {
            for survivor in genome.preds(node.id) {
                candidates.push((node.id, survivor));
            }
        }
    }
    if candidates.is_empty() {
        return Err(Inapplicable { op, reason: "no concat node".into() });
    }

    let found = first_valid(candidates, rng, |(id, survivor)| {
        let mut g = genome.clone();
        let succs = g.succs(id);
        g.remove_node(id);
        for &s in &succs {
            g.add_edge(survivor, s);
        }
        g
    });
    match found {
        Some((genome, (id, survivor))) => Ok(AppliedMutation {
            genome,
            site: format!("node {id}, reconnecting {survivor}"),
        }),
        None => Err(Inapplicable { op, reason: "every removal breaks the genome".into() }),
    }
}

/// Redraw one convolution hyper-parameter uniformly from its legal list, on
/// a uniform-random convolution node.
fn alter_conv<R: Rng>(
    genome: &Genome,
    op: MutationOpKind,
    rng: &mut R,
) -> Result<AppliedMutation, Inapplicable> {
    let mut convs: Vec<NodeId> = genome
        .nodes()
        .iter()
        .filter(|n| n.kind.is_conv())
        .map(|n| n.id)
        .collect();
    if convs.is_empty() {
        return Err(Inapplicable { op, reason: "no convolution node".into() });
    }

    let choices: &[u32] = match op {
        MutationOpKind::AlterNumberOfChannels => &CONV_CHANNEL_CHOICES,
        MutationOpKind::AlterStride => &CONV_STRIDE_CHOICES,
        MutationOpKind::AlterFilterSize => &CONV_KERNEL_CHOICES,
        _ => unreachable!("alter_conv only handles alter ops"),
    };

    // Uniform over convolution nodes first, then uniform over that node's
    // valid redraw values.
    convs.shuffle(rng);
    for id in convs {
        let Some(LayerKind::Conv { channels, kernel, stride }) = genome.kind(id) else {
            unreachable!("selected nodes are convolutions")
        };
        let found = first_valid(choices.to_vec(), rng, |value| {
            let kind = match op {
                MutationOpKind::AlterNumberOfChannels => {
                    LayerKind::Conv { channels: value, kernel, stride }
                }
                MutationOpKind::AlterStride => LayerKind::Conv { channels, kernel, stride: value },
                MutationOpKind::AlterFilterSize => {
                    LayerKind::Conv { channels, kernel: value, stride }
                }
                _ => unreachable!(),
            };
            let mut g = genome.clone();
            g.set_kind(id, kind);
            g
        });
        if let Some((genome, value)) = found {
            return Ok(AppliedMutation { genome, site: format!("node {id} -> {value}") });
        }
    }
    Err(Inapplicable { op, reason: "every redraw breaks the genome".into() })
}

/// Generate one child by applying `k ~ U[1, m]` successful mutation steps.
///
/// Each step draws an operation uniformly from the nine kinds and applies
/// it; an inapplicable draw is retried with a fresh operation, up to
/// [`STEP_RETRY_BUDGET`] draws per step. If a step exhausts its budget the
/// child accumulated so far is returned (possibly the parent itself).
pub fn mutate_child<R: Rng>(parent: &Genome, m: MutationStepSize, rng: &mut R) -> Genome {
    mutate_child_traced(parent, m, rng).0
}

/// [`mutate_child`] plus the per-step trace for the lineage log. Only
/// applied steps are traced, plus a terminal entry if the budget ran out.
pub fn mutate_child_traced<R: Rng>(
    parent: &Genome,
    m: MutationStepSize,
    rng: &mut R,
) -> (Genome, Vec<MutationTrace>) {
    let steps = sample_step_count(m, rng);
    let mut current = parent.clone();
    let mut trace = Vec::new();
    for _ in 0..steps {
        let mut applied = false;
        for _ in 0..STEP_RETRY_BUDGET {
            let op = *MutationOpKind::ALL.as_slice().choose(rng).expect("nine ops");
            match apply_named_mutation(&current, op, rng) {
                Ok(outcome) => {
                    trace.push(MutationTrace { op, site: outcome.site, applied: true });
                    current = outcome.genome;
                    applied = true;
                    break;
                }
                Err(inapplicable) => {
                    log::trace!("redrawing mutation op: {inapplicable}");
                }
            }
        }
        if !applied {
            log::warn!(
                "mutation step retry budget exhausted after {} applied steps; keeping child as-is",
                trace.len()
            );
            trace.push(MutationTrace {
                op: MutationOpKind::InsertConvolution,
                site: "retry budget exhausted".into(),
                applied: false,
            });
            break;
        }
    }
    debug_assert!(current.validate().is_empty());
    (current, trace)
}

/// A maximal run of nodes (classifier excluded) whose output activation
/// maps share the same width and height, contiguous in topological order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub node_ids: Vec<NodeId>,
    pub spatial: (u32, u32),
}

impl Block {
    pub fn contains_conv(&self, genome: &Genome) -> bool {
        self.node_ids
            .iter()
            .any(|id| genome.kind(*id).is_some_and(|k| k.is_conv()))
    }
}

/// Partition the genome (classifier excluded) into blocks: maximal runs of
/// constant output spatial size along the topological order. A
/// spatial-reducing node belongs to the block of its output size.
pub fn partition_blocks(genome: &Genome, shapes: &ShapeMap) -> Vec<Block> {
    let order = genome.topological_order().unwrap_or_default();
    let mut blocks: Vec<Block> = Vec::new();
    for id in order {
        if genome.kind(id).is_some_and(|k| k.is_classifier()) {
            continue;
        }
        let Some(shape) = shapes.get(id) else { continue };
        let spatial = shape.spatial();
        match blocks.last_mut() {
            Some(block) if block.spatial == spatial => block.node_ids.push(id),
            _ => blocks.push(Block { node_ids: vec![id], spatial }),
        }
    }
    blocks
}

/// Duplicate a block in sequence: the copy is inserted immediately
/// downstream of the original, so the original block's output feeds the
/// copy's entry nodes and the copy's exit feeds whatever the original fed.
///
/// The copy's entry convolution reads its new input depth structurally; the
/// genome records kinds only, weights are the evaluator's concern.
pub fn duplicate_block(genome: &Genome, block_index: usize) -> Result<Genome, Inapplicable> {
    let inapplicable = |reason: String| Inapplicable {
        op: MutationOpKind::InsertConvolution,
        reason,
    };
    let shapes = genome
        .infer_shapes()
        .map_err(|e| inapplicable(format!("shape inference failed: {e}")))?;
    let blocks = partition_blocks(genome, &shapes);
    let block = blocks
        .get(block_index)
        .ok_or_else(|| inapplicable(format!("no block at index {block_index}")))?;
    if !block.contains_conv(genome) {
        return Err(inapplicable("block has no convolution to duplicate".into()));
    }

    let members = &block.node_ids;
    let in_block = |id: NodeId| members.contains(&id);

    // Every edge leaving the block must come from one exit node, otherwise
    // "immediately downstream" is ambiguous.
    let mut exits: Vec<NodeId> = genome
        .edges()
        .iter()
        .filter(|(from, to)| in_block(*from) && !in_block(*to))
        .map(|(from, _)| *from)
        .collect();
    exits.dedup(); // edges are sorted by source
    let [exit] = exits.as_slice() else {
        return Err(inapplicable(format!(
            "block has {} exit nodes, need exactly 1",
            exits.len()
        )));
    };
    let exit = *exit;

    let mut g = genome.clone();

    // Copy members in block order (= topological order), with fresh ids.
    let mut mapping: Vec<(NodeId, NodeId)> = Vec::with_capacity(members.len());
    for &id in members {
        let kind = genome.kind(id).expect("member exists");
        let copy = g.add_node(kind);
        mapping.push((id, copy));
    }
    let map = |id: NodeId| {
        mapping
            .iter()
            .find(|(old, _)| *old == id)
            .map(|(_, new)| *new)
            .expect("block member")
    };

    // Internal edges are replicated inside the copy.
    for &(from, to) in genome.edges() {
        if in_block(from) && in_block(to) {
            g.add_edge(map(from), map(to));
        }
    }

    // The original block's exit feeds each copied entry node.
    for &id in members {
        let external_in =
            genome.in_degree(id) == 0 || genome.preds(id).iter().any(|p| !in_block(*p));
        if external_in {
            g.add_edge(exit, map(id));
        }
    }

    // The copy's exit takes over the original's external consumers.
    for &(from, to) in genome.edges() {
        if from == exit && !in_block(to) {
            g.remove_edge(from, to);
            g.add_edge(map(exit), to);
        }
    }

    let violations = g.validate();
    if violations.is_empty() {
        Ok(g)
    } else {
        Err(inapplicable(format!(
            "duplication at block {block_index} fails validation: {}",
            violations
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join("; ")
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genome::TensorShape;
    use crate::rng::stream;

    fn seed_genome() -> Genome {
        Genome::seed(TensorShape::new(3, 32, 32), 10)
    }

    /// A chain with convolutions, a concat and a pool, giving every
    /// mutation op somewhere to act.
    fn rich_genome() -> Genome {
        let mut g = Genome::seed(TensorShape::new(3, 16, 16), 10);
        let c1 = g.add_node(LayerKind::Conv { channels: 32, kernel: 3, stride: 1 });
        let c2 = g.add_node(LayerKind::Conv { channels: 16, kernel: 1, stride: 1 });
        let cat = g.add_node(LayerKind::Concat);
        let pool = g.add_node(LayerKind::Pool);
        let c3 = g.add_node(LayerKind::Conv { channels: 48, kernel: 3, stride: 1 });
        g.add_edge(c1, c2);
        g.add_edge(c1, cat);
        g.add_edge(c2, cat);
        g.add_edge(cat, pool);
        g.add_edge(pool, c3);
        g.add_edge(c3, NodeId(0));
        assert!(g.validate().is_empty());
        g
    }

    #[test]
    fn step_count_degenerate_range() {
        let mut rng = stream(1, &[]);
        for _ in 0..32 {
            assert_eq!(sample_step_count(MutationStepSize::new(1), &mut rng), 1);
        }
    }

    #[test]
    fn step_count_mean_matches_uniform() {
        // Closed form: mean of U[1,100] is 50.5; 1e5 draws concentrate
        // within +-1 of it.
        let mut rng = stream(2, &[]);
        let m = MutationStepSize::new(100);
        let n = 100_000;
        let total: u64 = (0..n).map(|_| sample_step_count(m, &mut rng) as u64).sum();
        let mean = total as f64 / n as f64;
        assert!((49.5..=51.5).contains(&mean), "mean {mean}");
    }

    #[test]
    fn step_count_reproducible() {
        let draws = |seed| -> Vec<u32> {
            let mut rng = stream(seed, &[7]);
            (0..16)
                .map(|_| sample_step_count(MutationStepSize::new(10), &mut rng))
                .collect()
        };
        assert_eq!(draws(3), draws(3));
        assert_ne!(draws(3), draws(4));
    }

    #[test]
    fn insert_pooling_into_seed_goes_before_global_pool() {
        // The only valid site is before the input node: a pool feeding the
        // classifier would break the classifier-predecessor rule.
        let g = seed_genome();
        let mut rng = stream(5, &[]);
        let out = apply_named_mutation(&g, MutationOpKind::InsertPooling, &mut rng).unwrap();
        let child = out.genome;
        assert_eq!(child.node_count(), 3);
        let shapes = child.infer_shapes().unwrap();
        // The global pooling node now sits behind the pool and sees 16x16.
        let pool = child.input_node().unwrap();
        assert_eq!(shapes.get(pool).unwrap().spatial(), (16, 16));
        assert!(child.validate().is_empty());
    }

    #[test]
    fn remove_convolution_on_seed_is_inapplicable() {
        let g = seed_genome();
        let mut rng = stream(6, &[]);
        let err =
            apply_named_mutation(&g, MutationOpKind::RemoveConvolution, &mut rng).unwrap_err();
        assert_eq!(err.op, MutationOpKind::RemoveConvolution);
    }

    #[test]
    fn alter_channels_stays_in_legal_list() {
        let g = rich_genome();
        for seed in 0..24 {
            let mut rng = stream(seed, &[]);
            let out =
                apply_named_mutation(&g, MutationOpKind::AlterNumberOfChannels, &mut rng).unwrap();
            assert!(out.genome.validate().is_empty());
            for node in out.genome.nodes() {
                if let LayerKind::Conv { channels, .. } = node.kind {
                    assert!(CONV_CHANNEL_CHOICES.contains(&channels));
                }
            }
        }
    }

    #[test]
    fn mutate_child_single_step_applies_one_edit() {
        let parent = seed_genome();
        let mut rng = stream(8, &[]);
        let (child, trace) = mutate_child_traced(&parent, MutationStepSize::new(1), &mut rng);
        assert!(child.validate().is_empty());
        let applied: Vec<_> = trace.iter().filter(|t| t.applied).collect();
        assert_eq!(applied.len(), 1);
    }

    #[test]
    fn mutate_child_is_deterministic_for_fixed_seed() {
        let parent = seed_genome();
        let a = mutate_child(&parent, MutationStepSize::new(100), &mut stream(9, &[1]));
        let b = mutate_child(&parent, MutationStepSize::new(100), &mut stream(9, &[1]));
        assert_eq!(a.encode(), b.encode());
    }

    #[test]
    fn mutate_child_leaves_parent_untouched() {
        let parent = rich_genome();
        let before = parent.clone();
        let _ = mutate_child(&parent, MutationStepSize::new(20), &mut stream(10, &[]));
        assert_eq!(parent, before);
        assert_eq!(parent.encode(), before.encode());
    }

    #[test]
    fn children_always_validate() {
        let parent = seed_genome();
        for seed in 0..200 {
            let child = mutate_child(&parent, MutationStepSize::new(10), &mut stream(seed, &[2]));
            assert!(child.validate().is_empty(), "seed {seed}");
        }
    }

    #[test]
    fn every_operation_is_reachable() {
        use std::collections::HashMap;
        let mut counts: HashMap<MutationOpKind, u32> = HashMap::new();
        let mut g = rich_genome();
        let mut rng = stream(11, &[]);
        for _ in 0..10_000 {
            let op = *MutationOpKind::ALL.as_slice().choose(&mut rng).unwrap();
            if let Ok(out) = apply_named_mutation(&g, op, &mut rng) {
                *counts.entry(op).or_default() += 1;
                // Keep the walk from drifting into degenerate sizes.
                if out.genome.node_count() <= 40 {
                    g = out.genome;
                }
            }
        }
        for op in MutationOpKind::ALL {
            assert!(counts.get(&op).copied().unwrap_or(0) > 0, "{op} never succeeded");
        }
    }

    #[test]
    fn partition_of_seed_is_one_degenerate_block() {
        let g = seed_genome();
        let shapes = g.infer_shapes().unwrap();
        let blocks = partition_blocks(&g, &shapes);
        assert_eq!(blocks.len(), 1);
        assert_eq!(blocks[0].node_ids, vec![NodeId(0)]);
        assert_eq!(blocks[0].spatial, (1, 1));
    }

    #[test]
    fn partition_splits_on_spatial_change() {
        // conv@32x32 -> pool(out 16) -> conv@16x16 -> global pool(out 1x1).
        // Oracle: direct scan of the inferred shape map; the pool belongs
        // to the block of its output size.
        let mut g = Genome::seed(TensorShape::new(3, 32, 32), 10);
        let c1 = g.add_node(LayerKind::Conv { channels: 32, kernel: 3, stride: 1 });
        let pool = g.add_node(LayerKind::Pool);
        let c2 = g.add_node(LayerKind::Conv { channels: 32, kernel: 3, stride: 1 });
        g.add_edge(c1, pool);
        g.add_edge(pool, c2);
        g.add_edge(c2, NodeId(0));
        assert!(g.validate().is_empty());

        let shapes = g.infer_shapes().unwrap();
        let blocks = partition_blocks(&g, &shapes);
        assert_eq!(blocks.len(), 3);
        assert_eq!(blocks[0].node_ids, vec![c1]);
        assert_eq!(blocks[0].spatial, (32, 32));
        assert_eq!(blocks[1].node_ids, vec![pool, c2]);
        assert_eq!(blocks[1].spatial, (16, 16));
        assert_eq!(blocks[2].node_ids, vec![NodeId(0)]);
        assert_eq!(blocks[2].spatial, (1, 1));
    }

    #[test]
    fn partition_covers_topological_order() {
        let g = rich_genome();
        let shapes = g.infer_shapes().unwrap();
        let blocks = partition_blocks(&g, &shapes);
        let flattened: Vec<NodeId> = blocks.iter().flat_map(|b| b.node_ids.clone()).collect();
        let expected: Vec<NodeId> = g
            .topological_order()
            .unwrap()
            .into_iter()
            .filter(|id| !g.kind(*id).unwrap().is_classifier())
            .collect();
        assert_eq!(flattened, expected);
    }

    #[test]
    fn duplicate_conv_block_in_chain() {
        let mut g = Genome::seed(TensorShape::new(3, 8, 8), 10);
        let conv = g.add_node(LayerKind::Conv { channels: 32, kernel: 3, stride: 1 });
        g.add_edge(conv, NodeId(0));
        assert!(g.validate().is_empty());

        let out = duplicate_block(&g, 0).unwrap();
        assert!(out.validate().is_empty());
        assert_eq!(out.node_count(), 4);
        let shapes = out.infer_shapes().unwrap();
        let convs: Vec<NodeId> = out
            .nodes()
            .iter()
            .filter(|n| n.kind.is_conv())
            .map(|n| n.id)
            .collect();
        assert_eq!(convs.len(), 2);
        for c in convs {
            assert_eq!(shapes.get(c).unwrap().spatial(), (8, 8));
        }
    }

    #[test]
    fn duplicate_conv_free_block_is_inapplicable() {
        let g = seed_genome();
        assert!(duplicate_block(&g, 0).is_err());
    }

    #[test]
    fn duplication_strictly_increases_params() {
        let g = rich_genome();
        let shapes = g.infer_shapes().unwrap();
        let blocks = partition_blocks(&g, &shapes);
        let before = g.count_params().unwrap();
        let mut successes = 0;
        for index in 0..blocks.len() {
            if let Ok(out) = duplicate_block(&g, index) {
                successes += 1;
                assert!(out.count_params().unwrap() > before);
            }
        }
        assert!(successes > 0, "no block was duplicable");
    }

    #[test]
    fn duplication_rejected_when_downstream_concat_breaks() {
        // Two branches reduce 16x16 to 8x8 at different points of the
        // topological order, so one stride-2 conv sits alone in a block.
        // Duplicating that block halves one concat input again (8x8 to
        // 4x4), the spatial sizes no longer match, and the candidate is
        // rejected.
        let mut g = Genome::seed(TensorShape::new(3, 16, 16), 10);
        let fork = g.add_node(LayerKind::Conv { channels: 16, kernel: 3, stride: 1 });
        let left = g.add_node(LayerKind::Conv { channels: 16, kernel: 3, stride: 2 });
        let keep = g.add_node(LayerKind::Conv { channels: 16, kernel: 3, stride: 1 });
        let right = g.add_node(LayerKind::Conv { channels: 16, kernel: 3, stride: 2 });
        let cat = g.add_node(LayerKind::Concat);
        g.add_edge(fork, left);
        g.add_edge(fork, keep);
        g.add_edge(keep, right);
        g.add_edge(left, cat);
        g.add_edge(right, cat);
        g.add_edge(cat, NodeId(0));
        assert!(g.validate().is_empty());

        let shapes = g.infer_shapes().unwrap();
        let blocks = partition_blocks(&g, &shapes);
        let target = blocks
            .iter()
            .position(|b| b.node_ids == vec![left])
            .expect("left branch reducer sits in its own block");
        let err = duplicate_block(&g, target).unwrap_err();
        assert!(err.reason.contains("fails validation"), "{}", err.reason);
    }

    #[test]
    fn duplication_rejected_for_multi_exit_block() {
        // Two stride-2 convs form one 4x4 block but feed separate pools,
        // so the block has two exit nodes and no unambiguous downstream
        // insertion point.
        let mut g = Genome::seed(TensorShape::new(3, 8, 8), 10);
        let fork = g.add_node(LayerKind::Conv { channels: 16, kernel: 3, stride: 1 });
        let b = g.add_node(LayerKind::Conv { channels: 16, kernel: 3, stride: 2 });
        let c = g.add_node(LayerKind::Conv { channels: 16, kernel: 3, stride: 2 });
        let pb = g.add_node(LayerKind::Pool);
        let pc = g.add_node(LayerKind::Pool);
        let cat = g.add_node(LayerKind::Concat);
        g.add_edge(fork, b);
        g.add_edge(fork, c);
        g.add_edge(b, pb);
        g.add_edge(c, pc);
        g.add_edge(pb, cat);
        g.add_edge(pc, cat);
        g.add_edge(cat, NodeId(0));
        assert!(g.validate().is_empty());

        let shapes = g.infer_shapes().unwrap();
        let blocks = partition_blocks(&g, &shapes);
        let target = blocks
            .iter()
            .position(|blk| blk.node_ids == vec![b, c])
            .expect("the two reducers share a block");
        let err = duplicate_block(&g, target).unwrap_err();
        assert!(err.reason.contains("exit nodes"), "{}", err.reason);
    }
}
