//! The architecture genome: a validated acyclic graph of layer nodes with
//! deterministic shape inference and a canonical JSON record format.
//!
//! A genome is a value: construction and every operation on it are pure, so
//! genomes can be shared and evaluated across concurrent workers without
//! synchronization. Node ids are allocated monotonically per lineage and
//! never reused, which lets lineage logs track structural ancestry.

use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::fmt;
use thiserror::Error;

/// Identifier of a node within one genome lineage.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Output shape of a layer, excluding the batch dimension: depth (channels),
/// width and height in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorShape {
    pub depth: u32,
    pub width: u32,
    pub height: u32,
}

impl TensorShape {
    pub fn new(depth: u32, width: u32, height: u32) -> Self {
        Self {
            depth,
            width,
            height,
        }
    }

    /// Spatial extent (width, height).
    pub fn spatial(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn is_valid(&self) -> bool {
        self.depth >= 1 && self.width >= 1 && self.height >= 1
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.depth, self.width, self.height)
    }
}

/// Legal channel counts for a convolution.
pub const CONV_CHANNEL_CHOICES: [u32; 5] = [16, 32, 48, 64, 96];
/// Legal kernel sizes for a convolution.
pub const CONV_KERNEL_CHOICES: [u32; 2] = [1, 3];
/// Legal strides for a convolution.
pub const CONV_STRIDE_CHOICES: [u32; 2] = [1, 2];

/// Layer kind of a genome node.
///
/// Pooling is fixed at kernel 2, stride 2. Convolutions carry their
/// hyper-parameters; in the built-in trainer every convolution is followed
/// by batch normalization and a rectifier, which is why parameter counting
/// charges 2·channels normalization parameters per convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum LayerKind {
    Conv { channels: u32, kernel: u32, stride: u32 },
    Pool,
    Concat,
    GlobalPool,
    Classifier { num_classes: u32 },
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::Pool => "pool",
            LayerKind::Concat => "concat",
            LayerKind::GlobalPool => "global_pool",
            LayerKind::Classifier { .. } => "classifier",
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, LayerKind::Conv { .. })
    }

    pub fn is_classifier(&self) -> bool {
        matches!(self, LayerKind::Classifier { .. })
    }

    /// Number of inputs this kind consumes, unless it is the graph input.
    fn expected_in_degree(&self) -> u32 {
        match self {
            LayerKind::Concat => 2,
            _ => 1,
        }
    }
}

/// One layer node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    #[serde(flatten)]
    pub kind: LayerKind,
}

/// Output shapes per node, as computed by [`Genome::infer_shapes`].
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ShapeMap {
    entries: Vec<(NodeId, TensorShape)>, // sorted by id
}

impl ShapeMap {
    pub fn get(&self, id: NodeId) -> Option<TensorShape> {
        self.entries
            .binary_search_by_key(&id, |(n, _)| *n)
            .ok()
            .map(|i| self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, TensorShape)> + '_ {
        self.entries.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn insert(&mut self, id: NodeId, shape: TensorShape) {
        match self.entries.binary_search_by_key(&id, |(n, _)| *n) {
            Ok(i) => self.entries[i] = (id, shape),
            Err(i) => self.entries.insert(i, (id, shape)),
        }
    }
}

/// Shape-inference failure.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ShapeError {
    #[error("concat node {node} inputs differ in spatial size: {left} vs {right}")]
    Mismatch {
        node: NodeId,
        left: TensorShape,
        right: TensorShape,
    },
    #[error("node {node} would produce a degenerate shape")]
    Degenerate { node: NodeId },
    #[error("node {node} has {found} inputs, expected {expected}")]
    BadArity {
        node: NodeId,
        expected: u32,
        found: u32,
    },
    #[error("graph contains a cycle")]
    Cyclic,
}

/// A violated genome invariant, reported by [`Genome::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    DuplicateNodeId(NodeId),
    DanglingEdge(NodeId, NodeId),
    CyclicGraph,
    MissingClassifier,
    MultipleClassifiers(Vec<NodeId>),
    ClassifierInDegree { id: NodeId, found: u32 },
    ClassifierOutDegree { id: NodeId, found: u32 },
    ClassifierPredecessor { id: NodeId, pred: NodeId },
    ClassifierClassMismatch { id: NodeId, node: u32, genome: u32 },
    NoInputNode,
    MultipleInputNodes(Vec<NodeId>),
    BadInDegree { id: NodeId, expected: u32, found: u32 },
    Unreachable(NodeId),
    BadHyperParameter { id: NodeId, detail: String },
    BadInputShape,
    Shape(ShapeError),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateNodeId(id) => write!(f, "duplicate node id {id}"),
            Violation::DanglingEdge(a, b) => {
                write!(f, "edge ({a}, {b}) references a missing node")
            }
            Violation::CyclicGraph => write!(f, "graph contains a cycle"),
            Violation::MissingClassifier => write!(f, "no classifier node"),
            Violation::MultipleClassifiers(ids) => {
                write!(f, "more than one classifier node: {ids:?}")
            }
            Violation::ClassifierInDegree { id, found } => {
                write!(f, "classifier {id} has in-degree {found}, expected 1")
            }
            Violation::ClassifierOutDegree { id, found } => {
                write!(f, "classifier {id} has out-degree {found}, expected 0")
            }
            Violation::ClassifierPredecessor { id, pred } => {
                write!(f, "classifier {id} predecessor {pred} is not a global pooling node")
            }
            Violation::ClassifierClassMismatch { id, node, genome } => write!(
                f,
                "classifier {id} declares {node} classes but the genome declares {genome}"
            ),
            Violation::NoInputNode => write!(f, "no input node (every node has a predecessor)"),
            Violation::MultipleInputNodes(ids) => {
                write!(f, "more than one input node: {ids:?}")
            }
            Violation::BadInDegree { id, expected, found } => {
                write!(f, "node {id} has in-degree {found}, expected {expected}")
            }
            Violation::Unreachable(id) => {
                write!(f, "node {id} is not on a path from the input to the classifier")
            }
            Violation::BadHyperParameter { id, detail } => {
                write!(f, "node {id}: {detail}")
            }
            Violation::BadInputShape => write!(f, "input shape has a zero dimension"),
            Violation::Shape(e) => write!(f, "{e}"),
        }
    }
}

/// Failure to decode a canonical genome record.
#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("malformed genome record: {0}")]
    Parse(String),
    #[error("genome record violates invariants: {}", format_violations(.0))]
    Invalid(Vec<Violation>),
}

fn format_violations(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

/// An architecture genome: an acyclic graph of layer nodes.
///
/// Nodes are kept sorted by id; edges are kept sorted lexicographically.
/// Both invariants make every traversal and the canonical encoding
/// deterministic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "GenomeRecord", into = "GenomeRecord")]
pub struct Genome {
    nodes: Vec<Node>,
    edges: Vec<(NodeId, NodeId)>,
    input_shape: TensorShape,
    num_classes: u32,
    next_id: u32,
}

#[derive(Serialize, Deserialize, Clone)]
struct GenomeRecord {
    input_shape: TensorShape,
    num_classes: u32,
    nodes: Vec<Node>,
    edges: Vec<(NodeId, NodeId)>,
}

impl From<Genome> for GenomeRecord {
    fn from(g: Genome) -> Self {
        GenomeRecord {
            input_shape: g.input_shape,
            num_classes: g.num_classes,
            nodes: g.nodes,
            edges: g.edges,
        }
    }
}

impl TryFrom<GenomeRecord> for Genome {
    type Error = String;

    fn try_from(rec: GenomeRecord) -> Result<Self, String> {
        Ok(Genome::from_parts(
            rec.input_shape,
            rec.num_classes,
            rec.nodes,
            rec.edges,
        ))
    }
}

impl Genome {
    /// The minimal genome: a global pooling node feeding a classifier.
    pub fn seed(input_shape: TensorShape, num_classes: u32) -> Self {
        assert!(input_shape.is_valid(), "input shape must be positive");
        assert!(num_classes >= 2, "need at least two classes");
        let pool = Node {
            id: NodeId(0),
            kind: LayerKind::GlobalPool,
        };
        let head = Node {
            id: NodeId(1),
            kind: LayerKind::Classifier { num_classes },
        };
        Genome {
            nodes: vec![pool, head],
            edges: vec![(NodeId(0), NodeId(1))],
            input_shape,
            num_classes,
            next_id: 2,
        }
    }

    /// Assemble a genome from raw parts without validating. Node and edge
    /// lists are sorted and deduplicated; the id allocator resumes past the
    /// largest id seen.
    pub fn from_parts(
        input_shape: TensorShape,
        num_classes: u32,
        mut nodes: Vec<Node>,
        mut edges: Vec<(NodeId, NodeId)>,
    ) -> Self {
        nodes.sort_by_key(|n| n.id);
        edges.sort();
        edges.dedup();
        let next_id = nodes.iter().map(|n| n.id.0 + 1).max().unwrap_or(0);
        Genome {
            nodes,
            edges,
            input_shape,
            num_classes,
            next_id,
        }
    }

    pub fn input_shape(&self) -> TensorShape {
        self.input_shape
    }

    pub fn num_classes(&self) -> u32 {
        self.num_classes
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[(NodeId, NodeId)] {
        &self.edges
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.nodes.binary_search_by_key(&id, |n| n.id).is_ok()
    }

    fn index_of(&self, id: NodeId) -> Option<usize> {
        self.nodes.binary_search_by_key(&id, |n| n.id).ok()
    }

    /// Edges leaving `id`, as a contiguous slice (edges are sorted by source).
    fn out_edges(&self, id: NodeId) -> &[(NodeId, NodeId)] {
        let lo = self.edges.partition_point(|(from, _)| *from < id);
        let hi = self.edges.partition_point(|(from, _)| *from <= id);
        &self.edges[lo..hi]
    }

    /// Predecessor lists for every node, indexed by node position. One O(E)
    /// pass; each list is sorted because edges are.
    fn preds_table(&self) -> Vec<Vec<NodeId>> {
        let mut table = vec![Vec::new(); self.nodes.len()];
        for &(from, to) in &self.edges {
            if let Some(i) = self.index_of(to) {
                table[i].push(from);
            }
        }
        table
    }

    /// In-degree of every node, indexed by node position.
    fn in_degrees(&self) -> Vec<u32> {
        let mut degrees = vec![0u32; self.nodes.len()];
        for &(_, to) in &self.edges {
            if let Some(i) = self.index_of(to) {
                degrees[i] += 1;
            }
        }
        degrees
    }

    pub fn kind(&self, id: NodeId) -> Option<LayerKind> {
        self.nodes
            .binary_search_by_key(&id, |n| n.id)
            .ok()
            .map(|i| self.nodes[i].kind)
    }

    /// Predecessor ids in ascending order.
    pub fn preds(&self, id: NodeId) -> Vec<NodeId> {
        let mut out: Vec<NodeId> = self
            .edges
            .iter()
            .filter(|(_, to)| *to == id)
            .map(|(from, _)| *from)
            .collect();
        out.sort();
        out
    }

    /// Successor ids in ascending order (edges are sorted by source).
    pub fn succs(&self, id: NodeId) -> Vec<NodeId> {
        self.out_edges(id).iter().map(|(_, to)| *to).collect()
    }

    pub fn in_degree(&self, id: NodeId) -> u32 {
        self.edges.iter().filter(|(_, to)| *to == id).count() as u32
    }

    pub fn out_degree(&self, id: NodeId) -> u32 {
        self.edges.iter().filter(|(from, _)| *from == id).count() as u32
    }

    /// The unique classifier node, when the genome is well-formed.
    pub fn classifier(&self) -> Option<NodeId> {
        let mut found = None;
        for n in &self.nodes {
            if n.kind.is_classifier() {
                if found.is_some() {
                    return None;
                }
                found = Some(n.id);
            }
        }
        found
    }

    /// The unique non-classifier node with in-degree 0, when well-formed.
    pub fn input_node(&self) -> Option<NodeId> {
        let mut found = None;
        for n in &self.nodes {
            if !n.kind.is_classifier() && self.in_degree(n.id) == 0 {
                if found.is_some() {
                    return None;
                }
                found = Some(n.id);
            }
        }
        found
    }

    /// Allocate a fresh node id and append the node. Ids are monotone per
    /// lineage and never reused.
    pub fn add_node(&mut self, kind: LayerKind) -> NodeId {
        let id = NodeId(self.next_id);
        self.next_id += 1;
        self.nodes.push(Node { id, kind });
        id
    }

    pub fn add_edge(&mut self, from: NodeId, to: NodeId) {
        if let Err(i) = self.edges.binary_search(&(from, to)) {
            self.edges.insert(i, (from, to));
        }
    }

    pub fn remove_edge(&mut self, from: NodeId, to: NodeId) {
        if let Ok(i) = self.edges.binary_search(&(from, to)) {
            self.edges.remove(i);
        }
    }

    /// Remove a node and every edge touching it. The id is retired.
    pub fn remove_node(&mut self, id: NodeId) {
        if let Ok(i) = self.nodes.binary_search_by_key(&id, |n| n.id) {
            self.nodes.remove(i);
        }
        self.edges.retain(|(from, to)| *from != id && *to != id);
    }

    pub fn set_kind(&mut self, id: NodeId, kind: LayerKind) {
        if let Ok(i) = self.nodes.binary_search_by_key(&id, |n| n.id) {
            self.nodes[i].kind = kind;
        }
    }

    /// Is `to` reachable from `from` (reflexively)?
    pub fn reaches(&self, from: NodeId, to: NodeId) -> bool {
        if from == to {
            return true;
        }
        let Some(start) = self.index_of(from) else {
            return false;
        };
        let mut seen = vec![false; self.nodes.len()];
        seen[start] = true;
        let mut queue = VecDeque::from([from]);
        while let Some(n) = queue.pop_front() {
            for &(_, s) in self.out_edges(n) {
                if s == to {
                    return true;
                }
                if let Some(i) = self.index_of(s) {
                    if !seen[i] {
                        seen[i] = true;
                        queue.push_back(s);
                    }
                }
            }
        }
        false
    }

    /// Forward-reachable set from `from`, as a bitset over node positions.
    fn reachable_set(&self, from: NodeId, reversed: bool) -> Vec<bool> {
        let mut seen = vec![false; self.nodes.len()];
        let Some(start) = self.index_of(from) else {
            return seen;
        };
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        // Reverse adjacency needs its own table; forward uses edge slices.
        let preds = if reversed { Some(self.preds_table()) } else { None };
        while let Some(i) = queue.pop_front() {
            let id = self.nodes[i].id;
            let step = |next: NodeId, seen: &mut Vec<bool>, queue: &mut VecDeque<usize>| {
                if let Some(j) = self.index_of(next) {
                    if !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            };
            match &preds {
                Some(table) => {
                    for &p in &table[i] {
                        step(p, &mut seen, &mut queue);
                    }
                }
                None => {
                    for &(_, s) in self.out_edges(id) {
                        step(s, &mut seen, &mut queue);
                    }
                }
            }
        }
        seen
    }

    /// Node ids in topological order. Ties are broken by ascending id, so
    /// the order is deterministic for a fixed genome.
    pub fn topological_order(&self) -> Result<Vec<NodeId>, ShapeError> {
        use std::cmp::Reverse;
        use std::collections::BinaryHeap;

        let mut in_deg = self.in_degrees();
        let mut ready: BinaryHeap<Reverse<NodeId>> = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(i, _)| in_deg[*i] == 0)
            .map(|(_, n)| Reverse(n.id))
            .collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(Reverse(id)) = ready.pop() {
            order.push(id);
            for &(_, s) in self.out_edges(id) {
                if let Some(i) = self.index_of(s) {
                    in_deg[i] -= 1;
                    if in_deg[i] == 0 {
                        ready.push(Reverse(s));
                    }
                }
            }
        }
        if order.len() == self.nodes.len() {
            Ok(order)
        } else {
            Err(ShapeError::Cyclic)
        }
    }

    /// Infer the output shape of every node.
    ///
    /// Convolutions use same-padding semantics: output spatial size is
    /// `ceil(in / stride)` on each axis and depth equals the channel count.
    /// Pooling is 2x2 stride 2 with ceil-mode arithmetic, depth unchanged.
    /// Concat requires both inputs to share (width, height) and sums their
    /// depths. Global pooling collapses to (depth, 1, 1). The classifier
    /// output is recorded as (num_classes, 1, 1).
    pub fn infer_shapes(&self) -> Result<ShapeMap, ShapeError> {
        let order = self.topological_order()?;
        let preds = self.preds_table();
        let mut map = ShapeMap::default();
        for id in order {
            let i = self.index_of(id).expect("node in order");
            let kind = self.nodes[i].kind;
            let inputs: Vec<TensorShape> = if preds[i].is_empty() {
                vec![self.input_shape]
            } else {
                preds[i]
                    .iter()
                    .map(|p| map.get(*p).expect("predecessor precedes in topo order"))
                    .collect()
            };
            let shape = infer_node_shape(id, kind, &inputs)?;
            if !shape.is_valid() {
                return Err(ShapeError::Degenerate { node: id });
            }
            map.insert(id, shape);
        }
        Ok(map)
    }

    /// Check every genome invariant and return all violations found. An
    /// empty list means the genome is valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut violations = Vec::new();

        if !self.input_shape.is_valid() {
            violations.push(Violation::BadInputShape);
        }

        // Unique ids (nodes are sorted by id).
        for pair in self.nodes.windows(2) {
            if pair[0].id == pair[1].id {
                violations.push(Violation::DuplicateNodeId(pair[0].id));
            }
        }

        for &(from, to) in &self.edges {
            if !self.contains(from) || !self.contains(to) {
                violations.push(Violation::DanglingEdge(from, to));
            }
        }
        if violations
            .iter()
            .any(|v| matches!(v, Violation::DanglingEdge(..) | Violation::DuplicateNodeId(..)))
        {
            // Degree and reachability checks assume a well-formed node set.
            return violations;
        }

        // Hyper-parameter domains.
        for n in &self.nodes {
            if let LayerKind::Conv { channels, kernel, stride } = n.kind {
                if !CONV_CHANNEL_CHOICES.contains(&channels) {
                    violations.push(Violation::BadHyperParameter {
                        id: n.id,
                        detail: format!("conv channels {channels} not in {CONV_CHANNEL_CHOICES:?}"),
                    });
                }
                if !CONV_KERNEL_CHOICES.contains(&kernel) {
                    violations.push(Violation::BadHyperParameter {
                        id: n.id,
                        detail: format!("conv kernel {kernel} not in {CONV_KERNEL_CHOICES:?}"),
                    });
                }
                if !CONV_STRIDE_CHOICES.contains(&stride) {
                    violations.push(Violation::BadHyperParameter {
                        id: n.id,
                        detail: format!("conv stride {stride} not in {CONV_STRIDE_CHOICES:?}"),
                    });
                }
            }
        }

        let preds_table = self.preds_table();
        let in_deg = self.in_degrees();
        let mut out_deg = vec![0u32; self.nodes.len()];
        for &(from, _) in &self.edges {
            if let Some(i) = self.index_of(from) {
                out_deg[i] += 1;
            }
        }

        // Exactly one classifier with in-degree 1, out-degree 0, fed by a
        // global pooling node.
        let classifiers: Vec<NodeId> = self
            .nodes
            .iter()
            .filter(|n| n.kind.is_classifier())
            .map(|n| n.id)
            .collect();
        match classifiers.as_slice() {
            [] => violations.push(Violation::MissingClassifier),
            [id] => {
                let id = *id;
                let i = self.index_of(id).expect("classifier exists");
                let preds = &preds_table[i];
                if preds.len() != 1 {
                    violations.push(Violation::ClassifierInDegree {
                        id,
                        found: preds.len() as u32,
                    });
                } else {
                    let pred = preds[0];
                    if !matches!(self.kind(pred), Some(LayerKind::GlobalPool)) {
                        violations.push(Violation::ClassifierPredecessor { id, pred });
                    }
                }
                if out_deg[i] != 0 {
                    violations.push(Violation::ClassifierOutDegree { id, found: out_deg[i] });
                }
                if let LayerKind::Classifier { num_classes } = self.nodes[i].kind {
                    if num_classes != self.num_classes {
                        violations.push(Violation::ClassifierClassMismatch {
                            id,
                            node: num_classes,
                            genome: self.num_classes,
                        });
                    }
                }
            }
            many => violations.push(Violation::MultipleClassifiers(many.to_vec())),
        }

        // Exactly one input node; per-kind in-degrees elsewhere.
        let mut inputs = Vec::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if n.kind.is_classifier() {
                continue; // handled above
            }
            let d = in_deg[i];
            if d == 0 {
                inputs.push(n.id);
                // The input node consumes the image, so concat cannot sit at
                // the input position.
                if n.kind.expected_in_degree() != 1 {
                    violations.push(Violation::BadInDegree {
                        id: n.id,
                        expected: n.kind.expected_in_degree(),
                        found: 0,
                    });
                }
            } else if d != n.kind.expected_in_degree() {
                violations.push(Violation::BadInDegree {
                    id: n.id,
                    expected: n.kind.expected_in_degree(),
                    found: d,
                });
            }
        }
        match inputs.len() {
            0 => violations.push(Violation::NoInputNode),
            1 => {}
            _ => violations.push(Violation::MultipleInputNodes(inputs.clone())),
        }

        // Acyclicity, then reachability and shapes (both need an order).
        if self.topological_order().is_err() {
            violations.push(Violation::CyclicGraph);
            return violations;
        }

        if let (Some(&input), Some(&head)) = (inputs.first(), classifiers.first()) {
            let from_input = self.reachable_set(input, false);
            let to_head = self.reachable_set(head, true);
            for (i, n) in self.nodes.iter().enumerate() {
                if !(from_input[i] && to_head[i]) {
                    violations.push(Violation::Unreachable(n.id));
                }
            }
        }

        if violations.is_empty() {
            if let Err(e) = self.infer_shapes() {
                violations.push(Violation::Shape(e));
            }
        }

        violations
    }

    /// Total trainable parameter count: per convolution
    /// `k*k*in_depth*channels` weights plus `channels` biases plus
    /// `2*channels` normalization parameters, and for the classifier
    /// `in_depth*num_classes + num_classes`.
    pub fn count_params(&self) -> Result<u64, ShapeError> {
        let shapes = self.infer_shapes()?;
        let mut total = 0u64;
        for n in &self.nodes {
            match n.kind {
                LayerKind::Conv { channels, kernel, .. } => {
                    let in_depth = self.node_input_depth(n.id, &shapes);
                    let c = channels as u64;
                    total += (kernel as u64).pow(2) * in_depth * c + c + 2 * c;
                }
                LayerKind::Classifier { num_classes } => {
                    let in_depth = self.node_input_depth(n.id, &shapes);
                    total += in_depth * num_classes as u64 + num_classes as u64;
                }
                _ => {}
            }
        }
        Ok(total)
    }

    fn node_input_depth(&self, id: NodeId, shapes: &ShapeMap) -> u64 {
        let preds = self.preds(id);
        if preds.is_empty() {
            self.input_shape.depth as u64
        } else {
            preds
                .iter()
                .map(|p| shapes.get(*p).map(|s| s.depth as u64).unwrap_or(0))
                .sum()
        }
    }

    /// Canonical JSON record. Deterministic: nodes sorted by id, edges
    /// sorted lexicographically, fixed field order.
    pub fn encode(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("genome serializes");
        text.push('\n');
        text
    }

    /// Parse and validate a canonical record.
    pub fn decode(text: &str) -> Result<Genome, DecodeError> {
        let genome: Genome =
            serde_json::from_str(text).map_err(|e| DecodeError::Parse(e.to_string()))?;
        let violations = genome.validate();
        if violations.is_empty() {
            Ok(genome)
        } else {
            Err(DecodeError::Invalid(violations))
        }
    }
}

fn infer_node_shape(
    id: NodeId,
    kind: LayerKind,
    inputs: &[TensorShape],
) -> Result<TensorShape, ShapeError> {
    let arity = |expected: u32| -> Result<(), ShapeError> {
        if inputs.len() == expected as usize {
            Ok(())
        } else {
            Err(ShapeError::BadArity {
                node: id,
                expected,
                found: inputs.len() as u32,
            })
        }
    };
    match kind {
        LayerKind::Conv { channels, stride, .. } => {
            arity(1)?;
            let input = inputs[0];
            Ok(TensorShape::new(
                channels,
                input.width.div_ceil(stride),
                input.height.div_ceil(stride),
            ))
        }
        LayerKind::Pool => {
            arity(1)?;
            let input = inputs[0];
            Ok(TensorShape::new(
                input.depth,
                input.width.div_ceil(2),
                input.height.div_ceil(2),
            ))
        }
        LayerKind::Concat => {
            arity(2)?;
            let (a, b) = (inputs[0], inputs[1]);
            if a.spatial() != b.spatial() {
                return Err(ShapeError::Mismatch {
                    node: id,
                    left: a,
                    right: b,
                });
            }
            Ok(TensorShape::new(a.depth + b.depth, a.width, a.height))
        }
        LayerKind::GlobalPool => {
            arity(1)?;
            Ok(TensorShape::new(inputs[0].depth, 1, 1))
        }
        LayerKind::Classifier { num_classes } => {
            arity(1)?;
            Ok(TensorShape::new(num_classes, 1, 1))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(d: u32, w: u32, h: u32) -> TensorShape {
        TensorShape::new(d, w, h)
    }

    #[test]
    fn seed_genome_is_minimal_and_valid() {
        let g = Genome::seed(shape(3, 32, 32), 10);
        assert_eq!(g.node_count(), 2);
        assert!(g.validate().is_empty());
        let shapes = g.infer_shapes().unwrap();
        assert_eq!(shapes.get(NodeId(0)), Some(shape(3, 1, 1)));
        assert_eq!(shapes.get(NodeId(1)), Some(shape(10, 1, 1)));
    }

    #[test]
    fn seed_genome_single_channel() {
        let g = Genome::seed(shape(1, 8, 8), 10);
        assert_eq!(g.node_count(), 2);
        let shapes = g.infer_shapes().unwrap();
        assert_eq!(shapes.get(NodeId(0)), Some(shape(1, 1, 1)));
    }

    #[test]
    fn seed_genome_topology_independent_of_class_count() {
        let a = Genome::seed(shape(3, 32, 32), 10);
        let b = Genome::seed(shape(3, 32, 32), 100);
        assert_eq!(a.node_count(), b.node_count());
        assert_eq!(a.edges(), b.edges());
        assert_eq!(b.kind(NodeId(1)), Some(LayerKind::Classifier { num_classes: 100 }));
    }

    #[test]
    fn conv_stride_two_halves_spatial() {
        let mut g = Genome::seed(shape(3, 32, 32), 10);
        let conv = g.add_node(LayerKind::Conv {
            channels: 32,
            kernel: 3,
            stride: 2,
        });
        g.add_edge(conv, NodeId(0));
        let shapes = g.infer_shapes().unwrap();
        assert_eq!(shapes.get(conv), Some(shape(32, 16, 16)));
    }

    #[test]
    fn concat_adds_depths() {
        // input conv(48)@8x8 and conv(16)@8x8 joined by a concat.
        let mut g = Genome::seed(shape(3, 8, 8), 10);
        let a = g.add_node(LayerKind::Conv { channels: 48, kernel: 3, stride: 1 });
        let b = g.add_node(LayerKind::Conv { channels: 16, kernel: 1, stride: 1 });
        let cat = g.add_node(LayerKind::Concat);
        g.add_edge(a, b);
        g.add_edge(a, cat);
        g.add_edge(b, cat);
        g.add_edge(cat, NodeId(0));
        let shapes = g.infer_shapes().unwrap();
        assert_eq!(shapes.get(cat), Some(shape(64, 8, 8)));
        assert!(g.validate().is_empty());
    }

    #[test]
    fn pool_uses_ceil_mode() {
        // Oracle: enumerate 2x2 stride-2 windows over a 5-cell axis; windows
        // start at 0, 2, 4, so a 5x5 input yields 3x3.
        let starts: Vec<u32> = (0..5).step_by(2).collect();
        assert_eq!(starts.len(), 3);

        let mut g = Genome::seed(shape(3, 5, 5), 10);
        let pool = g.add_node(LayerKind::Pool);
        g.add_edge(pool, NodeId(0));
        let shapes = g.infer_shapes().unwrap();
        assert_eq!(shapes.get(pool), Some(shape(3, 3, 3)));
    }

    #[test]
    fn validate_reports_concat_spatial_mismatch() {
        let mut g = Genome::seed(shape(3, 8, 8), 10);
        let a = g.add_node(LayerKind::Conv { channels: 16, kernel: 3, stride: 1 });
        let b = g.add_node(LayerKind::Conv { channels: 16, kernel: 3, stride: 2 });
        let cat = g.add_node(LayerKind::Concat);
        g.add_edge(a, b);
        g.add_edge(a, cat);
        g.add_edge(b, cat);
        g.add_edge(cat, NodeId(0));
        let violations = g.validate();
        assert!(
            violations
                .iter()
                .any(|v| matches!(v, Violation::Shape(ShapeError::Mismatch { node, .. }) if *node == cat)),
            "got {violations:?}"
        );
    }

    #[test]
    fn validate_reports_cycle() {
        let mut g = Genome::seed(shape(3, 8, 8), 10);
        let a = g.add_node(LayerKind::Conv { channels: 16, kernel: 3, stride: 1 });
        let b = g.add_node(LayerKind::Conv { channels: 16, kernel: 3, stride: 1 });
        g.add_edge(a, b);
        g.add_edge(b, a);
        g.add_edge(b, NodeId(0));
        let violations = g.validate();
        assert!(violations.contains(&Violation::CyclicGraph), "got {violations:?}");
    }

    #[test]
    fn topological_order_of_seed() {
        let g = Genome::seed(shape(3, 32, 32), 10);
        assert_eq!(g.topological_order().unwrap(), vec![NodeId(0), NodeId(1)]);
    }

    #[test]
    fn topological_order_breaks_ties_by_id() {
        // Diamond: A -> B, A -> C, B -> D, C -> D with B.id < C.id.
        let nodes = vec![
            Node { id: NodeId(0), kind: LayerKind::Conv { channels: 16, kernel: 3, stride: 1 } },
            Node { id: NodeId(1), kind: LayerKind::Conv { channels: 16, kernel: 3, stride: 1 } },
            Node { id: NodeId(2), kind: LayerKind::Conv { channels: 16, kernel: 1, stride: 1 } },
            Node { id: NodeId(3), kind: LayerKind::Concat },
        ];
        let edges = vec![
            (NodeId(0), NodeId(1)),
            (NodeId(0), NodeId(2)),
            (NodeId(1), NodeId(3)),
            (NodeId(2), NodeId(3)),
        ];
        let g = Genome::from_parts(shape(3, 8, 8), 10, nodes, edges);
        assert_eq!(
            g.topological_order().unwrap(),
            vec![NodeId(0), NodeId(1), NodeId(2), NodeId(3)]
        );
    }

    #[test]
    fn topological_order_rejects_cycle() {
        let nodes = vec![
            Node { id: NodeId(0), kind: LayerKind::Conv { channels: 16, kernel: 3, stride: 1 } },
            Node { id: NodeId(1), kind: LayerKind::Conv { channels: 16, kernel: 3, stride: 1 } },
        ];
        let edges = vec![(NodeId(0), NodeId(1)), (NodeId(1), NodeId(0))];
        let g = Genome::from_parts(shape(3, 8, 8), 10, nodes, edges);
        assert_eq!(g.topological_order(), Err(ShapeError::Cyclic));
    }

    #[test]
    fn param_count_of_seed() {
        let g = Genome::seed(shape(3, 32, 32), 10);
        assert_eq!(g.count_params().unwrap(), 40); // 3*10 + 10
    }

    #[test]
    fn param_count_with_default_conv() {
        // Oracle: independent per-layer accounting.
        // conv: 3*3*3*32 weights + 32 bias + 2*32 norm = 960
        // classifier: 32*10 + 10 = 330
        let conv_params = 3 * 3 * 3 * 32 + 32 + 2 * 32;
        let head_params = 32 * 10 + 10;
        assert_eq!(conv_params + head_params, 1290);

        let mut g = Genome::seed(shape(3, 32, 32), 10);
        let conv = g.add_node(LayerKind::Conv { channels: 32, kernel: 3, stride: 1 });
        g.add_edge(conv, NodeId(0));
        assert_eq!(g.count_params().unwrap(), 1290);
    }

    #[test]
    fn param_count_one_by_one_conv() {
        // Oracle: 1*1*16*16 + 16 + 32 = 304 for the conv itself.
        let conv_only = 16 * 16 + 16 + 32;
        assert_eq!(conv_only, 304);

        let mut g = Genome::seed(shape(16, 8, 8), 10);
        let conv = g.add_node(LayerKind::Conv { channels: 16, kernel: 1, stride: 1 });
        g.add_edge(conv, NodeId(0));
        let with_conv = g.count_params().unwrap();
        let head = 16 * 10 + 10;
        assert_eq!(with_conv, conv_only + head);
    }

    #[test]
    fn encode_decode_round_trip() {
        let g = Genome::seed(shape(3, 32, 32), 10);
        let text = g.encode();
        let back = Genome::decode(&text).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.encode(), text);
    }

    #[test]
    fn decode_rejects_missing_classifier() {
        let text = r#"{
            "input_shape": {"depth": 3, "width": 32, "height": 32},
            "num_classes": 10,
            "nodes": [{"id": 0, "kind": "global_pool"}],
            "edges": []
        }"#;
        match Genome::decode(text) {
            Err(DecodeError::Invalid(violations)) => {
                assert!(violations.contains(&Violation::MissingClassifier));
            }
            other => panic!("expected invalid record, got {other:?}"),
        }
    }

    #[test]
    fn decode_rejects_truncated_text() {
        let g = Genome::seed(shape(3, 32, 32), 10);
        let text = g.encode();
        let truncated = &text[..text.len() / 2];
        assert!(matches!(Genome::decode(truncated), Err(DecodeError::Parse(_))));
    }

    #[test]
    fn validate_reports_dangling_edge() {
        let nodes = vec![
            Node { id: NodeId(0), kind: LayerKind::GlobalPool },
            Node { id: NodeId(1), kind: LayerKind::Classifier { num_classes: 10 } },
        ];
        let edges = vec![(NodeId(0), NodeId(1)), (NodeId(5), NodeId(1))];
        let g = Genome::from_parts(shape(3, 8, 8), 10, nodes, edges);
        assert!(g
            .validate()
            .contains(&Violation::DanglingEdge(NodeId(5), NodeId(1))));
    }

    #[test]
    fn validate_reports_unreachable_branch() {
        let mut g = Genome::seed(shape(3, 8, 8), 10);
        let stray = g.add_node(LayerKind::Conv { channels: 16, kernel: 3, stride: 1 });
        g.add_edge(NodeId(0), stray); // reachable from input, dead end
        let violations = g.validate();
        assert!(violations.contains(&Violation::Unreachable(stray)), "got {violations:?}");
    }
}
