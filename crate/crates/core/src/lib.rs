//! Evolutionary neural-architecture search over acyclic layer graphs.
//!
//! The engine evolves a population of small convolutional architectures
//! ("genomes") through a two-stage rapid succession: a primary stage with a
//! large mutation step-size for coarse exploration, then a secondary stage
//! with a small step-size for fine-grained search. Weak individuals are
//! extinguished early at landmark training iterations using monotone fitness
//! thresholds, inferior networks can mimic a superior teacher through a
//! distillation loss, and the best survivor's learned blocks can be
//! duplicated to grow deeper candidates.
//!
//! Fitness evaluation is pluggable: a deterministic surrogate landscape for
//! testing the evolutionary machinery, a built-in minimal trainer for
//! desk-scale datasets, or an external worker process speaking a
//! line-delimited JSON protocol.

pub mod evaluation;
pub mod extinction;
pub mod genome;
pub mod lineage;
pub mod mutation;
pub mod rng;
pub mod succession;

pub use genome::{Genome, LayerKind, NodeId, ShapeMap, TensorShape};
pub use succession::{EvolutionResult, Individual, Phase, SuccessionConfig};
