//! Generative multi-query retrieval.
//!
//! A feature generator turns a user's history and a retrieval objective into
//! `M` query vectors. Items are scored through a low-rank mapping
//! `W = U (V_dis + E_text P_trans)ᵀ` by the best of the `M` inner products,
//! and the top of `softmax(score / tau)` is retrieved either exactly or by
//! iterative sampling over a neighbor graph.

pub mod catalog;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod neighbor_index;
pub mod rng;
pub mod sampler;
pub mod scoring;
pub mod trainer;

pub use catalog::{CandidateCatalog, InteractionRecord, ItemId, ItemMetadata, ObjectiveRegistry};
pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use linalg::{Matrix, Real};
pub use neighbor_index::NeighborGraph;
pub use sampler::{Retriever, SamplerConfig};
pub use scoring::{DecomposedMapping, ItemMode, QueryBlock};
pub use trainer::{TrainConfig, UrmModel};
