//! Within-triplet Bayesian debiasing of scene-graph relationship predictions.
//!
//! A learned prior over `(subject, relationship, object)` triplets is combined
//! with soft evidence from an upstream measurement model. Each triplet is
//! decoded by MAP inference, entity-label conflicts between triplets that
//! share an entity are resolved, and the result is scored with
//! graph-constrained recall metrics.
//!
//! The probability types are generic over [`Real`] (`f32` or `f64`); the
//! `*F64` / `*F32` aliases below fix the scalar for callers that don't care.

// `!(x > 0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod error;
pub mod graph;
pub mod inference;
pub mod metrics;
pub mod prior;
pub mod scalar;

pub use augment::{augment_counts, cosine_distance, epsilon_neighborhood, render_triplet};
pub use augment::{AugmentationConfig, EmbeddingTable};
pub use error::{Error, Result};
pub use graph::{iou, load_vocabulary, BoundingBox, Vocabulary};
pub use graph::{DebiasedGraph, GroundTruthGraph, MeasurementGraph, ScoredTriplet};
pub use inference::TripletEvidence;
pub use inference::{debias_graph, posterior_joint, relationship_entropy, wti_map};
pub use inference::{measurement_baseline, mode_update, object_update, relationship_update};
pub use inference::{ConflictStrategy, InferenceConfig, MapEstimate, PosteriorTable, TaskMode};
pub use metrics::{apply_graph_constraint, evaluate, match_triplets, mean_of_defined};
pub use metrics::{EvalConfig, EvalReport, Evaluator, RecallAtK};
pub use prior::{accumulate_counts, estimate_prior, PriorConfig, PriorModel, Triplet, TripletCounts};
pub use scalar::Real;

/// Version of the on-disk record formats written by this crate.
pub const FORMAT_VERSION: u32 = 1;

pub type BoundingBoxF64 = BoundingBox<f64>;
pub type BoundingBoxF32 = BoundingBox<f32>;
pub type MeasurementGraphF64 = MeasurementGraph<f64>;
pub type MeasurementGraphF32 = MeasurementGraph<f32>;
pub type GroundTruthGraphF64 = GroundTruthGraph<f64>;
pub type GroundTruthGraphF32 = GroundTruthGraph<f32>;
pub type DebiasedGraphF64 = DebiasedGraph<f64>;
pub type DebiasedGraphF32 = DebiasedGraph<f32>;
pub type PriorModelF64 = PriorModel<f64>;
pub type PriorModelF32 = PriorModel<f32>;
pub type PosteriorTableF64 = PosteriorTable<f64>;
pub type PosteriorTableF32 = PosteriorTable<f32>;
pub type EmbeddingTableF64 = EmbeddingTable<f64>;
pub type EmbeddingTableF32 = EmbeddingTable<f32>;
pub type InferenceConfigF64 = InferenceConfig<f64>;
pub type InferenceConfigF32 = InferenceConfig<f32>;
