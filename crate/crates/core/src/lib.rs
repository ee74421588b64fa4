//! Knowledge-graph comprehension embeddings fused into a LightGCN
//! recommender.
//!
//! The pipeline runs in stages: interaction data is filtered and split
//! ([`data`]), each item's knowledge-graph neighborhood is rendered to text
//! ([`kg_text`]) and embedded once into a frozen table ([`embed`]), a
//! semantic item-item graph is built from those vectors ([`item_graph`]),
//! and the recommender ([`model`]) is trained with BPR ([`trainer`]) and
//! scored by full ranking ([`eval`]). [`pipeline`] wires the stages to a
//! work directory for the `colakg` binary.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`).

pub mod config;
pub mod data;
pub mod embed;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod item_graph;
pub mod kg;
pub mod kg_text;
pub mod matrix;
pub mod model;
pub mod pipeline;
pub mod scalar;
pub mod synthetic;
pub mod trainer;

pub use config::PipelineConfig;
pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix32 = matrix::Matrix<f32>;
pub type Matrix64 = matrix::Matrix<f64>;
pub type ModelState32 = model::ModelState<f32>;
pub type ModelState64 = model::ModelState<f64>;
pub type TrainOutcome32 = trainer::TrainOutcome<f32>;
pub type TrainOutcome64 = trainer::TrainOutcome<f64>;
