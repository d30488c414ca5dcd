//! Topology-adaptive mesh reconstruction.
//!
//! A genus-0 template is deformed towards a target shape, faces with a high
//! predicted reconstruction error are pruned, and the open boundaries left
//! behind are smoothed. Everything trainable is built on the reverse-mode
//! differentiation core in [`autodiff`].

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod eval;
pub mod geom;
pub mod gradsuite;
pub mod losses;
pub mod mesh;
pub mod networks;
pub mod pipeline;
pub mod spatial;

use thiserror::Error;

pub use autodiff::{AdError, Checkpoint, MlpParams, Tape, Tensor, Value};
pub use geom::Point3;
pub use losses::{LossWeights, MeshVar};
pub use mesh::{BoundaryLoop, BoundaryLoops, Mesh, MeshError, PointCloud};
pub use networks::{PerFaceError, ShapeFeature};
pub use pipeline::{Model, StageConfig, StageId, TrainConfig};

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("point cloud lacks `{0}`")]
    MissingAttribute(&'static str),
    #[error("{what}: expected length {expected}, got {got}")]
    Length {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("mesh has no interior edges")]
    NoInteriorEdges,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("stage {stage} removed every face")]
    StageFailure {
        stage: usize,
        /// The last mesh produced before the failing stage.
        last_valid: Box<Mesh>,
    },
    #[error("stage `{stage}` must be trained before `{requested}`")]
    StageOrder {
        requested: &'static str,
        stage: &'static str,
    },
    #[error("non-finite loss in `{stage}` at step {step}")]
    NonFiniteLoss { stage: &'static str, step: usize },
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
