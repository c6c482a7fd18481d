//! Neural operator surrogates for steady 3D flow fields on voxel grids.
//!
//! The crate covers the full pipeline: shape-catalog generation and signed
//! distance field voxelization, a minimal reverse-mode autodiff tape, the
//! DeepONet / Geometric-DeepONet architectures, trilinear element-center
//! postprocessing with Gauss-quadrature continuity residuals, the
//! derivative-informed loss family L1-L4, the evaluation metrics M1-M4,
//! dataset I/O in the NPY/NPZ layout, and the Adam training loop.

pub mod autodiff;
pub mod fem;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod operators;
pub mod train;
pub mod data;
pub mod error;
pub mod voxel;

pub use data::{DataSample, Dataset, Split, SplitKind, SplitSpec};
pub use error::{Error, Result};
pub use fem::{ElementField, NodalField};
pub use losses::{LossId, LossWeights};
pub use metrics::{MetricsReport, Provenance, UnifiedWeights};
pub use operators::{Checkpoint, ModelParams, OperatorConfig, Variant};
pub use train::{TrainConfig, TrainHistory};
pub use voxel::{node_position, SdfField, VoxelGrid, DOMAIN_SIZE};
