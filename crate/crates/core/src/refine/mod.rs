//! The refinement network.
//!
//! Each point's filtered normals, patch and height maps (see
//! [`crate::features`]) pass through a point module and a height-map module.
//! Their outputs become matrices that act on every canonical normal, and the
//! per-branch features feed an output head that predicts the refined normal.
//! Training clusters the samples by their canonical normals and fits one
//! network per cluster.

mod arch;
mod model;
mod train;

pub use arch::{connection_apply, loss_terms, ArchSpec, Batch, ConnectionKind, HmpStage, LossKind, Network};
pub use model::{predict_local, predict_normal, predict_normals, refine_field, RefineModel, MODEL_VERSION};
pub use train::{make_samples, train, TrainLog, TrainParams, TrainSample};
