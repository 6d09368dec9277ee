//! Point-cloud normal estimation.
//!
//! The pipeline runs in three stages:
//!
//! 1. [`mfps`] computes initial normals with multi-scale fitting patch
//!    selection (PCA on smooth regions, robust plane fitting near edges).
//! 2. [`filtering`] and [`features`] expand each initial normal into a bundle of
//!    bilateral-filtered normals, a canonicalized local patch and height maps.
//! 3. [`refine`] trains and runs a per-cluster refinement network built on the
//!    small reverse-mode engine in [`nn`].
//!
//! [`denoise`] moves points under the guidance of estimated normals and
//! [`metrics`] scores normal fields against ground truth.

pub mod cluster;
pub mod config;
pub mod denoise;
pub mod error;
pub mod features;
pub mod filtering;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod mfps;
pub mod nn;
pub mod refine;
pub mod spatial;
pub mod synth;

pub use error::{Error, Result};
pub use geometry::{bbox_diagonal, classify_points, cloud_extent, pca_normal, Mat3, NormalField, PointClass, PointCloud, Vec3};
pub use spatial::{build_index, SpatialIndex};

/// Seeded random stream for a given purpose and item.
///
/// Streams depend only on `(seed, stream)`, never on scheduling, so parallel
/// maps produce identical results for any thread count.
pub fn substream(seed: u64, stream: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
