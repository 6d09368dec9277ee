//! Normal-guided point updating.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{cloud_extent_points, NormalField, PointCloud, Vec3};
use crate::spatial::SpatialIndex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiseParams {
    /// Weight of the neighbor-normal projector.
    pub lambda: f64,
    pub iterations: usize,
    /// Bandwidth on the distance between unit normals.
    pub sigma: f64,
    /// Neighborhood radius as a fraction of the cloud extent.
    pub radius_frac: f64,
}

impl Default for DenoiseParams {
    fn default() -> Self {
        Self { lambda: 0.5, iterations: 20, sigma: 0.3, radius_frac: 0.03 }
    }
}

impl DenoiseParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.sigma > 0.0) || !(self.radius_frac > 0.0) {
            return Err(Error::InvalidParams("denoise needs lambda >= 0 and positive sigma and radius".into()));
        }
        Ok(())
    }
}

/// Frozen neighbor lists (self excluded) from the input positions.
pub fn denoise_neighborhoods(cloud: &PointCloud, params: &DenoiseParams) -> Vec<Vec<usize>> {
    let points = cloud.points();
    let index = SpatialIndex::build(points);
    let radius = params.radius_frac * cloud_extent_points(points);
    (0..points.len())
        .into_par_iter()
        .map(|i| index.ball(&points[i], radius).into_iter().filter(|&j| j != i).collect())
        .collect()
}

/// Moves each point along its own and its neighbors' normal directions:
///
/// `p_i ← p_i + γ_i Σ_j (w_ij n_i n_iᵀ + λ n_j n_jᵀ)(p_j − p_i)`,
/// `w_ij = exp(−‖n_i − n_j‖²/σ²)`, `γ_i = 1/(3|N_i|)`.
///
/// Neighborhoods are fixed from the input; each iteration reads only the
/// previous iterate.
pub fn point_update(cloud: &PointCloud, normals: &NormalField, params: &DenoiseParams) -> Result<PointCloud> {
    params.validate()?;
    if normals.len() != cloud.len() {
        return Err(Error::LengthMismatch { left: cloud.len(), right: normals.len() });
    }
    let neighborhoods = denoise_neighborhoods(cloud, params);
    let mut points = cloud.points().to_vec();
    for _ in 0..params.iterations {
        points = step(&points, normals, &neighborhoods, params);
    }
    PointCloud::with_normals(cloud.name(), points, cloud.gt_normals().map(<[Vec3]>::to_vec))
}

fn step(points: &[Vec3], normals: &NormalField, neighborhoods: &[Vec<usize>], params: &DenoiseParams) -> Vec<Vec3> {
    (0..points.len())
        .into_par_iter()
        .map(|i| {
            let nb = &neighborhoods[i];
            if nb.is_empty() {
                return points[i];
            }
            let n_i = normals[i];
            let mut delta = Vec3::zeros();
            for &j in nb {
                let n_j = normals[j];
                let d = points[j] - points[i];
                let w = (-(n_i - n_j).norm_squared() / (params.sigma * params.sigma)).exp();
                delta += n_i * (w * n_i.dot(&d)) + n_j * (params.lambda * n_j.dot(&d));
            }
            points[i] + delta / (3.0 * nb.len() as f64)
        })
        .collect()
}
