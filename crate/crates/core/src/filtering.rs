//! Multi-scale bilateral normal filtering and per-point canonical frames.

use log::debug;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{cloud_extent_points, sym_eigen3, Mat3, NormalField, PointCloud, Vec3};
use crate::spatial::SpatialIndex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterParams {
    /// Spatial deviations as fractions of the cloud extent.
    pub spatial: Vec<f64>,
    /// Range deviations (distance between unit normals).
    pub range: Vec<f64>,
    /// Neighborhood radius in units of the spatial deviation.
    pub radius_factor: f64,
    /// Append the unfiltered input normal as the last branch.
    pub include_unfiltered: bool,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            spatial: vec![0.025, 0.05],
            range: vec![0.1, 0.2, 0.35, 0.5],
            radius_factor: 2.0,
            include_unfiltered: true,
        }
    }
}

impl FilterParams {
    /// Number of normals per point (one per filter pair, plus the input).
    pub fn branch_count(&self) -> usize {
        self.spatial.len() * self.range.len() + usize::from(self.include_unfiltered)
    }

    pub fn validate(&self) -> Result<()> {
        if self.spatial.iter().chain(&self.range).any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidParams("filter deviations must be positive".into()));
        }
        if !(self.radius_factor > 0.0) {
            return Err(Error::InvalidParams("filter radius factor must be positive".into()));
        }
        if self.branch_count() == 0 {
            return Err(Error::InvalidParams("filter produces no branches".into()));
        }
        Ok(())
    }
}

fn gaussian(x: f64, sigma: f64) -> f64 {
    (-x * x / (2.0 * sigma * sigma)).exp()
}

/// One bilateral pass over a ball of radius `radius_factor · sigma_s`.
///
/// Neighbor normals are sign-aligned with the center normal before weighting,
/// so unoriented input fields do not cancel out. A vanishing weighted sum keeps
/// the input normal.
pub fn bilateral_filter(
    cloud: &PointCloud,
    index: &SpatialIndex,
    normals: &NormalField,
    sigma_s: f64,
    sigma_r: f64,
) -> Result<NormalField> {
    bilateral_with_radius(cloud, index, normals, sigma_s, sigma_r, 2.0 * sigma_s)
}

fn bilateral_with_radius(
    cloud: &PointCloud,
    index: &SpatialIndex,
    normals: &NormalField,
    sigma_s: f64,
    sigma_r: f64,
    radius: f64,
) -> Result<NormalField> {
    if !(sigma_s > 0.0 && sigma_r > 0.0) {
        return Err(Error::InvalidParams("bilateral deviations must be positive".into()));
    }
    if normals.len() != cloud.len() {
        return Err(Error::LengthMismatch { left: cloud.len(), right: normals.len() });
    }
    let points = cloud.points();
    let out = (0..points.len())
        .into_par_iter()
        .map(|i| {
            let (p_i, n_i) = (points[i], normals[i]);
            let mut sum = Vec3::zeros();
            for j in index.ball(&p_i, radius) {
                let n_j = if n_i.dot(&normals[j]) < 0.0 { -normals[j] } else { normals[j] };
                let w = gaussian((p_i - points[j]).norm(), sigma_s) * gaussian((n_i - n_j).norm(), sigma_r);
                sum += n_j * w;
            }
            let norm = sum.norm();
            if norm > 0.0 && norm.is_finite() {
                sum / norm
            } else {
                n_i
            }
        })
        .collect();
    Ok(NormalField(out))
}

/// `X` normals per point, ordered (spatial outer, range inner, unfiltered last).
pub fn multi_scale_filter(
    cloud: &PointCloud,
    index: &SpatialIndex,
    initial: &NormalField,
    params: &FilterParams,
) -> Result<Vec<Vec<Vec3>>> {
    params.validate()?;
    let diag = cloud_extent_points(cloud.points());
    let mut fields = Vec::with_capacity(params.branch_count());
    for &frac in &params.spatial {
        let sigma_s = frac * diag;
        for &sigma_r in &params.range {
            fields.push(bilateral_with_radius(cloud, index, initial, sigma_s, sigma_r, params.radius_factor * sigma_s)?);
        }
    }
    if params.include_unfiltered {
        fields.push(initial.clone());
    }
    Ok((0..cloud.len()).map(|i| fields.iter().map(|f| f[i]).collect()).collect())
}

/// Canonicalized normal set of one point.
#[derive(Debug, Clone, PartialEq)]
pub struct Reoriented {
    /// Normals in the eigenbasis, each flipped to nonnegative z.
    pub normals: Vec<Vec3>,
    /// Columns are the normal-tensor eigenvectors, eigenvalues ascending.
    pub rotation: Mat3,
}

impl Reoriented {
    /// World vector to canonical coordinates.
    pub fn to_local(&self, v: &Vec3) -> Vec3 {
        self.rotation.transpose() * v
    }

    /// Canonical coordinates back to world.
    pub fn to_world(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// Flattened canonical normals, the clustering feature.
    pub fn feature(&self) -> Vec<f64> {
        self.normals.iter().flat_map(|n| [n.x, n.y, n.z]).collect()
    }
}

fn odd_moment(axis: &Vec3, vs: &[Vec3]) -> f64 {
    vs.iter().map(|v| axis.dot(v).powi(3)).sum()
}

/// Eigenbasis of the normal tensor `Σ n nᵀ` with deterministic signs.
///
/// The dominant axis points along `up` when given (falling back to the normals'
/// third moment), and the two minor axes are signed by the third moment of the
/// normals aligned with the dominant axis. Every choice is invariant under
/// rotating both inputs, and the result does not change if all normals flip.
pub fn normal_frame(raw: &[Vec3], up: Option<&Vec3>) -> Result<Mat3> {
    if raw.is_empty() || raw.iter().all(|n| n.norm_squared() == 0.0) {
        return Err(Error::InvalidParams("reorient needs at least one nonzero normal".into()));
    }
    let tensor = raw.iter().fold(Mat3::zeros(), |acc, n| acc + n * n.transpose());
    let (values, mut vecs) = sym_eigen3(&tensor);
    if values[2] - values[1] <= 1e-12 * values[2].abs().max(1.0) {
        debug!("normal tensor has a repeated dominant eigenvalue; using solver order");
    }
    let scale = raw.len() as f64 * 1e-12;
    let mut e3: Vec3 = vecs.column(2).into_owned();
    let up_sign = up.map(|u| e3.dot(u)).filter(|s| s.abs() > 1e-12 * up.unwrap().norm().max(1e-300));
    let s3 = up_sign.unwrap_or_else(|| odd_moment(&e3, raw));
    if s3 < 0.0 {
        e3 = -e3;
    }
    let aligned: Vec<Vec3> = raw.iter().map(|n| if n.dot(&e3) < 0.0 { -n } else { *n }).collect();
    vecs.set_column(2, &e3);
    for k in 0..2 {
        let e: Vec3 = vecs.column(k).into_owned();
        let mut s = odd_moment(&e, &aligned);
        if s.abs() <= scale {
            s = aligned.iter().map(|n| e.dot(n)).sum();
        }
        if s < 0.0 {
            vecs.set_column(k, &-e);
        }
    }
    Ok(vecs)
}

/// Rotates a normal set into its tensor eigenbasis (dominant axis on +z) and
/// flips each normal to nonnegative z.
pub fn reorient(raw: &[Vec3]) -> Result<Reoriented> {
    let rotation = normal_frame(raw, None)?;
    Ok(reorient_in_frame(raw, rotation))
}

pub(crate) fn reorient_in_frame(raw: &[Vec3], rotation: Mat3) -> Reoriented {
    let rt = rotation.transpose();
    let normals = raw
        .iter()
        .map(|n| {
            let v = rt * n;
            if v.z < 0.0 {
                -v
            } else {
                v
            }
        })
        .collect();
    Reoriented { normals, rotation }
}

/// Rotates a world vector into the frame and matches the z sign convention.
pub fn canonicalize(frame: &Reoriented, v: &Vec3) -> Vec3 {
    let c = frame.to_local(v);
    if c.z < 0.0 {
        -c
    } else {
        c
    }
}
