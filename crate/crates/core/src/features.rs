//! Per-point network inputs: canonical local patches and height maps.

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filtering::{multi_scale_filter, normal_frame, reorient_in_frame, FilterParams, Reoriented};
use crate::geometry::{cloud_extent_points, Mat3, NormalField, PointCloud, Vec3};
use crate::spatial::SpatialIndex;
use crate::substream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureParams {
    /// Patch radius as a fraction of the cloud extent.
    pub patch_radius_frac: f64,
    pub max_pts: usize,
    /// Height-map resolution (odd).
    pub m: usize,
    /// Bin weight bandwidth in model units; defaults to the bin spacing.
    pub sigma_d: Option<f64>,
    /// Bin ball radius in model units; defaults to 1.5 bin spacings.
    pub ball_r: Option<f64>,
}

impl Default for FeatureParams {
    fn default() -> Self {
        Self { patch_radius_frac: 0.05, max_pts: 300, m: 7, sigma_d: None, ball_r: None }
    }
}

impl FeatureParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.patch_radius_frac > 0.0) {
            return Err(Error::InvalidParams("patch_radius_frac must be positive".into()));
        }
        if self.m < 3 || self.m % 2 == 0 {
            return Err(Error::InvalidParams(format!("height-map size must be odd and at least 3, got {}", self.m)));
        }
        if self.max_pts < 8 {
            return Err(Error::InvalidParams(format!("max_pts must be at least 8, got {}", self.max_pts)));
        }
        if self.sigma_d.is_some_and(|s| !(s > 0.0)) || self.ball_r.is_some_and(|r| !(r > 0.0)) {
            return Err(Error::InvalidParams("height-map bandwidths must be positive".into()));
        }
        Ok(())
    }

    fn resolve(&self, diag: f64) -> Scales {
        let radius = self.patch_radius_frac * diag;
        let spacing = 2.0 * radius / self.m as f64;
        Scales {
            radius,
            spacing,
            sigma_d: self.sigma_d.unwrap_or(spacing),
            ball_r: self.ball_r.unwrap_or(1.5 * spacing),
        }
    }
}

/// Physical sizes for one cloud.
#[derive(Debug, Clone, Copy)]
struct Scales {
    radius: f64,
    spacing: f64,
    sigma_d: f64,
    ball_r: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalPatch {
    /// `max_pts` rows; rows past `valid_count` are zero.
    pub coords: Vec<Vec3>,
    pub valid_count: usize,
}

impl LocalPatch {
    /// Row-major `(max_pts, 3)` values.
    pub fn flat(&self) -> Vec<f64> {
        self.coords.iter().flat_map(|c| [c.x, c.y, c.z]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HmpGrid {
    pub m: usize,
    /// Row-major: row is the Y bin, column the X bin.
    pub values: Vec<f64>,
}

impl HmpGrid {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.m + col]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.values.chunks(self.m) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.9e}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

fn patch_from_members(points: &[Vec3], i: usize, members: &[usize], rotation: &Mat3, radius: f64, max_pts: usize, seed: u64) -> LocalPatch {
    let center = points[i];
    let others: Vec<usize> = members.iter().copied().filter(|&j| j != i).collect();
    let mut chosen = vec![i];
    if others.len() + 1 > max_pts {
        let mut rng = substream(seed, i as u64);
        let mut picks: Vec<usize> = sample(&mut rng, others.len(), max_pts - 1).into_iter().map(|k| others[k]).collect();
        picks.sort_unstable();
        chosen.extend(picks);
    } else {
        chosen.extend(others);
    }
    let rt = rotation.transpose();
    let mut coords: Vec<Vec3> = chosen.iter().map(|&j| rt * (points[j] - center) / radius).collect();
    let valid_count = coords.len();
    coords.resize(max_pts, Vec3::zeros());
    LocalPatch { coords, valid_count }
}

/// Ball patch around point `i`, centered, expressed in the frame `rotation`
/// (coordinates `Rᵀ(p − p_i)`) and scaled by the patch radius.
///
/// The center is always kept; when the ball holds more than `max_pts` points the
/// rest are down-sampled with a stream derived from `(seed, i)`.
pub fn extract_patch(cloud: &PointCloud, index: &SpatialIndex, i: usize, rotation: &Mat3, params: &FeatureParams, seed: u64) -> LocalPatch {
    let points = cloud.points();
    let s = params.resolve(cloud_extent_points(points));
    let members = index.ball(&points[i], s.radius);
    patch_from_members(points, i, &members, rotation, s.radius, params.max_pts, seed)
}

/// In-plane grid axes for `n_t`, tied to the point frame so that neighboring
/// branches share orientation.
fn grid_axes(n_t: &Vec3, rotation: &Mat3) -> (Vec3, Vec3, Vec3) {
    let e3: Vec3 = rotation.column(2).into_owned();
    let n = if n_t.dot(&e3) < 0.0 { -n_t } else { *n_t };
    let mut x_axis = Vec3::zeros();
    for k in 0..2 {
        let e: Vec3 = rotation.column(k).into_owned();
        let t = e - n * n.dot(&e);
        if t.norm() > 1e-6 {
            x_axis = t.normalize();
            break;
        }
    }
    let y_axis = n.cross(&x_axis);
    (n, x_axis, y_axis)
}

fn bin_center(p: &Vec3, x_axis: &Vec3, y_axis: &Vec3, row: usize, col: usize, s: &Scales, m: usize) -> Vec3 {
    let half = (m - 1) as f64 / 2.0;
    p + x_axis * ((col as f64 - half) * s.spacing) + y_axis * ((row as f64 - half) * s.spacing)
}

fn bin_value(points: &[Vec3], near: impl Iterator<Item = usize>, b: &Vec3, p: &Vec3, n: &Vec3, s: &Scales) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for k in near {
        let w = (-(b - points[k]).norm_squared() / (s.sigma_d * s.sigma_d)).exp();
        num += w * n.dot(&(points[k] - p));
        den += w;
    }
    if den > 0.0 {
        num / den / s.radius
    } else {
        0.0
    }
}

fn hmp_with(points: &[Vec3], index: &SpatialIndex, i: usize, n_t: &Vec3, rotation: &Mat3, s: &Scales, m: usize) -> HmpGrid {
    let p = points[i];
    let (n, x_axis, y_axis) = grid_axes(n_t, rotation);
    let mut values = Vec::with_capacity(m * m);
    for row in 0..m {
        for col in 0..m {
            let b = bin_center(&p, &x_axis, &y_axis, row, col, s, m);
            values.push(bin_value(points, index.ball(&b, s.ball_r).into_iter(), &b, &p, &n, s));
        }
    }
    HmpGrid { m, values }
}

/// Height map of point `i` over the tangent plane of `n_t`.
///
/// Each bin averages the signed heights `n·(p_k − p_i)` of the points within
/// `ball_r` of the bin center with weights `exp(−‖b − p_k‖²/σ_d²)`, divided by
/// the patch radius. `n` is `n_t` flipped toward the frame's third axis; the
/// grid X axis is the frame's first axis projected onto the plane.
pub fn build_hmp(cloud: &PointCloud, index: &SpatialIndex, i: usize, n_t: &Vec3, rotation: &Mat3, params: &FeatureParams) -> HmpGrid {
    let points = cloud.points();
    let s = params.resolve(cloud_extent_points(points));
    hmp_with(points, index, i, n_t, rotation, &s, params.m)
}

/// All network inputs of one point.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchInput {
    /// Canonical normals (one per branch) and the point frame.
    pub frame: Reoriented,
    pub patch: LocalPatch,
    /// One height map per branch, in branch order.
    pub hmps: Vec<HmpGrid>,
}

/// Filters, canonicalizes and builds patch and height maps for every point.
///
/// The frame's dominant axis is signed by the patch centroid offset, which
/// makes the inputs invariant under rigid motions of cloud and normals.
pub fn build_branch_inputs(
    cloud: &PointCloud,
    index: &SpatialIndex,
    initial: &NormalField,
    filter: &FilterParams,
    params: &FeatureParams,
    seed: u64,
) -> Result<Vec<BranchInput>> {
    params.validate()?;
    initial.check_unit(1e-6)?;
    let sets = multi_scale_filter(cloud, index, initial, filter)?;
    let points = cloud.points();
    let s = params.resolve(cloud_extent_points(points));
    sets.into_par_iter()
        .enumerate()
        .map(|(i, raw)| {
            let members = index.ball(&points[i], s.radius);
            let up: Vec3 = members.iter().map(|&j| points[j] - points[i]).sum();
            let rotation = normal_frame(&raw, Some(&up))?;
            let patch = patch_from_members(points, i, &members, &rotation, s.radius, params.max_pts, seed);
            let hmps = raw.iter().map(|n| hmp_with(points, index, i, n, &rotation, &s, params.m)).collect();
            Ok(BranchInput { frame: reorient_in_frame(&raw, rotation), patch, hmps })
        })
        .collect()
}
