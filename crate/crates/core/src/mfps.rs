//! Multi-scale fitting patch selection.
//!
//! Smooth points get plain PCA normals. For each point near a sharp feature,
//! every multi-scale k-NN patch that contains it is a candidate; each patch is
//! fitted with a robust sampled plane and scored by plane consistency weighted
//! toward larger scales. A greedy pass keeps mutually distinct ("anisotropic")
//! patch normals and the final choice is the plane the point itself lies on.

use log::{debug, warn};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{classify_points, pca_normal_points, unoriented_angle, NormalField, PointClass, PointCloud, Vec3};
use crate::spatial::SpatialIndex;
use crate::substream;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub normal: Vec3,
    pub point: Vec3,
}

impl Plane {
    pub fn through(a: &Vec3, b: &Vec3, c: &Vec3) -> Option<Self> {
        let u = b - a;
        let v = c - a;
        let cross = u.cross(&v);
        let norm = cross.norm();
        if !(norm > 1e-12 * u.norm() * v.norm()) {
            return None;
        }
        Some(Self { normal: cross / norm, point: *a })
    }

    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        self.normal.dot(&(p - self.point))
    }

    pub fn project(&self, p: &Vec3) -> Vec3 {
        p - self.normal * self.signed_distance(p)
    }
}

/// Residual bandwidth used by the plane energy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// `factor` times the distance from the patch center to its farthest member.
    DensityScaled { factor: f64 },
    /// One bandwidth in model units for every patch.
    Global { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MfpsParams {
    /// Patch sizes in neighbor counts, strictly increasing.
    pub scales: Vec<usize>,
    pub beta: f64,
    pub sigma: Bandwidth,
    pub plane_samples: usize,
    /// Anisotropy threshold in degrees.
    pub w_t: f64,
    pub orient_k: usize,
    pub classify_k: usize,
    pub classify_tau: f64,
}

impl Default for MfpsParams {
    fn default() -> Self {
        Self {
            scales: vec![50, 100, 150],
            beta: 0.9,
            sigma: Bandwidth::DensityScaled { factor: 0.3 },
            plane_samples: 100,
            w_t: 60.0,
            orient_k: 50,
            classify_k: 100,
            classify_tau: 0.05,
        }
    }
}

impl MfpsParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParams(format!("mfps: {m}")));
        if self.scales.is_empty() || self.scales[0] < 3 {
            return bad("scales must be non-empty and at least 3");
        }
        if self.scales.windows(2).any(|w| w[0] >= w[1]) {
            return bad("scales must be strictly increasing");
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return bad("beta must lie in (0, 1]");
        }
        match self.sigma {
            Bandwidth::DensityScaled { factor } if !(factor > 0.0) => return bad("sigma factor must be positive"),
            Bandwidth::Global { value } if !(value > 0.0) => return bad("sigma must be positive"),
            _ => {}
        }
        if self.plane_samples == 0 {
            return bad("plane_samples must be at least 1");
        }
        if !(self.w_t > 0.0 && self.w_t < 180.0) {
            return bad("w_t must lie in (0, 180)");
        }
        if self.orient_k == 0 || self.classify_k < 3 {
            return bad("orient_k must be positive and classify_k at least 3");
        }
        if !(self.classify_tau > 0.0 && self.classify_tau <= 1.0) {
            return bad("classify_tau must lie in (0, 1]");
        }
        Ok(())
    }

    fn k_min(&self) -> usize {
        self.scales[0]
    }

    fn k_max(&self) -> usize {
        *self.scales.last().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitPatch {
    pub center: usize,
    pub scale: usize,
    pub members: Vec<usize>,
    pub plane: Plane,
    pub energy: f64,
    pub score: f64,
}

/// Mean Gaussian residual weight `exp(-r²/σ²)` of the members w.r.t. `plane`.
pub fn plane_energy(points: &[Vec3], members: &[usize], plane: &Plane, sigma: f64) -> f64 {
    let inv = 1.0 / (sigma * sigma);
    let sum: f64 = members
        .iter()
        .map(|&m| {
            let r = plane.signed_distance(&points[m]);
            (-r * r * inv).exp()
        })
        .sum();
    sum / members.len() as f64
}

/// Best of `samples` planes through random non-collinear member triples.
pub fn fit_patch_plane<R: Rng>(
    cloud: &PointCloud,
    members: &[usize],
    sigma: f64,
    samples: usize,
    rng: &mut R,
) -> Result<(Plane, f64)> {
    fit_plane_traced(cloud.points(), members, sigma, samples, rng, |_, _| {})
}

pub(crate) fn fit_plane_traced<R: Rng>(
    points: &[Vec3],
    members: &[usize],
    sigma: f64,
    samples: usize,
    rng: &mut R,
    mut on_candidate: impl FnMut(&Plane, f64),
) -> Result<(Plane, f64)> {
    let n = members.len();
    if n < 3 {
        return Err(Error::DegeneratePatch { samples: 0 });
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidParams(format!("plane bandwidth must be positive, got {sigma}")));
    }
    let mut best: Option<(Plane, f64)> = None;
    for _ in 0..samples {
        let a = rng.random_range(0..n);
        let mut b = rng.random_range(0..n - 1);
        if b >= a {
            b += 1;
        }
        let mut c = rng.random_range(0..n - 2);
        for taken in [a.min(b), a.max(b)] {
            if c >= taken {
                c += 1;
            }
        }
        let Some(plane) = Plane::through(&points[members[a]], &points[members[b]], &points[members[c]]) else {
            continue;
        };
        let energy = plane_energy(points, members, &plane, sigma);
        on_candidate(&plane, energy);
        if best.is_none_or(|(_, e)| energy > e) {
            best = Some((plane, energy));
        }
    }
    best.ok_or(Error::DegeneratePatch { samples })
}

/// Scale preference η(k): β at the smallest scale rising linearly to 1 at the
/// largest. A single-scale set has η = 1.
pub fn scale_weight(scale: usize, params: &MfpsParams) -> f64 {
    let (lo, hi) = (params.k_min(), params.k_max());
    if hi == lo {
        return 1.0;
    }
    params.beta + (1.0 - params.beta) * (scale as f64 - lo as f64) / (hi as f64 - lo as f64)
}

/// Patch consistency: energy times the scale preference.
pub fn patch_score(energy: f64, scale: usize, params: &MfpsParams) -> f64 {
    energy * scale_weight(scale, params)
}

fn patch_bandwidth(params: &MfpsParams, farthest_d2: f64) -> f64 {
    match params.sigma {
        Bandwidth::DensityScaled { factor } => factor * farthest_d2.sqrt(),
        Bandwidth::Global { value } => value,
    }
}

/// Fits every (point, scale) patch whose center passes `wanted`.
fn build_pool_filtered(
    points: &[Vec3],
    index: &SpatialIndex,
    params: &MfpsParams,
    seed: u64,
    wanted: impl Fn(&[usize]) -> bool + Sync,
) -> Vec<FitPatch> {
    let n_scales = params.scales.len();
    let k_max = params.k_max();
    (0..points.len())
        .into_par_iter()
        .flat_map_iter(|j| {
            let nn = index.knn_with_dist2(&points[j], k_max);
            let mut out = Vec::with_capacity(n_scales);
            for (t, &scale) in params.scales.iter().enumerate() {
                if scale > nn.len() {
                    debug!("patch ({j}, {scale}) skipped: cloud has only {} points", nn.len());
                    continue;
                }
                let members: Vec<usize> = nn[..scale].iter().map(|&(i, _)| i).collect();
                if !wanted(&members) {
                    continue;
                }
                let sigma = patch_bandwidth(params, nn[scale - 1].1);
                let mut rng = substream(seed, (j * n_scales + t) as u64);
                match fit_plane_traced(points, &members, sigma, params.plane_samples, &mut rng, |_, _| {}) {
                    Ok((plane, energy)) => out.push(FitPatch {
                        center: j,
                        scale,
                        members,
                        plane,
                        energy,
                        score: patch_score(energy, scale, params),
                    }),
                    Err(e) => debug!("patch ({j}, {scale}) skipped: {e}"),
                }
            }
            out
        })
        .collect()
}

/// One fitted patch per (point, scale) pair, point-major.
///
/// Each patch draws from its own random substream of `seed`, so the pool does
/// not depend on thread count.
pub fn build_patch_pool(cloud: &PointCloud, index: &SpatialIndex, params: &MfpsParams, seed: u64) -> Result<Vec<FitPatch>> {
    params.validate()?;
    Ok(build_pool_filtered(cloud.points(), index, params, seed, |_| true))
}

/// Greedy anisotropic filter over patches sorted by descending score: a patch
/// is kept when its plane normal is more than `w_t` degrees (unoriented) from
/// every normal kept so far.
pub fn select_anisotropic<'a>(containing: &[&'a FitPatch], w_t: f64) -> Vec<(&'a FitPatch, Vec3)> {
    let threshold = w_t.to_radians();
    let mut kept: Vec<(&FitPatch, Vec3)> = Vec::new();
    for &patch in containing {
        let n = patch.plane.normal;
        if kept.iter().all(|(_, m)| unoriented_angle(&n, m) > threshold) {
            kept.push((patch, n));
        }
    }
    kept
}

/// Picks the anisotropic patch whose plane best explains point `i`.
///
/// Each normal is oriented away from the neighborhood of `i` (the sum of
/// `n·(p_ref − p_k)` over the `orient_k` nearest neighbors is made positive,
/// with `p_ref` the projection of `p_i` onto the patch plane). The normal with
/// the smallest `n·(p_ref − p_i)` wins; ties keep the earlier (higher-score)
/// patch.
pub fn choose_fitting_normal(
    cloud: &PointCloud,
    index: &SpatialIndex,
    i: usize,
    aniso: &[(&FitPatch, Vec3)],
    orient_k: usize,
) -> Result<Vec3> {
    choose_impl(cloud.points(), index, i, aniso, orient_k)
}

fn choose_impl(points: &[Vec3], index: &SpatialIndex, i: usize, aniso: &[(&FitPatch, Vec3)], orient_k: usize) -> Result<Vec3> {
    if aniso.is_empty() {
        return Err(Error::InvalidParams("anisotropic patch set is empty".into()));
    }
    let p_i = points[i];
    let nbhd = index.knn(&p_i, orient_k);
    let mut best: Option<(f64, Vec3)> = None;
    for (patch, n) in aniso {
        let p_ref = patch.plane.project(&p_i);
        let spread: f64 = nbhd.iter().map(|&k| n.dot(&(p_ref - points[k]))).sum();
        let n = if spread < 0.0 {
            -n
        } else {
            if spread == 0.0 {
                debug!("orientation ambiguous at point {i}; keeping sign");
            }
            *n
        };
        let value = n.dot(&(p_ref - p_i));
        if best.is_none_or(|(v, _)| value < v) {
            best = Some((value, n));
        }
    }
    Ok(best.unwrap().1.normalize())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Selection {
    Full,
    Simple,
}

/// Initial normals by multi-scale fitting patch selection.
pub fn mfps_estimate(cloud: &PointCloud, params: &MfpsParams, seed: u64) -> Result<NormalField> {
    estimate(cloud, params, seed, Selection::Full)
}

/// Ablation: candidate points take the highest-scoring containing patch's
/// normal directly.
pub fn simple_mfps_estimate(cloud: &PointCloud, params: &MfpsParams, seed: u64) -> Result<NormalField> {
    estimate(cloud, params, seed, Selection::Simple)
}

/// PCA normals over the `k` nearest neighbors of every point.
pub fn pca_estimate(cloud: &PointCloud, index: &SpatialIndex, k: usize) -> Result<NormalField> {
    let points = cloud.points();
    let normals: Result<Vec<Vec3>> = points.par_iter().map(|p| pca_normal_points(points, &index.knn(p, k))).collect();
    normals.map(NormalField)
}

fn estimate(cloud: &PointCloud, params: &MfpsParams, seed: u64, selection: Selection) -> Result<NormalField> {
    params.validate()?;
    let points = cloud.points();
    let n = points.len();
    let index = SpatialIndex::build(points);
    let classes = classify_points(cloud, &index, params.classify_k.min(n), params.classify_tau)?;
    let is_candidate: Vec<bool> = classes.iter().map(|c| *c == PointClass::Candidate).collect();

    let mut normals = pca_estimate(cloud, &index, params.k_max().min(n))?.0;
    if !is_candidate.iter().any(|&c| c) {
        return Ok(NormalField(normals));
    }

    let pool = build_pool_filtered(points, &index, params, seed, |members| members.iter().any(|&m| is_candidate[m]));
    let mut containing: Vec<Vec<u32>> = vec![Vec::new(); n];
    for (p, patch) in pool.iter().enumerate() {
        for &m in &patch.members {
            if is_candidate[m] {
                containing[m].push(p as u32);
            }
        }
    }

    let updates: Vec<(usize, Vec3)> = (0..n)
        .into_par_iter()
        .filter(|&i| is_candidate[i])
        .map(|i| {
            let mut set: Vec<&FitPatch> = containing[i].iter().map(|&p| &pool[p as usize]).collect();
            if set.is_empty() {
                warn!("point {i}: no fitted patch contains it; keeping PCA normal");
                return Ok((i, normals[i]));
            }
            set.sort_by(|a, b| {
                b.score.total_cmp(&a.score).then(a.center.cmp(&b.center)).then(a.scale.cmp(&b.scale))
            });
            let normal = match selection {
                Selection::Simple => set[0].plane.normal,
                Selection::Full => {
                    let aniso = select_anisotropic(&set, params.w_t);
                    choose_impl(points, &index, i, &aniso, params.orient_k)?
                }
            };
            Ok((i, normal))
        })
        .collect::<Result<_>>()?;
    for (i, normal) in updates {
        normals[i] = normal;
    }
    Ok(NormalField(normals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn plane_cloud(n_side: usize) -> PointCloud {
        let mut pts = Vec::new();
        for i in 0..n_side {
            for j in 0..n_side {
                let (x, y) = (i as f64 / n_side as f64, j as f64 / n_side as f64);
                pts.push(Vec3::new(x, y, 0.3 * x - 0.2 * y + 1.0));
            }
        }
        PointCloud::new("plane", pts).unwrap()
    }

    fn small_params() -> MfpsParams {
        MfpsParams { scales: vec![10, 20, 30], classify_k: 20, orient_k: 15, plane_samples: 40, ..Default::default() }
    }

    #[test]
    fn exact_plane_energy_is_one() {
        let cloud = plane_cloud(6);
        let members: Vec<usize> = (0..cloud.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (plane, e) = fit_patch_plane(&cloud, &members, 0.01, 10, &mut rng).unwrap();
        assert!((e - 1.0).abs() < 1e-12);
        let truth = Vec3::new(-0.3, 0.2, 1.0).normalize();
        assert!(unoriented_angle(&plane.normal, &truth) < 1e-9);
    }

    #[test]
    fn collinear_members_are_degenerate() {
        let pts: Vec<Vec3> = (0..8).map(|i| Vec3::new(i as f64, 0.5 * i as f64, 0.0)).collect();
        let cloud = PointCloud::new("line", pts).unwrap();
        let members: Vec<usize> = (0..8).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(fit_patch_plane(&cloud, &members, 0.1, 50, &mut rng), Err(Error::DegeneratePatch { .. })));
    }

    /// 70% of the members on z = 0, 30% on x = 0 (x, z ≥ 0.2 to stay off the edge).
    fn dihedral_members() -> Vec<Vec3> {
        let mut pts = Vec::new();
        for i in 0..7 {
            for j in 0..4 {
                pts.push(Vec3::new(0.2 + 0.1 * i as f64, 0.1 * j as f64, 0.0));
            }
        }
        for i in 0..3 {
            for j in 0..4 {
                pts.push(Vec3::new(0.0, 0.1 * j as f64, 0.2 + 0.1 * i as f64));
            }
        }
        pts
    }

    #[test]
    fn dihedral_selects_majority_plane_like_exhaustive_search() {
        let pts = dihedral_members();
        let members: Vec<usize> = (0..pts.len()).collect();
        let sigma = 0.01;
        // Oracle: exhaustive search over every member triple.
        let mut best = (f64::MIN, Vec3::zeros());
        for a in 0..pts.len() {
            for b in a + 1..pts.len() {
                for c in b + 1..pts.len() {
                    if let Some(pl) = Plane::through(&pts[a], &pts[b], &pts[c]) {
                        let e = plane_energy(&pts, &members, &pl, sigma);
                        if e > best.0 {
                            best = (e, pl.normal);
                        }
                    }
                }
            }
        }
        assert!(unoriented_angle(&best.1, &Vec3::z()) < 1e-9);
        let cloud = PointCloud::new("d", pts).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (plane, e) = fit_patch_plane(&cloud, &members, sigma, 200, &mut rng).unwrap();
        assert!(unoriented_angle(&plane.normal, &best.1) < 1e-9);
        assert!((e - best.0).abs() < 1e-12);
    }

    #[test]
    fn stored_energy_dominates_every_sampled_candidate() {
        let pts = dihedral_members();
        let members: Vec<usize> = (0..pts.len()).collect();
        let mut seen = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (plane, e) = fit_plane_traced(&pts, &members, 0.05, 60, &mut rng, |p, e| seen.push((*p, e))).unwrap();
        assert!(!seen.is_empty());
        for (p, _) in &seen {
            assert!(plane_energy(&pts, &members, p, 0.05) <= e);
        }
        assert!((plane_energy(&pts, &members, &plane, 0.05) - e).abs() < 1e-12);
    }

    #[test]
    fn score_examples() {
        let params = MfpsParams::default();
        assert!((patch_score(1.0, 50, &params) - 0.9).abs() < 1e-15);
        assert!((patch_score(1.0, 150, &params) - 1.0).abs() < 1e-15);
        assert!((patch_score(0.8, 100, &params) - 0.76).abs() < 1e-15);
        let single = MfpsParams { scales: vec![40], ..Default::default() };
        assert_eq!(scale_weight(40, &single), 1.0);
    }

    #[test]
    fn scale_weight_monotone_and_bounded() {
        let params = MfpsParams { scales: vec![5, 9, 20, 31], beta: 0.7, ..Default::default() };
        let mut prev = 0.0;
        for k in 5..=31 {
            let eta = scale_weight(k, &params);
            assert!((0.7..=1.0).contains(&eta));
            assert!(eta >= prev);
            prev = eta;
        }
    }

    #[test]
    fn pool_counts_and_plane_scores() {
        let cloud = plane_cloud(8);
        let index = SpatialIndex::build(cloud.points());
        let params = small_params();
        let pool = build_patch_pool(&cloud, &index, &params, 3).unwrap();
        assert_eq!(pool.len(), 3 * cloud.len());
        for p in &pool {
            assert_eq!(p.members.len(), p.scale);
            assert!(p.score >= params.beta - 1e-12);
        }
    }

    #[test]
    fn pool_scores_match_naive_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<Vec3> = (0..120)
            .map(|_| Vec3::new(rng.random::<f64>(), rng.random::<f64>(), 0.02 * rng.random::<f64>()))
            .collect();
        let cloud = PointCloud::new("n", pts.clone()).unwrap();
        let index = SpatialIndex::build(&pts);
        let params = small_params();
        let pool = build_patch_pool(&cloud, &index, &params, 11).unwrap();
        for p in pool.iter().step_by(7) {
            // Naive oracle: brute-force neighbors, direct evaluation of the
            // energy and η formulas.
            let mut d: Vec<(f64, usize)> = pts.iter().enumerate().map(|(i, q)| ((q - pts[p.center]).norm_squared(), i)).collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let members: Vec<usize> = d[..p.scale].iter().map(|x| x.1).collect();
            assert_eq!(members, p.members);
            let sigma = 0.3 * d[p.scale - 1].0.sqrt();
            let mut e = 0.0;
            for &m in &members {
                let r = (pts[m] - p.plane.point).dot(&p.plane.normal);
                e += (-(r * r) / (sigma * sigma)).exp();
            }
            e /= members.len() as f64;
            assert!((e - p.energy).abs() < 1e-12);
            let eta = 0.9 + 0.1 * (p.scale as f64 - 10.0) / 20.0;
            assert!((e * eta - p.score).abs() < 1e-12);
        }
    }

    fn patch_with_normal(n: Vec3, score: f64) -> FitPatch {
        FitPatch {
            center: 0,
            scale: 3,
            members: vec![0, 1, 2],
            plane: Plane { normal: n.normalize(), point: Vec3::zeros() },
            energy: score,
            score,
        }
    }

    #[test]
    fn anisotropic_selection_examples() {
        let a = patch_with_normal(Vec3::z(), 1.0);
        let b = patch_with_normal(-Vec3::z(), 0.9);
        let c = patch_with_normal(Vec3::z(), 0.8);
        assert_eq!(select_anisotropic(&[&a, &b, &c], 60.0).len(), 1);

        let d = patch_with_normal(Vec3::x(), 0.7);
        let kept = select_anisotropic(&[&a, &d], 60.0);
        assert_eq!(kept.len(), 2);

        let e = patch_with_normal(Vec3::new(30f64.to_radians().sin(), 0.0, 30f64.to_radians().cos()), 0.95);
        let kept = select_anisotropic(&[&a, &e], 60.0);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].0.score, 1.0);
    }

    /// Convex right-angle edge: face A is z = 0 (x ≥ 0), face B is x = 0 (z ≤ 0).
    fn convex_edge() -> Vec<Vec3> {
        let mut pts = Vec::new();
        for i in 0..12 {
            for j in 0..8 {
                let t = 0.05 * i as f64;
                let y = 0.05 * j as f64;
                pts.push(Vec3::new(t, y, 0.0));
                if i > 0 {
                    pts.push(Vec3::new(0.0, y, -t));
                }
            }
        }
        pts
    }

    #[test]
    fn fitting_normal_prefers_the_points_own_face() {
        let pts = convex_edge();
        let cloud = PointCloud::new("edge", pts.clone()).unwrap();
        let index = SpatialIndex::build(&pts);
        let face_a = patch_with_normal(Vec3::z(), 0.8);
        let mut face_b = patch_with_normal(Vec3::x(), 1.0);
        face_b.plane.point = Vec3::zeros();
        // Points on face A near (but not on) the edge, for both score orders.
        for (i, p) in pts.iter().enumerate() {
            if p.z == 0.0 && p.x > 0.0 && p.x < 0.2 {
                for order in [[&face_b, &face_a], [&face_a, &face_b]] {
                    let aniso = select_anisotropic(&order, 60.0);
                    assert_eq!(aniso.len(), 2);
                    let n = choose_fitting_normal(&cloud, &index, i, &aniso, 20).unwrap();
                    assert!(unoriented_angle(&n, &Vec3::z()) < 1e-12, "point {i}");
                }
            }
        }
        // Concave edge: same faces, mirrored so the neighborhood is outside both planes.
        let mirrored: Vec<Vec3> = pts.iter().map(|p| Vec3::new(p.x, p.y, -p.z)).collect();
        let mirrored_cloud = PointCloud::new("concave", mirrored.clone()).unwrap();
        let mindex = SpatialIndex::build(&mirrored);
        let a = mirrored
            .iter()
            .position(|p| p.z == 0.0 && (p.x - 0.1).abs() < 1e-9 && (p.y - 0.15).abs() < 1e-9)
            .unwrap();
        let aniso = select_anisotropic(&[&face_b, &face_a], 60.0);
        let n = choose_fitting_normal(&mirrored_cloud, &mindex, a, &aniso, 20).unwrap();
        assert!(unoriented_angle(&n, &Vec3::z()) < 1e-12);
    }

    #[test]
    fn fitting_normal_singleton_and_ties() {
        let pts = convex_edge();
        let cloud = PointCloud::new("edge", pts.clone()).unwrap();
        let index = SpatialIndex::build(&pts);
        let only = patch_with_normal(Vec3::new(0.0, 1.0, 1.0), 1.0);
        let n = choose_fitting_normal(&cloud, &index, 3, &select_anisotropic(&[&only], 60.0), 10).unwrap();
        assert!(unoriented_angle(&n, &only.plane.normal) < 1e-12);

        // The edge point lies on both planes: every value is 0, first patch wins.
        let edge = pts.iter().position(|p| p.norm() == 0.0).unwrap();
        let face_a = patch_with_normal(Vec3::z(), 1.0);
        let face_b = patch_with_normal(Vec3::x(), 0.9);
        let aniso = select_anisotropic(&[&face_a, &face_b], 60.0);
        let n = choose_fitting_normal(&cloud, &index, edge, &aniso, 10).unwrap();
        assert!(unoriented_angle(&n, &Vec3::z()) < 1e-12);
        assert!(choose_fitting_normal(&cloud, &index, edge, &[], 10).is_err());
    }

    #[test]
    fn exact_plane_estimate() {
        let cloud = plane_cloud(12);
        let truth = Vec3::new(-0.3, 0.2, 1.0).normalize();
        let params = small_params();
        let a = mfps_estimate(&cloud, &params, 7).unwrap();
        let b = simple_mfps_estimate(&cloud, &params, 7).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!(unoriented_angle(x, &truth) < 1e-6);
            assert!(unoriented_angle(x, y) < 1e-12);
            assert!((x.norm() - 1.0).abs() < 1e-9);
        }
    }

    fn noisy_edge_cloud(seed: u64) -> (PointCloud, Vec<Vec3>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = Vec::new();
        let mut gt = Vec::new();
        for _ in 0..900 {
            let (u, v) = (rng.random::<f64>(), rng.random::<f64>());
            let noise = Vec3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5) * 0.002;
            if rng.random::<bool>() {
                pts.push(Vec3::new(u, v, 0.0) + noise);
                gt.push(Vec3::z());
            } else {
                pts.push(Vec3::new(0.0, v, -u) + noise);
                gt.push(Vec3::x());
            }
        }
        (PointCloud::new("edge", pts).unwrap(), gt)
    }

    #[test]
    fn simple_variant_picks_wrong_side_at_least_as_often() {
        let (cloud, gt) = noisy_edge_cloud(21);
        let params = MfpsParams { scales: vec![20, 40, 60], classify_k: 30, orient_k: 20, plane_samples: 60, ..Default::default() };
        let full = mfps_estimate(&cloud, &params, 2).unwrap();
        let simple = simple_mfps_estimate(&cloud, &params, 2).unwrap();
        let wrong = |f: &NormalField| (0..gt.len()).filter(|&i| unoriented_angle(&f[i], &gt[i]) > 45f64.to_radians()).count();
        let (wf, ws) = (wrong(&full), wrong(&simple));
        assert!(ws >= wf, "simple {ws} < full {wf}");
        assert!(ws > 0);
    }

    #[test]
    fn estimate_is_deterministic() {
        let (cloud, _) = noisy_edge_cloud(5);
        let params = MfpsParams { scales: vec![20, 40], classify_k: 30, orient_k: 20, plane_samples: 30, ..Default::default() };
        let a = mfps_estimate(&cloud, &params, 99).unwrap();
        let b = mfps_estimate(&cloud, &params, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn params_validation() {
        assert!(MfpsParams { scales: vec![50, 50], ..Default::default() }.validate().is_err());
        assert!(MfpsParams { plane_samples: 0, ..Default::default() }.validate().is_err());
        assert!(MfpsParams { w_t: 180.0, ..Default::default() }.validate().is_err());
        assert!(MfpsParams::default().validate().is_ok());
    }
}
