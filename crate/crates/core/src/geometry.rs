//! Point-cloud container, PCA normals and candidate/smooth classification.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spatial::SpatialIndex;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Minimum number of points for any neighborhood operation.
pub const MIN_POINTS: usize = 4;

const UNIT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
    gt_normals: Option<Vec<Vec3>>,
    name: String,
}

impl PointCloud {
    pub fn new(name: impl Into<String>, points: Vec<Vec3>) -> Result<Self> {
        Self::with_normals(name, points, None)
    }

    pub fn with_normals(
        name: impl Into<String>,
        points: Vec<Vec3>,
        gt_normals: Option<Vec<Vec3>>,
    ) -> Result<Self> {
        if points.len() < MIN_POINTS {
            return Err(Error::InvalidCloud(format!(
                "need at least {MIN_POINTS} points, got {}",
                points.len()
            )));
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidCloud(format!("point {i} has a non-finite coordinate")));
        }
        if let Some(normals) = &gt_normals {
            if normals.len() != points.len() {
                return Err(Error::LengthMismatch { left: points.len(), right: normals.len() });
            }
            if let Some(i) = normals.iter().position(|n| (n.norm() - 1.0).abs() > UNIT_TOL) {
                return Err(Error::InvalidCloud(format!("ground-truth normal {i} is not unit length")));
            }
        }
        Ok(Self { points, gt_normals, name: name.into() })
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn gt_normals(&self) -> Option<&[Vec3]> {
        self.gt_normals.as_deref()
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> Vec3 {
        self.points[i]
    }

    /// Applies `f` to every position (and `g` to every ground-truth normal).
    pub fn transformed(&self, f: impl Fn(&Vec3) -> Vec3, g: impl Fn(&Vec3) -> Vec3) -> Result<Self> {
        Self::with_normals(
            self.name.clone(),
            self.points.iter().map(f).collect(),
            self.gt_normals.as_ref().map(|n| n.iter().map(g).collect()),
        )
    }
}

/// One unit vector per point.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NormalField(pub Vec<Vec3>);

impl NormalField {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[Vec3] {
        &self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Vec3> {
        self.0.iter()
    }

    /// Checks that every vector is unit length within `tol`.
    pub fn check_unit(&self, tol: f64) -> Result<()> {
        match self.0.iter().position(|n| !((n.norm() - 1.0).abs() <= tol)) {
            Some(i) => Err(Error::InvalidParams(format!("normal {i} is not unit length"))),
            None => Ok(()),
        }
    }
}

impl From<Vec<Vec3>> for NormalField {
    fn from(v: Vec<Vec3>) -> Self {
        Self(v)
    }
}

impl std::ops::Index<usize> for NormalField {
    type Output = Vec3;
    fn index(&self, i: usize) -> &Vec3 {
        &self.0[i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PointClass {
    /// Near a sharp feature.
    Candidate,
    Smooth,
}

/// Symmetric 3x3 eigendecomposition with eigenvalues ascending.
///
/// Eigenvector `k` is column `k` of the returned matrix. Equal eigenvalues keep
/// the solver's original column order.
pub fn sym_eigen3(m: &Mat3) -> ([f64; 3], Mat3) {
    let eig = SymmetricEigen::new(*m);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.map(|k| eig.eigenvalues[k]);
    let vectors = Mat3::from_columns(&order.map(|k| eig.eigenvectors.column(k).into_owned()));
    (values, vectors)
}

/// Centered covariance (unnormalized scatter) of the selected points.
pub fn covariance(points: &[Vec3], nbhd: &[usize]) -> Mat3 {
    let n = nbhd.len().max(1) as f64;
    let mean = nbhd.iter().fold(Vec3::zeros(), |acc, &i| acc + points[i]) / n;
    nbhd.iter().fold(Mat3::zeros(), |acc, &i| {
        let d = points[i] - mean;
        acc + d * d.transpose()
    })
}

/// Smallest-eigenvalue eigenvector of the neighborhood covariance. Sign is
/// unconstrained.
pub fn pca_normal(cloud: &PointCloud, nbhd: &[usize]) -> Result<Vec3> {
    pca_normal_points(cloud.points(), nbhd)
}

pub(crate) fn pca_normal_points(points: &[Vec3], nbhd: &[usize]) -> Result<Vec3> {
    if nbhd.len() < 3 {
        return Err(Error::DegenerateNeighborhood(format!(
            "need at least 3 points, got {}",
            nbhd.len()
        )));
    }
    let (values, vectors) = sym_eigen3(&covariance(points, nbhd));
    if !(values[1] > 1e-12 * values[2]) || values[2] <= 0.0 {
        return Err(Error::DegenerateNeighborhood("covariance rank < 2".into()));
    }
    Ok(vectors.column(0).normalize())
}

/// Surface variation λ₁/(λ₁+λ₂+λ₃) of a neighborhood, λ₁ smallest.
pub fn surface_variation(points: &[Vec3], nbhd: &[usize]) -> Result<f64> {
    let (values, _) = sym_eigen3(&covariance(points, nbhd));
    let total: f64 = values.iter().map(|v| v.max(0.0)).sum();
    if total <= 0.0 {
        return Err(Error::DegenerateNeighborhood("all neighbors coincide".into()));
    }
    Ok(values[0].max(0.0) / total)
}

/// Tags each point Candidate when the surface variation of its `k`-NN
/// covariance exceeds `tau`, Smooth otherwise.
pub fn classify_points(
    cloud: &PointCloud,
    index: &SpatialIndex,
    k: usize,
    tau: f64,
) -> Result<Vec<PointClass>> {
    use rayon::prelude::*;
    if k < 3 || !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidParams(format!("classify needs k >= 3 and 0 < tau <= 1 (k={k}, tau={tau})")));
    }
    let points = cloud.points();
    points
        .par_iter()
        .map(|p| {
            let nbhd = index.knn(p, k);
            let v = surface_variation(points, &nbhd)?;
            Ok(if v > tau { PointClass::Candidate } else { PointClass::Smooth })
        })
        .collect()
}

pub fn bbox_diagonal(cloud: &PointCloud) -> f64 {
    bbox_diagonal_points(cloud.points())
}

pub(crate) fn bbox_diagonal_points(points: &[Vec3]) -> f64 {
    let Some(first) = points.first() else { return 0.0 };
    let (lo, hi) = points.iter().fold((*first, *first), |(lo, hi), p| (lo.inf(p), hi.sup(p)));
    (hi - lo).norm()
}

/// Rotation-invariant length scale: twice the largest distance from the centroid.
///
/// Matches the bounding-box diagonal for boxes and squares, and is used for all
/// radii so results commute with rigid motions.
pub fn cloud_extent(cloud: &PointCloud) -> f64 {
    cloud_extent_points(cloud.points())
}

pub(crate) fn cloud_extent_points(points: &[Vec3]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let c = points.iter().fold(Vec3::zeros(), |a, p| a + p) / points.len() as f64;
    2.0 * points.iter().map(|p| (p - c).norm()).fold(0.0, f64::max)
}

/// Unoriented angle between two directions, in radians.
pub fn unoriented_angle(a: &Vec3, b: &Vec3) -> f64 {
    let c = (a.dot(b) / (a.norm() * b.norm())).abs().min(1.0);
    c.acos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid_plane(f: impl Fn(f64, f64) -> Vec3) -> Vec<Vec3> {
        let mut pts = Vec::new();
        for i in 0..10 {
            for j in 0..10 {
                pts.push(f(i as f64 * 0.1, j as f64 * 0.1));
            }
        }
        pts
    }

    #[test]
    fn rejects_invalid_clouds() {
        let pts = vec![Vec3::zeros(); 3];
        assert!(PointCloud::new("x", pts).is_err());
        let mut pts = vec![Vec3::zeros(); 4];
        pts[2].x = f64::NAN;
        assert!(PointCloud::new("x", pts).is_err());
        let pts = vec![Vec3::zeros(); 4];
        let normals = vec![Vec3::new(0.0, 0.0, 2.0); 4];
        assert!(PointCloud::with_normals("x", pts.clone(), Some(normals)).is_err());
        assert!(PointCloud::with_normals("x", pts, Some(vec![Vec3::z(); 3])).is_err());
    }

    #[test]
    fn pca_on_exact_planes() {
        let cloud = PointCloud::new("z0", grid_plane(|x, y| Vec3::new(x, y, 0.0))).unwrap();
        let all: Vec<usize> = (0..cloud.len()).collect();
        let n = pca_normal(&cloud, &all).unwrap();
        assert!((n.z.abs() - 1.0).abs() < 1e-12);

        let cloud = PointCloud::new("diag", grid_plane(|x, y| Vec3::new(x, y, -x - y))).unwrap();
        let n = pca_normal(&cloud, &all).unwrap();
        let expected = Vec3::new(1.0, 1.0, 1.0).normalize();
        assert!(n.dot(&expected).abs() > 1.0 - 1e-12);
    }

    #[test]
    fn pca_noisy_plane_matches_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vec3> = (0..200)
            .map(|_| Vec3::new(rng.random::<f64>(), rng.random::<f64>(), 0.005 * (rng.random::<f64>() - 0.5)))
            .collect();
        let cloud = PointCloud::new("noisy", pts.clone()).unwrap();
        let all: Vec<usize> = (0..pts.len()).collect();
        let n = pca_normal(&cloud, &all).unwrap();

        // Oracle: SVD of the centered data matrix, last right singular vector.
        let mean = pts.iter().sum::<Vec3>() / pts.len() as f64;
        let data = nalgebra::DMatrix::from_fn(pts.len(), 3, |r, c| pts[r][c] - mean[c]);
        let svd = data.svd(false, true);
        let v_t = svd.v_t.unwrap();
        let smallest = (0..3).min_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b])).unwrap();
        let oracle = Vec3::new(v_t[(smallest, 0)], v_t[(smallest, 1)], v_t[(smallest, 2)]);
        assert!(unoriented_angle(&n, &oracle) < 1e-9);
        assert!(unoriented_angle(&n, &Vec3::z()) < 5f64.to_radians());
    }

    #[test]
    fn pca_rejects_collinear_and_small() {
        let pts: Vec<Vec3> = (0..6).map(|i| Vec3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        let cloud = PointCloud::new("line", pts).unwrap();
        assert!(matches!(pca_normal(&cloud, &[0, 1, 2, 3]), Err(Error::DegenerateNeighborhood(_))));
        assert!(matches!(pca_normal(&cloud, &[0, 1]), Err(Error::DegenerateNeighborhood(_))));
    }

    #[test]
    fn bbox_cases() {
        let corners: Vec<Vec3> = (0..8)
            .map(|i| Vec3::new((i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64))
            .collect();
        let cloud = PointCloud::new("cube", corners).unwrap();
        assert!((bbox_diagonal(&cloud) - 3f64.sqrt()).abs() < 1e-15);
        let cloud = PointCloud::new("same", vec![Vec3::new(1.0, 2.0, 3.0); 5]).unwrap();
        assert_eq!(bbox_diagonal(&cloud), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<Vec3> = (0..100).map(|_| Vec3::new(rng.random(), rng.random(), rng.random()) * 7.0).collect();
        let mut ext = [0.0; 3];
        for (a, e) in ext.iter_mut().enumerate() {
            let max = pts.iter().map(|p| p[a]).fold(f64::MIN, f64::max);
            let min = pts.iter().map(|p| p[a]).fold(f64::MAX, f64::min);
            *e = max - min;
        }
        let expected = (ext[0] * ext[0] + ext[1] * ext[1] + ext[2] * ext[2]).sqrt();
        let cloud = PointCloud::new("rand", pts).unwrap();
        assert!((bbox_diagonal(&cloud) - expected).abs() < 1e-12);
    }

    fn dihedral_samples() -> Vec<Vec3> {
        // Two half-planes meeting at a right angle along the y axis.
        let mut pts = Vec::new();
        for i in 0..=10 {
            for j in -5..=5 {
                let t = i as f64 * 0.1;
                let y = j as f64 * 0.1;
                pts.push(Vec3::new(t, y, 0.0));
                if i > 0 {
                    pts.push(Vec3::new(0.0, y, t));
                }
            }
        }
        pts
    }

    #[test]
    fn classify_plane_edge_and_threshold() {
        let cloud = PointCloud::new("z0", grid_plane(|x, y| Vec3::new(x, y, 0.0))).unwrap();
        let index = SpatialIndex::build(cloud.points());
        assert!(classify_points(&cloud, &index, 10, 0.01).unwrap().iter().all(|c| *c == PointClass::Smooth));

        let cloud = PointCloud::new("edge", dihedral_samples()).unwrap();
        let index = SpatialIndex::build(cloud.points());
        // Oracle: the 20 nearest samples of the edge point straddle both faces;
        // computed directly from the analytic sample set.
        let edge = cloud.points().iter().position(|p| p.norm() == 0.0).unwrap();
        let nbhd = index.knn(&cloud.point(edge), 20);
        let on_x = nbhd.iter().filter(|&&i| cloud.point(i).z == 0.0 && cloud.point(i).x > 0.0).count();
        let on_z = nbhd.iter().filter(|&&i| cloud.point(i).x == 0.0 && cloud.point(i).z > 0.0).count();
        assert!(on_x > 0 && on_z > 0);
        let v = surface_variation(cloud.points(), &nbhd).unwrap();
        assert!(v > 0.01, "variation {v}");
        let classes = classify_points(&cloud, &index, 20, 0.01).unwrap();
        assert_eq!(classes[edge], PointClass::Candidate);

        // Variation never exceeds 1/3, so tau = 1 tags nothing.
        let classes = classify_points(&cloud, &index, 20, 1.0).unwrap();
        assert!(classes.iter().all(|c| *c == PointClass::Smooth));
        assert!(classify_points(&cloud, &index, 20, 0.0).is_err());
        assert!(classify_points(&cloud, &index, 2, 0.5).is_err());
    }

    #[test]
    fn classify_is_scale_free() {
        let cloud = PointCloud::new("edge", dihedral_samples()).unwrap();
        let scaled = cloud.transformed(|p| p * 37.5, |n| *n).unwrap();
        let a = classify_points(&cloud, &SpatialIndex::build(cloud.points()), 15, 0.02).unwrap();
        let b = classify_points(&scaled, &SpatialIndex::build(scaled.points()), 15, 0.02).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn eigen_sorted_ascending() {
        let m = Mat3::from_diagonal(&Vec3::new(3.0, 1.0, 2.0));
        let (vals, vecs) = sym_eigen3(&m);
        assert_eq!(vals, [1.0, 2.0, 3.0]);
        assert!((vecs.column(0).y.abs() - 1.0).abs() < 1e-12);
        assert!((vecs.column(2).x.abs() - 1.0).abs() < 1e-12);
    }
}
