//! Synthetic shapes with analytic normals.

use rand::Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bbox_diagonal_points, PointCloud, Vec3};
use crate::substream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ShapeKind {
    /// Unit square in the xy-plane.
    Plane,
    /// Unit sphere at the origin.
    Sphere,
    /// Surface of the unit cube `[0, 1]³`.
    Cube,
    /// Closed cylinder of radius 0.5 and height 1 around the z axis.
    Cylinder,
    /// Two unit squares sharing the y axis, with the given interior angle.
    Dihedral { angle_deg: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthShape {
    pub kind: ShapeKind,
    pub samples: usize,
    /// Gaussian displacement deviation as a fraction of the clean diagonal.
    pub noise_frac: f64,
    pub seed: u64,
}

impl ShapeKind {
    pub fn label(&self) -> String {
        match self {
            ShapeKind::Plane => "plane".into(),
            ShapeKind::Sphere => "sphere".into(),
            ShapeKind::Cube => "cube".into(),
            ShapeKind::Cylinder => "cylinder".into(),
            ShapeKind::Dihedral { angle_deg } => format!("dihedral{angle_deg}"),
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> (Vec3, Vec3) {
        match *self {
            ShapeKind::Plane => (Vec3::new(rng.random(), rng.random(), 0.0), Vec3::z()),
            ShapeKind::Sphere => {
                let [x, y, z]: [f64; 3] = UnitSphere.sample(rng);
                let p = Vec3::new(x, y, z);
                (p, p)
            }
            ShapeKind::Cube => {
                let face = rng.random_range(0..6);
                let axis = face % 3;
                let side = if face < 3 { 0.0 } else { 1.0 };
                let mut p = Vec3::new(rng.random(), rng.random(), rng.random());
                p[axis] = side;
                let mut n = Vec3::zeros();
                n[axis] = if face < 3 { -1.0 } else { 1.0 };
                (p, n)
            }
            ShapeKind::Cylinder => {
                let (r, h) = (0.5, 1.0);
                let side = 2.0 * std::f64::consts::PI * r * h;
                let cap = std::f64::consts::PI * r * r;
                let t = rng.random::<f64>() * (side + 2.0 * cap);
                let theta = rng.random::<f64>() * std::f64::consts::TAU;
                if t < side {
                    let n = Vec3::new(theta.cos(), theta.sin(), 0.0);
                    (Vec3::new(r * n.x, r * n.y, rng.random::<f64>() * h), n)
                } else {
                    let rho = r * rng.random::<f64>().sqrt();
                    let top = t >= side + cap;
                    let z = if top { h } else { 0.0 };
                    let n = if top { Vec3::z() } else { -Vec3::z() };
                    (Vec3::new(rho * theta.cos(), rho * theta.sin(), z), n)
                }
            }
            ShapeKind::Dihedral { angle_deg } => {
                let (u, v): (f64, f64) = (rng.random(), rng.random());
                if rng.random::<bool>() {
                    (Vec3::new(u, v, 0.0), Vec3::z())
                } else {
                    let a = angle_deg.to_radians();
                    let d = Vec3::new(a.cos(), 0.0, a.sin());
                    (d * u + Vec3::y() * v, Vec3::new(-a.sin(), 0.0, a.cos()))
                }
            }
        }
    }
}

impl Default for SynthShape {
    fn default() -> Self {
        Self { kind: ShapeKind::Cube, samples: 10_000, noise_frac: 0.0, seed: 0 }
    }
}

impl SynthShape {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_frac >= 0.0) {
            return Err(Error::InvalidParams("noise_frac must be nonnegative".into()));
        }
        if let ShapeKind::Dihedral { angle_deg } = self.kind {
            if !(angle_deg > 0.0 && angle_deg < 360.0) {
                return Err(Error::InvalidParams("dihedral angle must lie in (0, 360)".into()));
            }
        }
        Ok(())
    }
}

/// Samples the surface uniformly by area, then displaces every point by
/// isotropic Gaussian noise. Ground-truth normals come from the clean surface.
pub fn synth_generate(spec: &SynthShape) -> Result<PointCloud> {
    spec.validate()?;
    let mut rng = substream(spec.seed, 0);
    let (mut points, normals): (Vec<Vec3>, Vec<Vec3>) = (0..spec.samples).map(|_| spec.kind.sample(&mut rng)).unzip();
    if spec.noise_frac > 0.0 {
        let sigma = spec.noise_frac * bbox_diagonal_points(&points);
        let noise = Normal::new(0.0, sigma).map_err(|e| Error::InvalidParams(e.to_string()))?;
        let mut rng = substream(spec.seed, 1);
        for p in &mut points {
            *p += Vec3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng));
        }
    }
    let name = format!("{}-n{}-s{}", spec.kind.label(), spec.noise_frac, spec.seed);
    PointCloud::with_normals(name, points, Some(normals))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(kind: ShapeKind, samples: usize, noise_frac: f64) -> SynthShape {
        SynthShape { kind, samples, noise_frac, seed: 7 }
    }

    #[test]
    fn clean_plane_normals_are_equal() {
        let c = synth_generate(&shape(ShapeKind::Plane, 200, 0.0)).unwrap();
        assert!(c.gt_normals().unwrap().iter().all(|n| *n == Vec3::z()));
        assert!(c.points().iter().all(|p| p.z == 0.0));
    }

    #[test]
    fn clean_sphere_normals_are_radial() {
        let c = synth_generate(&shape(ShapeKind::Sphere, 500, 0.0)).unwrap();
        for (p, n) in c.points().iter().zip(c.gt_normals().unwrap()) {
            assert!((p - n).norm() < 1e-12);
            assert!((p.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cube_noise_has_requested_deviation() {
        let clean = synth_generate(&shape(ShapeKind::Cube, 20000, 0.0)).unwrap();
        let noisy = synth_generate(&shape(ShapeKind::Cube, 20000, 0.001)).unwrap();
        let target = 0.001 * 3f64.sqrt();
        for axis in 0..3 {
            let d: Vec<f64> = clean.points().iter().zip(noisy.points()).map(|(a, b)| b[axis] - a[axis]).collect();
            let mean = d.iter().sum::<f64>() / d.len() as f64;
            let std = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64).sqrt();
            assert!((std / target - 1.0).abs() < 0.1, "axis {axis}: {std}");
        }
    }

    #[test]
    fn surfaces_satisfy_their_equations() {
        let cyl = synth_generate(&shape(ShapeKind::Cylinder, 1000, 0.0)).unwrap();
        for (p, n) in cyl.points().iter().zip(cyl.gt_normals().unwrap()) {
            if n.z == 0.0 {
                assert!(((p.x * p.x + p.y * p.y).sqrt() - 0.5).abs() < 1e-12);
            } else {
                assert!(p.z == 0.0 || p.z == 1.0);
            }
        }
        let di = synth_generate(&shape(ShapeKind::Dihedral { angle_deg: 90.0 }, 1000, 0.0)).unwrap();
        for (p, n) in di.points().iter().zip(di.gt_normals().unwrap()) {
            assert!(p.dot(n).abs() < 1e-12);
        }
    }

    #[test]
    fn seeded_and_validated() {
        let a = synth_generate(&shape(ShapeKind::Sphere, 50, 0.01)).unwrap();
        let b = synth_generate(&shape(ShapeKind::Sphere, 50, 0.01)).unwrap();
        assert_eq!(a.points(), b.points());
        assert!(synth_generate(&shape(ShapeKind::Plane, 50, -0.1)).is_err());
    }
}
