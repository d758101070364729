//! Rigid transforms on SE(3) and rotation utilities.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;

use crate::error::{Error, Result};

/// Frobenius tolerance for the orthonormality / determinant invariants.
pub const ROTATION_TOL: f64 = 1e-9;

/// A proper rigid transform: `x ↦ R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let t = Self {
            rotation,
            translation,
        };
        t.validate(ROTATION_TOL)?;
        Ok(t)
    }

    /// Checks `RᵀR = I` and `det R = +1` within `tol` (Frobenius).
    pub fn validate(&self, tol: f64) -> Result<()> {
        check_rotation(&self.rotation, tol)
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn apply_points(&self, points: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        points.iter().map(|p| self.apply(p)).collect()
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn invert(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }
}

pub fn check_rotation(r: &Matrix3<f64>, tol: f64) -> Result<()> {
    let gram = r.transpose() * r;
    let dev = (gram - Matrix3::identity()).norm();
    if dev > tol {
        return Err(Error::InvalidRotation(format!(
            "RᵀR deviates from I by {dev:.3e} (tol {tol:.1e})"
        )));
    }
    let det = r.determinant();
    if (det - 1.0).abs() > tol {
        return Err(Error::InvalidRotation(format!(
            "det = {det:.12} (expected +1 within {tol:.1e})"
        )));
    }
    Ok(())
}

/// Geodesic distance on SO(3) in degrees: the angle of `RaᵀRb`, i.e.
/// `arccos((tr(RaᵀRb) − 1)/2)`. Evaluated via atan2 of the skew part so tiny
/// angles are not lost to the conditioning of arccos near 1.
pub fn rotation_geodesic_deg(ra: &Matrix3<f64>, rb: &Matrix3<f64>) -> Result<f64> {
    check_rotation(ra, 1e-6)?;
    check_rotation(rb, 1e-6)?;
    let rel = ra.transpose() * rb;
    let cos = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let v = Vector3::new(
        rel[(2, 1)] - rel[(1, 2)],
        rel[(0, 2)] - rel[(2, 0)],
        rel[(1, 0)] - rel[(0, 1)],
    );
    let sin = (v.norm() / 2.0).min(1.0);
    Ok(sin.atan2(cos).to_degrees())
}

/// Rotation by `angle_rad` about a unit `axis` (Rodrigues).
pub fn axis_angle(axis: &Vector3<f64>, angle_rad: f64) -> Matrix3<f64> {
    let a = axis.normalize();
    let (s, c) = angle_rad.sin_cos();
    let k = Matrix3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0);
    Matrix3::identity() + k * s + k * k * (1.0 - c)
}

/// Haar-uniform random rotation via a normalized Gaussian quaternion.
pub fn random_rotation<R: Rng>(rng: &mut R) -> Matrix3<f64> {
    loop {
        let q: [f64; 4] = [
            gaussian(rng),
            gaussian(rng),
            gaussian(rng),
            gaussian(rng),
        ];
        let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        if n < 1e-8 {
            continue;
        }
        let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
        return Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - z * w),
            2.0 * (x * z + y * w),
            2.0 * (x * y + z * w),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - x * w),
            2.0 * (x * z - y * w),
            2.0 * (y * z + x * w),
            1.0 - 2.0 * (x * x + y * y),
        );
    }
}

/// Standard normal draw via Box–Muller; avoids a rand_distr dependency here.
pub fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        if u1 <= f64::MIN_POSITIVE {
            continue;
        }
        let u2: f64 = rng.gen::<f64>();
        return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    }
}

/// Uniform direction on the unit sphere.
pub fn random_direction<R: Rng>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(gaussian(rng), gaussian(rng), gaussian(rng));
        let n = v.norm();
        if n > 1e-8 {
            return v / n;
        }
    }
}

pub fn center_of_mass(points: &[Vector3<f64>]) -> Vector3<f64> {
    let mut c = Vector3::zeros();
    for p in points {
        c += p;
    }
    c / points.len().max(1) as f64
}
