//! Kabsch / Procrustes solver for index-corresponded point sets.

use nalgebra::{Matrix3, Vector3, SVD};

use crate::error::{Error, Result};
use crate::geometry::transform::{center_of_mass, RigidTransform};

/// Least-squares rigid transform `T` minimizing `Σ ||T·source_j − target_j||²`.
///
/// The proper rotation (det +1) is enforced by flipping the sign of the
/// singular direction with the smallest singular value.
pub fn kabsch_solve(source: &[Vector3<f64>], target: &[Vector3<f64>]) -> Result<RigidTransform> {
    if source.len() != target.len() {
        return Err(Error::DimensionMismatch(format!(
            "source has {} points, target has {}",
            source.len(),
            target.len()
        )));
    }
    if source.len() < 3 {
        return Err(Error::DegenerateGeometry(format!(
            "need at least 3 corresponded points, got {}",
            source.len()
        )));
    }

    let cs = center_of_mass(source);
    let ct = center_of_mass(target);

    // Cross-covariance H = Σ (t − c_t)(s − c_s)ᵀ, so that R ≈ H's rotation.
    let mut h = Matrix3::zeros();
    let mut spread = 0.0f64;
    for (s, t) in source.iter().zip(target) {
        let sc = s - cs;
        let tc = t - ct;
        h += tc * sc.transpose();
        spread = spread.max(sc.norm_squared());
    }

    let svd = SVD::new(h, true, true);
    let u = svd
        .u
        .ok_or_else(|| Error::DegenerateGeometry("SVD failed to produce U".into()))?;
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::DegenerateGeometry("SVD failed to produce Vᵀ".into()))?;
    let sv = svd.singular_values;

    // Rank < 2 of the centered covariance: collinear or coincident points.
    let scale = sv[0].max(f64::MIN_POSITIVE);
    if sv[0] <= 1e-12 * spread.max(1e-300) || sv[1] / scale <= 1e-9 {
        return Err(Error::DegenerateGeometry(format!(
            "centered covariance is rank-deficient (singular values {:.3e}, {:.3e}, {:.3e})",
            sv[0], sv[1], sv[2]
        )));
    }

    let det = (u * v_t).determinant();
    let d = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, det.signum()));
    let mut rotation = u * d * v_t;

    // The 3×3 SVD leaves ~1e-8 rad of error; polish with Gauss–Newton steps
    // on the rotation manifold (linearized residual in the tangent space).
    for _ in 0..3 {
        let mut a = Matrix3::zeros();
        let mut b = Vector3::zeros();
        for (s, t) in source.iter().zip(target) {
            let rs = rotation * (s - cs);
            let r = (t - ct) - rs;
            a += Matrix3::identity() * rs.norm_squared() - rs * rs.transpose();
            b += rs.cross(&r);
        }
        let Some(omega) = a.lu().solve(&b) else {
            break;
        };
        rotation = rotation_exp(&omega) * rotation;
    }

    let translation = ct - rotation * cs;
    Ok(RigidTransform {
        rotation,
        translation,
    })
}

/// Matrix exponential of `skew(omega)` (Rodrigues).
fn rotation_exp(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let k = Matrix3::new(
        0.0, -omega.z, omega.y, omega.z, 0.0, -omega.x, -omega.y, omega.x, 0.0,
    );
    if theta < 1e-12 {
        return Matrix3::identity() + k + k * k * 0.5;
    }
    let k = k / theta;
    Matrix3::identity() + k * theta.sin() + k * k * (1.0 - theta.cos())
}
