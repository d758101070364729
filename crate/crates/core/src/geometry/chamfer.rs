//! Symmetric Chamfer distance.
//!
//! Defined here as `½·(mean_a min_b ||a−b|| + mean_b min_a ||a−b||)`.

use nalgebra::Vector3;

use crate::error::{Error, Result};

fn directed_mean(from: &[Vector3<f64>], to: &[Vector3<f64>]) -> f64 {
    let mut sum = 0.0;
    for a in from {
        let mut best = f64::INFINITY;
        for b in to {
            let d2 = (a - b).norm_squared();
            if d2 < best {
                best = d2;
            }
        }
        sum += best.sqrt();
    }
    sum / from.len() as f64
}

pub fn chamfer_distance(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySet("chamfer_distance requires non-empty sets".into()));
    }
    Ok(0.5 * (directed_mean(a, b) + directed_mean(b, a)))
}
