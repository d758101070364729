//! Binary overlap labels: a point is positive iff it lies within radius ε of
//! some point of another part, evaluated in the assembled frame.
//!
//! The accelerated path uses a uniform hash grid with cell size ε and must
//! agree bit-exactly with the brute-force scan (same `d² < ε²` comparison).

use std::collections::HashMap;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::cloud::MultiPartCloud;

fn cell_of(p: &Vector3<f64>, eps: f64) -> (i64, i64, i64) {
    (
        (p.x / eps).floor() as i64,
        (p.y / eps).floor() as i64,
        (p.z / eps).floor() as i64,
    )
}

/// Per-part, per-point labels via a uniform hash grid.
pub fn overlap_labels(cloud: &MultiPartCloud, epsilon: f64) -> Result<Vec<Vec<bool>>> {
    if !cloud.assembled {
        return Err(Error::InvariantViolation(
            "overlap labels require the assembled frame".into(),
        ));
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvariantViolation(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    cloud.validate()?;

    let eps2 = epsilon * epsilon;
    let mut grid: HashMap<(i64, i64, i64), Vec<(usize, usize)>> = HashMap::new();
    for (i, part) in cloud.parts.iter().enumerate() {
        for (j, p) in part.points.iter().enumerate() {
            grid.entry(cell_of(p, epsilon)).or_default().push((i, j));
        }
    }

    let labels = cloud
        .parts
        .iter()
        .enumerate()
        .map(|(i, part)| {
            part.points
                .iter()
                .map(|p| {
                    let (cx, cy, cz) = cell_of(p, epsilon);
                    for dx in -1..=1 {
                        for dy in -1..=1 {
                            for dz in -1..=1 {
                                let Some(bucket) = grid.get(&(cx + dx, cy + dy, cz + dz)) else {
                                    continue;
                                };
                                for &(k, j) in bucket {
                                    if k == i {
                                        continue;
                                    }
                                    let q = &cloud.parts[k].points[j];
                                    if (p - q).norm_squared() < eps2 {
                                        return true;
                                    }
                                }
                            }
                        }
                    }
                    false
                })
                .collect()
        })
        .collect();
    Ok(labels)
}

/// O(N²) reference scan; the oracle the grid version is checked against.
pub fn overlap_labels_brute(cloud: &MultiPartCloud, epsilon: f64) -> Result<Vec<Vec<bool>>> {
    if !cloud.assembled {
        return Err(Error::InvariantViolation(
            "overlap labels require the assembled frame".into(),
        ));
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvariantViolation(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    cloud.validate()?;

    let eps2 = epsilon * epsilon;
    Ok(cloud
        .parts
        .iter()
        .enumerate()
        .map(|(i, part)| {
            part.points
                .iter()
                .map(|p| {
                    cloud.parts.iter().enumerate().any(|(k, other)| {
                        k != i
                            && other
                                .points
                                .iter()
                                .any(|q| (p - q).norm_squared() < eps2)
                    })
                })
                .collect()
        })
        .collect())
}
