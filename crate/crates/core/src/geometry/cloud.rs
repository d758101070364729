//! Multi-part point cloud containers.

use nalgebra::Vector3;

use crate::error::{Error, Result};

/// One rigid part of an object.
#[derive(Debug, Clone, PartialEq)]
pub struct Part {
    pub points: Vec<Vector3<f64>>,
    pub normals: Option<Vec<Vector3<f64>>>,
    pub part_index: usize,
    pub anchor: bool,
}

impl Part {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::InvariantViolation(format!(
                "part {} has no points",
                self.part_index
            )));
        }
        if let Some(normals) = &self.normals {
            if normals.len() != self.points.len() {
                return Err(Error::ShapeMismatch(format!(
                    "part {}: {} normals for {} points",
                    self.part_index,
                    normals.len(),
                    self.points.len()
                )));
            }
            for (j, n) in normals.iter().enumerate() {
                if (n.norm() - 1.0).abs() > 1e-6 {
                    return Err(Error::InvariantViolation(format!(
                        "part {} normal {} has norm {:.9}",
                        self.part_index,
                        j,
                        n.norm()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// An ordered set of parts, either in the assembled global frame or unposed.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiPartCloud {
    pub parts: Vec<Part>,
    pub assembled: bool,
}

impl MultiPartCloud {
    pub fn new(parts: Vec<Part>, assembled: bool) -> Result<Self> {
        let cloud = Self { parts, assembled };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn num_parts(&self) -> usize {
        self.parts.len()
    }

    pub fn total_points(&self) -> usize {
        self.parts.iter().map(Part::len).sum()
    }

    pub fn anchor_index(&self) -> Option<usize> {
        self.parts.iter().position(|p| p.anchor)
    }

    pub fn validate(&self) -> Result<()> {
        if self.parts.is_empty() {
            return Err(Error::InvariantViolation("cloud has no parts".into()));
        }
        for (i, part) in self.parts.iter().enumerate() {
            if part.part_index != i {
                return Err(Error::InvariantViolation(format!(
                    "part at position {i} carries index {}",
                    part.part_index
                )));
            }
            part.validate()?;
        }
        let anchors = self.parts.iter().filter(|p| p.anchor).count();
        if anchors != 1 {
            return Err(Error::InvariantViolation(format!(
                "expected exactly one anchor part, found {anchors}"
            )));
        }
        Ok(())
    }
}

/// Object scale D: twice the mean distance of all points from the center of
/// gravity of the whole cloud.
pub fn object_scale(cloud: &MultiPartCloud) -> f64 {
    let mut cog = Vector3::zeros();
    let n = cloud.total_points().max(1) as f64;
    for part in &cloud.parts {
        for p in &part.points {
            cog += p;
        }
    }
    cog /= n;
    let mut sum = 0.0;
    for part in &cloud.parts {
        for p in &part.points {
            sum += (p - cog).norm();
        }
    }
    2.0 * sum / n
}

#[cfg(test)]
mod tests {
    use super::*;

    fn part(idx: usize, anchor: bool) -> Part {
        Part {
            points: vec![Vector3::zeros(), Vector3::x()],
            normals: None,
            part_index: idx,
            anchor,
        }
    }

    #[test]
    fn accepts_single_anchor() {
        let c = MultiPartCloud::new(vec![part(0, true), part(1, false)], true).unwrap();
        assert_eq!(c.total_points(), 4);
        assert_eq!(c.anchor_index(), Some(0));
    }

    #[test]
    fn rejects_two_anchors() {
        assert!(MultiPartCloud::new(vec![part(0, true), part(1, true)], true).is_err());
    }

    #[test]
    fn rejects_non_contiguous_indices() {
        assert!(MultiPartCloud::new(vec![part(0, true), part(2, false)], true).is_err());
    }

    #[test]
    fn rejects_non_unit_normals() {
        let mut p = part(0, true);
        p.normals = Some(vec![Vector3::x() * 2.0, Vector3::y()]);
        assert!(MultiPartCloud::new(vec![p], true).is_err());
    }
}
