//! The assembly symmetry group: per-part rotational stabilizers combined
//! with permutations of identical parts, plus the statistical invariance
//! checkers used by the test suite.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::FlowSample;
use crate::geometry::{
    axis_angle, center_of_mass, chamfer_distance, kabsch_solve, rotation_geodesic_deg,
    MultiPartCloud,
};
use ndarray::Array2;

/// One element g = (R_1, …, R_H, σ): part at slot i receives the rows of
/// part σ⁻¹(i) rotated by R_i.
#[derive(Debug, Clone)]
pub struct GroupElement {
    pub rotations: Vec<Matrix3<f64>>,
    /// `sigma[i]` is σ(i): the slot part i moves to.
    pub sigma: Vec<usize>,
}

impl GroupElement {
    pub fn identity(parts: usize) -> Self {
        Self {
            rotations: vec![Matrix3::identity(); parts],
            sigma: (0..parts).collect(),
        }
    }

    pub fn sigma_inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.sigma.len()];
        for (i, &s) in self.sigma.iter().enumerate() {
            inv[s] = i;
        }
        inv
    }

    /// g⁻¹ = (R_{σ(i)}ᵀ at slot i, σ⁻¹).
    pub fn inverse(&self) -> Self {
        Self {
            rotations: self
                .sigma
                .iter()
                .map(|&s| self.rotations[s].transpose())
                .collect(),
            sigma: self.sigma_inverse(),
        }
    }

    /// Checks σ is a bijection moving parts only within identical-part
    /// classes.
    pub fn validate(&self, classes: &[Vec<usize>]) -> Result<()> {
        let h = self.sigma.len();
        if self.rotations.len() != h {
            return Err(Error::InvalidGroupElement(format!(
                "{} rotations for {h} parts",
                self.rotations.len()
            )));
        }
        let mut seen = vec![false; h];
        for &s in &self.sigma {
            if s >= h || seen[s] {
                return Err(Error::InvalidGroupElement("σ is not a bijection".into()));
            }
            seen[s] = true;
        }
        let class_of = |p: usize| classes.iter().position(|c| c.contains(&p));
        for (i, &s) in self.sigma.iter().enumerate() {
            if i != s && class_of(i) != class_of(s) {
                return Err(Error::InvalidGroupElement(format!(
                    "σ moves part {i} to {s} across identical-part classes"
                )));
            }
        }
        Ok(())
    }
}

/// Identical-part equivalence classes: parts are equivalent when, after
/// CoM-centering and (index-corresponded) Kabsch alignment, their symmetric
/// Chamfer distance is below `tol`. Transitivity is forced by union-find.
pub fn find_identical_parts(cloud: &MultiPartCloud, tol: f64) -> Vec<Vec<usize>> {
    let h = cloud.num_parts();
    let mut parent: Vec<usize> = (0..h).collect();
    fn find(parent: &mut Vec<usize>, i: usize) -> usize {
        if parent[i] != i {
            let root = find(parent, parent[i]);
            parent[i] = root;
        }
        parent[i]
    }
    for i in 0..h {
        for j in i + 1..h {
            if parts_identical(cloud, i, j, tol) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a] = b;
            }
        }
    }
    let mut classes: Vec<Vec<usize>> = Vec::new();
    let mut roots: Vec<usize> = Vec::new();
    for i in 0..h {
        let r = find(&mut parent, i);
        match roots.iter().position(|&x| x == r) {
            Some(k) => classes[k].push(i),
            None => {
                roots.push(r);
                classes.push(vec![i]);
            }
        }
    }
    classes
}

fn parts_identical(cloud: &MultiPartCloud, i: usize, j: usize, tol: f64) -> bool {
    let a = &cloud.parts[i].points;
    let b = &cloud.parts[j].points;
    if a.len() != b.len() {
        return false;
    }
    let ca = center_of_mass(a);
    let cb = center_of_mass(b);
    let ac: Vec<Vector3<f64>> = a.iter().map(|p| p - ca).collect();
    let bc: Vec<Vector3<f64>> = b.iter().map(|p| p - cb).collect();
    let Ok(align) = kabsch_solve(&ac, &bc) else {
        return false;
    };
    let aligned = align.apply_points(&ac);
    matches!(chamfer_distance(&aligned, &bc), Ok(d) if d < tol)
}

/// Finite rotational stabilizer of a centered part: cyclic rotations of the
/// candidate orders about each principal axis (plus any user-supplied
/// rotations) whose self-Chamfer distance stays below `tol`. Always contains
/// the identity.
pub fn find_stabilizer(
    points: &[Vector3<f64>],
    orders: &[u32],
    tol: f64,
    extra: &[Matrix3<f64>],
) -> Vec<Matrix3<f64>> {
    let com = center_of_mass(points);
    let centered: Vec<Vector3<f64>> = points.iter().map(|p| p - com).collect();
    let mut cov = Matrix3::zeros();
    for p in &centered {
        cov += p * p.transpose();
    }
    cov /= centered.len().max(1) as f64;
    let eig = cov.symmetric_eigen();
    let axes: Vec<Vector3<f64>> = (0..3).map(|c| eig.eigenvectors.column(c).into()).collect();

    let mut candidates: Vec<Matrix3<f64>> = Vec::new();
    for axis in &axes {
        for &order in orders {
            for k in 1..order {
                let angle = 2.0 * std::f64::consts::PI * k as f64 / order as f64;
                candidates.push(axis_angle(axis, angle));
            }
        }
    }
    candidates.extend_from_slice(extra);

    let mut accepted = vec![Matrix3::identity()];
    let fits: Vec<bool> = candidates
        .par_iter()
        .map(|r| {
            let rotated: Vec<Vector3<f64>> = centered.iter().map(|p| r * p).collect();
            matches!(chamfer_distance(&rotated, &centered), Ok(d) if d < tol)
        })
        .collect();
    for (r, fit) in candidates.iter().zip(fits) {
        if !fit {
            continue;
        }
        let dup = accepted
            .iter()
            .any(|a| matches!(rotation_geodesic_deg(a, r), Ok(d) if d < 1e-6));
        if !dup {
            accepted.push(*r);
        }
    }
    accepted
}

fn act_rows(g: &GroupElement, fs: &FlowSample, tensor: &Array2<f64>) -> Result<Array2<f64>> {
    let inv = g.sigma_inverse();
    let mut out = Array2::zeros(tensor.dim());
    for (slot, seg) in fs.segments.iter().enumerate() {
        let src_part = inv[slot];
        let src = fs.segments[src_part].clone();
        if src.len() != seg.len() {
            return Err(Error::InvalidGroupElement(format!(
                "parts {src_part} and {slot} differ in size"
            )));
        }
        let r = &g.rotations[slot];
        for (dst_row, src_row) in seg.clone().zip(src) {
            let v = Vector3::new(
                tensor[(src_row, 0)],
                tensor[(src_row, 1)],
                tensor[(src_row, 2)],
            );
            let w = r * v;
            out[(dst_row, 0)] = w.x;
            out[(dst_row, 1)] = w.y;
            out[(dst_row, 2)] = w.z;
        }
    }
    Ok(out)
}

/// Applies g to an n×3 row tensor aligned with `fs` (velocities, positions).
pub fn apply_group_to_tensor(
    g: &GroupElement,
    fs: &FlowSample,
    tensor: &Array2<f64>,
) -> Result<Array2<f64>> {
    if tensor.nrows() != fs.len() || tensor.ncols() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "tensor {:?} for sample of {} rows",
            tensor.dim(),
            fs.len()
        )));
    }
    act_rows(g, fs, tensor)
}

/// Applies g to a whole flow sample: rows of part σ⁻¹(i) are rotated by R_i
/// and land in slot i, consistently across condition, normals, x0, x1, xt
/// and the target velocity. Part-index features stay slot-aligned.
pub fn apply_group_element(
    g: &GroupElement,
    fs: &FlowSample,
    classes: &[Vec<usize>],
) -> Result<FlowSample> {
    g.validate(classes)?;
    if g.sigma.len() != fs.segments.len() {
        return Err(Error::InvalidGroupElement(format!(
            "element over {} parts applied to {}-part sample",
            g.sigma.len(),
            fs.segments.len()
        )));
    }
    let inv = g.sigma_inverse();
    // the anchor's flow is pinned; moving it would break the anchor contract
    for (slot, seg) in fs.segments.iter().enumerate() {
        let moved = inv[slot] != slot;
        if moved && (fs.anchor_mask[seg.start] || fs.anchor_mask[fs.segments[inv[slot]].start]) {
            return Err(Error::InvalidGroupElement("σ moves the anchor part".into()));
        }
    }
    let mut out = fs.clone();
    out.condition = act_rows(g, fs, &fs.condition)?;
    out.normals = act_rows(g, fs, &fs.normals)?;
    out.x0 = act_rows(g, fs, &fs.x0)?;
    out.x1 = act_rows(g, fs, &fs.x1)?;
    out.xt = act_rows(g, fs, &fs.xt)?;
    out.target_velocity = act_rows(g, fs, &fs.target_velocity)?;
    let inv2 = inv.clone();
    for (slot, seg) in fs.segments.iter().enumerate() {
        for row in seg.clone() {
            out.part_indices[row] = slot;
            out.anchor_mask[row] = fs.anchor_mask[fs.segments[inv2[slot]].start];
        }
    }
    Ok(out)
}

/// Result of the two-sample energy-distance permutation test.
#[derive(Debug, Clone, Copy)]
pub struct EnergyTest {
    pub statistic: f64,
    pub p_value: f64,
    /// True when the null "same distribution" is NOT rejected at `alpha`.
    pub pass: bool,
}

/// Energy distance 2·E‖X−Y‖ − E‖X−X′‖ − E‖Y−Y′‖ as V-statistics (means over
/// all ordered pairs, diagonal included), so identical samples give exactly 0.
pub fn energy_distance(x: &[Vector3<f64>], y: &[Vector3<f64>]) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::EmptySet("energy_distance on empty sample".into()));
    }
    let cross: f64 = x
        .par_iter()
        .map(|a| y.iter().map(|b| (a - b).norm()).sum::<f64>())
        .sum();
    let within = |s: &[Vector3<f64>]| -> f64 {
        (0..s.len())
            .into_par_iter()
            .map(|i| {
                let mut acc = 0.0;
                for j in i + 1..s.len() {
                    acc += (s[i] - s[j]).norm();
                }
                acc
            })
            .sum()
    };
    let within_mean = |s: &[Vector3<f64>]| 2.0 * within(s) / (s.len() * s.len()) as f64;
    let exy = cross / (x.len() * y.len()) as f64;
    Ok(2.0 * exy - within_mean(x) - within_mean(y))
}

/// Permutation test: `y` should already carry the rotation under test. The
/// null is rejected when the observed statistic exceeds all but
/// `alpha·(permutations+1)` of the label-shuffled statistics.
pub fn distribution_invariance_test(
    x: &[Vector3<f64>],
    y: &[Vector3<f64>],
    permutations: usize,
    alpha: f64,
    seed: u64,
) -> Result<EnergyTest> {
    let statistic = energy_distance(x, y)?;
    let pooled: Vec<Vector3<f64>> = x.iter().chain(y).copied().collect();
    let exceed: usize = (0..permutations)
        .into_par_iter()
        .map(|p| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed ^ (p as u64).wrapping_mul(0x9e3779b97f4a7c15));
            let mut idx: Vec<usize> = (0..pooled.len()).collect();
            for i in (1..idx.len()).rev() {
                idx.swap(i, rng.gen_range(0..=i));
            }
            let px: Vec<Vector3<f64>> = idx[..x.len()].iter().map(|&i| pooled[i]).collect();
            let py: Vec<Vector3<f64>> = idx[x.len()..].iter().map(|&i| pooled[i]).collect();
            let s = energy_distance(&px, &py).expect("non-empty");
            usize::from(s >= statistic)
        })
        .sum();
    let p_value = (1 + exceed) as f64 / (permutations + 1) as f64;
    Ok(EnergyTest {
        statistic,
        p_value,
        pass: p_value > alpha,
    })
}
