//! Straight-line flow samples: X(t) = (1−t)·X(0) + t·X(1) with the anchor
//! part frozen at its condition coordinates.

use std::ops::Range;

use ndarray::Array2;
use rand::Rng;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::geometry::{gaussian, sample_part_points, IndexSampler};

#[derive(Debug, Clone)]
pub struct FlowSample {
    /// Condition coordinates, one row per sampled point (n×3).
    pub condition: Array2<f64>,
    /// Condition normals, zero rows when the cloud has none (n×3).
    pub normals: Array2<f64>,
    pub part_indices: Vec<usize>,
    pub anchor_mask: Vec<bool>,
    /// Per-part row ranges.
    pub segments: Vec<Range<usize>>,
    /// Flat row index of each sampled point within the condition cloud.
    pub source_rows: Vec<usize>,
    pub x0: Array2<f64>,
    pub x1: Array2<f64>,
    pub t: f64,
    pub xt: Array2<f64>,
    pub target_velocity: Array2<f64>,
}

impl FlowSample {
    /// Builds the interpolant and target velocity. Anchor rows get `x1 := x0`
    /// so `xt = x0` holds exactly for every `t`, and their velocity is zero.
    #[allow(clippy::too_many_arguments)]
    pub fn assemble(
        condition: Array2<f64>,
        normals: Array2<f64>,
        part_indices: Vec<usize>,
        anchor_mask: Vec<bool>,
        segments: Vec<Range<usize>>,
        source_rows: Vec<usize>,
        x0: Array2<f64>,
        mut x1: Array2<f64>,
        t: f64,
    ) -> Result<Self> {
        let n = condition.nrows();
        if [normals.nrows(), part_indices.len(), anchor_mask.len(), x0.nrows(), x1.nrows(), source_rows.len()]
            .iter()
            .any(|&m| m != n)
        {
            return Err(Error::ShapeMismatch("flow sample rows disagree".into()));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::ConfigError(format!("t = {t} outside [0,1]")));
        }
        for (i, &a) in anchor_mask.iter().enumerate() {
            if a {
                for c in 0..3 {
                    x1[(i, c)] = x0[(i, c)];
                }
            }
        }
        let mut xt = &x0 * (1.0 - t) + &x1 * t;
        let mut target_velocity = &x1 - &x0;
        for (i, &a) in anchor_mask.iter().enumerate() {
            if a {
                for c in 0..3 {
                    // pin directly: (1−t)·x + t·x rounds away from x
                    xt[(i, c)] = x0[(i, c)];
                    target_velocity[(i, c)] = 0.0;
                }
            }
        }
        Ok(Self {
            condition,
            normals,
            part_indices,
            anchor_mask,
            segments,
            source_rows,
            x0,
            x1,
            t,
            xt,
            target_velocity,
        })
    }

    pub fn len(&self) -> usize {
        self.condition.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.condition.nrows() == 0
    }

    /// The 10-dim raw positional-encoding inputs, one row per point, built
    /// from the given noised coordinates (xt during training, the Euler state
    /// during inference).
    pub fn raw_inputs(&self, noised: &Array2<f64>) -> Array2<f64> {
        let n = self.len();
        let mut raw = Array2::zeros((n, 10));
        for i in 0..n {
            for c in 0..3 {
                raw[(i, c)] = self.condition[(i, c)];
                raw[(i, 3 + c)] = self.normals[(i, c)];
                raw[(i, 6 + c)] = noised[(i, c)];
            }
            raw[(i, 9)] = self.part_indices[i] as f64;
        }
        raw
    }
}

/// Draws `t ~ Beta(α, α)`; for the default α = 0.5 this is the arcsine law
/// `t = sin²(π·u/2)`, U-shaped and symmetric about 0.5. Other α use the
/// two-Gamma construction. Draws are clamped strictly inside (0,1).
pub fn sample_timestep<R: Rng>(rng: &mut R, alpha: f64) -> f64 {
    let t = if (alpha - 0.5).abs() < 1e-12 {
        let u: f64 = rng.gen();
        let s = (std::f64::consts::FRAC_PI_2 * u).sin();
        s * s
    } else {
        let a = gamma_draw(rng, alpha);
        let b = gamma_draw(rng, alpha);
        a / (a + b)
    };
    t.clamp(f64::EPSILON, 1.0 - f64::EPSILON)
}

/// Marsaglia–Tsang for shape ≥ 1, boosted for shape < 1.
fn gamma_draw<R: Rng>(rng: &mut R, shape: f64) -> f64 {
    if shape < 1.0 {
        let u: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
        return gamma_draw(rng, shape + 1.0) * u.powf(1.0 / shape);
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x = gaussian(rng);
        let v = (1.0 + c * x).powi(3);
        if v <= 0.0 {
            continue;
        }
        let u: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
        if u.ln() < 0.5 * x * x + d - d * v + d * v.ln() {
            return d * v;
        }
    }
}

/// Builds a training sample: per part, draw `m` point indices once, gather
/// condition points/normals with them, place `x0` at the ground-truth
/// assembled position of exactly those condition points, and draw Gaussian
/// `x1` for non-anchor rows.
pub fn make_flow_sample<R: Rng + IndexSampler>(
    sample: &Sample,
    m: usize,
    t: f64,
    rng: &mut R,
) -> Result<FlowSample> {
    sample.condition.validate()?;
    if sample.gt.len() != sample.condition.num_parts() {
        return Err(Error::ShapeMismatch("pose count != part count".into()));
    }
    let parts = sample.condition.num_parts();
    let n = parts * m;
    let mut condition = Array2::zeros((n, 3));
    let mut normals = Array2::zeros((n, 3));
    let mut x0 = Array2::zeros((n, 3));
    let mut part_indices = Vec::with_capacity(n);
    let mut anchor_mask = Vec::with_capacity(n);
    let mut segments = Vec::with_capacity(parts);
    let mut source_rows = Vec::with_capacity(n);

    let mut row = 0;
    let mut part_offset = 0;
    for (pi, part) in sample.condition.parts.iter().enumerate() {
        let idx = sample_part_points(part, m, rng);
        let start = row;
        for &j in &idx {
            let p = part.points[j];
            condition[(row, 0)] = p.x;
            condition[(row, 1)] = p.y;
            condition[(row, 2)] = p.z;
            if let Some(ns) = &part.normals {
                normals[(row, 0)] = ns[j].x;
                normals[(row, 1)] = ns[j].y;
                normals[(row, 2)] = ns[j].z;
            }
            let a = sample.gt[pi].apply(&p);
            x0[(row, 0)] = a.x;
            x0[(row, 1)] = a.y;
            x0[(row, 2)] = a.z;
            part_indices.push(pi);
            anchor_mask.push(part.anchor);
            source_rows.push(part_offset + j);
            row += 1;
        }
        segments.push(start..row);
        part_offset += part.len();
    }

    let x1 = Array2::from_shape_fn((n, 3), |_| gaussian(rng));
    FlowSample::assemble(
        condition,
        normals,
        part_indices,
        anchor_mask,
        segments,
        source_rows,
        x0,
        x1,
        t,
    )
}

/// Z(s) = (1−s)·Z0 + s·Z1.
pub fn interpolate_noise(z0: &Array2<f64>, z1: &Array2<f64>, s: f64) -> Result<Array2<f64>> {
    if z0.dim() != z1.dim() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            z0.dim(),
            z1.dim()
        )));
    }
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::ConfigError(format!("s = {s} outside [0,1]")));
    }
    Ok(z0 * (1.0 - s) + z1 * s)
}
