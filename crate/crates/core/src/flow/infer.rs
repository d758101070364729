//! Euler inference and Procrustes pose recovery.

use nalgebra::Vector3;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::encoder;
use crate::error::{Error, Result};
use crate::flow::model::ModelConfig;
use crate::flow::sample::FlowSample;
use crate::flow::train::forward_velocity;
use crate::geometry::{gaussian, kabsch_solve, MultiPartCloud, RigidTransform};
use crate::nn::ParamSet;

/// `K` uniform reverse Euler steps from t = 1 to 0:
/// `X̂(t−Δt) = X̂(t) − V(X̂(t), t)·Δt` with `Δt = 1/K`. The velocity callback
/// receives the current state and `t`.
pub fn euler_integrate<F>(init: Array2<f64>, k: usize, mut velocity: F) -> Result<Array2<f64>>
where
    F: FnMut(&Array2<f64>, f64) -> Result<Array2<f64>>,
{
    if k == 0 {
        return Err(Error::ConfigError("K must be ≥ 1".into()));
    }
    let dt = 1.0 / k as f64;
    let mut x = init;
    for step in 0..k {
        let t = 1.0 - step as f64 * dt;
        let v = velocity(&x, t)?;
        if v.dim() != x.dim() {
            return Err(Error::ShapeMismatch("velocity shape".into()));
        }
        x = x - v * dt;
    }
    Ok(x)
}

/// Inference output: predicted assembled coordinates for every condition
/// point, with the row bookkeeping needed for pose recovery.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub points: Array2<f64>,
    pub sample: FlowSample,
}

/// A degenerate flow sample covering every condition point, used to drive the
/// network at inference time (x0 is unknown and set to zero).
pub fn inference_sample(cloud: &MultiPartCloud) -> Result<FlowSample> {
    cloud.validate()?;
    let n = cloud.total_points();
    let mut condition = Array2::zeros((n, 3));
    let mut normals = Array2::zeros((n, 3));
    let mut part_indices = Vec::with_capacity(n);
    let mut anchor_mask = Vec::with_capacity(n);
    let mut segments = Vec::with_capacity(cloud.num_parts());
    let mut row = 0;
    for (pi, part) in cloud.parts.iter().enumerate() {
        let start = row;
        for (j, p) in part.points.iter().enumerate() {
            condition[(row, 0)] = p.x;
            condition[(row, 1)] = p.y;
            condition[(row, 2)] = p.z;
            if let Some(ns) = &part.normals {
                normals[(row, 0)] = ns[j].x;
                normals[(row, 1)] = ns[j].y;
                normals[(row, 2)] = ns[j].z;
            }
            part_indices.push(pi);
            anchor_mask.push(part.anchor);
            row += 1;
        }
        segments.push(start..row);
    }
    let source_rows = (0..n).collect();
    FlowSample::assemble(
        condition,
        normals,
        part_indices,
        anchor_mask,
        segments,
        source_rows,
        Array2::zeros((n, 3)),
        Array2::zeros((n, 3)),
        1.0,
    )
}

/// Gaussian starting noise for a cloud, with anchor rows pinned to their
/// condition coordinates.
pub fn draw_noise<R: Rng>(fs: &FlowSample, rng: &mut R) -> Array2<f64> {
    let mut z = Array2::from_shape_fn((fs.len(), 3), |_| gaussian(rng));
    pin_anchor(fs, &mut z);
    z
}

fn pin_anchor(fs: &FlowSample, z: &mut Array2<f64>) {
    for (i, &a) in fs.anchor_mask.iter().enumerate() {
        if a {
            for c in 0..3 {
                z[(i, c)] = fs.condition[(i, c)];
            }
        }
    }
}

/// Runs the trained model: initializes non-anchor points from `noise` (or a
/// seeded Gaussian draw), anchors at their condition coordinates, then takes
/// `k` Euler steps.
pub fn infer(
    model_config: &ModelConfig,
    flow_params: &ParamSet,
    encoder_params: &ParamSet,
    cloud: &MultiPartCloud,
    k: usize,
    noise: Option<&Array2<f64>>,
    seed: u64,
) -> Result<Prediction> {
    let fs = inference_sample(cloud)?;
    let features = encoder::encode(encoder_params, cloud)?;
    let init = match noise {
        Some(z) => {
            if z.dim() != (fs.len(), 3) {
                return Err(Error::ShapeMismatch(format!(
                    "noise {:?}, expected ({}, 3)",
                    z.dim(),
                    fs.len()
                )));
            }
            let mut z = z.clone();
            pin_anchor(&fs, &mut z);
            z
        }
        None => draw_noise(&fs, &mut ChaCha12Rng::seed_from_u64(seed)),
    };
    let anchor = fs.anchor_mask.clone();
    let condition = fs.condition.clone();
    let points = euler_integrate(init, k, |x, t| {
        let mut fst = fs.clone();
        fst.t = t;
        let v = forward_velocity(model_config, flow_params, &fst, x, &features)?;
        Ok(v)
    })?;
    let mut points = points;
    // the network zeroes anchor velocities, so anchors should already sit at
    // their condition coordinates; re-pin to make the contract bit-exact
    for (i, &a) in anchor.iter().enumerate() {
        if a {
            for c in 0..3 {
                points[(i, c)] = condition[(i, c)];
            }
        }
    }
    Ok(Prediction { points, sample: fs })
}

/// Procrustes pose per part: condition points → predicted points. The anchor
/// gets the identity; degenerate parts report their own error without
/// aborting the rest.
pub fn recover_poses(pred: &Prediction) -> Vec<Result<RigidTransform>> {
    let fs = &pred.sample;
    fs.segments
        .iter()
        .enumerate()
        .map(|(pi, seg)| {
            if fs.anchor_mask[seg.start] {
                return Ok(RigidTransform::identity());
            }
            let _ = pi;
            let src: Vec<Vector3<f64>> = seg
                .clone()
                .map(|i| Vector3::new(fs.condition[(i, 0)], fs.condition[(i, 1)], fs.condition[(i, 2)]))
                .collect();
            let dst: Vec<Vector3<f64>> = seg
                .clone()
                .map(|i| Vector3::new(pred.points[(i, 0)], pred.points[(i, 1)], pred.points[(i, 2)]))
                .collect();
            kabsch_solve(&src, &dst)
        })
        .collect()
}
