//! Pose-invariant per-point feature encoder, pretrained by predicting which
//! points overlap another part in the assembled state.
//!
//! Architecture: 3 layers of [per-point linear → tanh → concat(point,
//! part-mean, part-max, global-mean) → linear], feature dim `d`, plus a
//! 2-layer overlap head on the per-point features. Pose invariance is trained
//! in, not built in: every pretraining step re-poses each part with a random
//! rigid transform while the labels stay fixed to the assembled geometry.

use std::ops::Range;

use nalgebra::Vector3;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::data::{derive_seed, Sample};
use crate::error::{Error, Result};
use crate::geometry::{
    center_of_mass, object_scale, overlap_labels, random_rotation, MultiPartCloud,
};
use crate::nn::{ParamSet, Tape, Var};

pub const LAYERS: usize = 3;
pub const INPUT_DIM: usize = 7;

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    /// Overlap radius as a fraction of the per-object scale D.
    pub epsilon_rel: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Half-width of the per-axis uniform translation augmentation (m).
    pub translation_range: f64,
    pub augment: bool,
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epsilon_rel: 0.025,
            learning_rate: 1e-3,
            steps: 500,
            batch_size: 8,
            translation_range: 0.5,
            augment: true,
            feature_dim: 64,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon_rel <= 0.0
            || self.learning_rate <= 0.0
            || self.steps == 0
            || self.batch_size == 0
            || self.feature_dim == 0
        {
            return Err(Error::ConfigError(
                "pretrain config requires positive epsilon, lr, steps, batch, dim".into(),
            ));
        }
        Ok(())
    }
}

/// Fresh encoder + head parameters for feature dim `d`.
pub fn encoder_init(d: usize, seed: u64) -> ParamSet {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    let mut cin = INPUT_DIM;
    for l in 0..LAYERS {
        let s1 = (1.0 / cin as f64).sqrt();
        p.add_random(&format!("enc.l{l}.w1"), cin, d, s1, &mut rng);
        p.add_zeros(&format!("enc.l{l}.b1"), 1, d);
        let s2 = (1.0 / (4 * d) as f64).sqrt();
        p.add_random(&format!("enc.l{l}.w2"), 4 * d, d, s2, &mut rng);
        p.add_zeros(&format!("enc.l{l}.b2"), 1, d);
        cin = d;
    }
    let sh = (1.0 / d as f64).sqrt();
    p.add_random("head.w1", d, d, sh, &mut rng);
    p.add_zeros("head.b1", 1, d);
    p.add_random("head.w2", d, 1, sh, &mut rng);
    p.add_zeros("head.b2", 1, 1);
    p
}

pub fn feature_dim(params: &ParamSet) -> usize {
    params.get("enc.l0.w1").ncols()
}

/// Flattens a cloud into the n×7 input matrix and per-part row ranges.
/// Coordinates are taken relative to the part's center of mass (plus the
/// radial distance), so part translation cancels exactly and augmentation
/// only has to teach rotation invariance. Normals are zero when absent.
pub fn cloud_inputs(cloud: &MultiPartCloud) -> (Array2<f64>, Vec<Range<usize>>) {
    let n = cloud.total_points();
    let mut x = Array2::zeros((n, INPUT_DIM));
    let mut segments = Vec::with_capacity(cloud.num_parts());
    let mut row = 0;
    for part in &cloud.parts {
        let start = row;
        let com = center_of_mass(&part.points);
        for (j, pt) in part.points.iter().enumerate() {
            let rel = pt - com;
            x[(row, 0)] = rel.x;
            x[(row, 1)] = rel.y;
            x[(row, 2)] = rel.z;
            if let Some(normals) = &part.normals {
                x[(row, 3)] = normals[j].x;
                x[(row, 4)] = normals[j].y;
                x[(row, 5)] = normals[j].z;
            }
            x[(row, 6)] = rel.norm();
            row += 1;
        }
        segments.push(start..row);
    }
    (x, segments)
}

/// Builds the encoder forward pass on a tape. `pvars` must be leaves created
/// from the `ParamSet` in iteration order. Returns (features, head logits).
pub fn forward_on_tape(
    tape: &mut Tape,
    params: &ParamSet,
    pvars: &[Var],
    input: Var,
    segments: &[Range<usize>],
) -> (Var, Var) {
    let global = vec![0..tape.value(input).nrows()];
    let var = |name: &str| pvars[params.index_of(name).expect("known parameter")];
    let mut h = input;
    for l in 0..LAYERS {
        let w1 = var(&format!("enc.l{l}.w1"));
        let b1 = var(&format!("enc.l{l}.b1"));
        let w2 = var(&format!("enc.l{l}.w2"));
        let b2 = var(&format!("enc.l{l}.b2"));
        let p = tape.matmul(h, w1);
        let p = tape.add_row(p, b1);
        let p = tape.tanh(p);
        let pm = tape.segment_mean(p, segments);
        let px = tape.segment_max(p, segments);
        let gm = tape.segment_mean(p, &global);
        let cat = tape.concat_cols(&[p, pm, px, gm]);
        let out = tape.matmul(cat, w2);
        h = tape.add_row(out, b2);
    }
    let z = tape.matmul(h, var("head.w1"));
    let z = tape.add_row(z, var("head.b1"));
    let z = tape.tanh(z);
    let z = tape.matmul(z, var("head.w2"));
    let logits = tape.add_row(z, var("head.b2"));
    (h, logits)
}

fn forward_no_grad(params: &ParamSet, cloud: &MultiPartCloud) -> Result<(Array2<f64>, Array2<f64>)> {
    cloud.validate()?;
    let (x, segments) = cloud_inputs(cloud);
    let mut tape = Tape::no_grad();
    let pvars: Vec<Var> = params.tensors().iter().map(|t| tape.leaf(t.clone())).collect();
    let input = tape.leaf(x);
    let (features, logits) = forward_on_tape(&mut tape, params, &pvars, input, &segments);
    let f = tape.value(features).clone();
    let l = tape.value(logits).clone();
    if f.iter().any(|v| !v.is_finite()) || l.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteActivation("encoder forward".into()));
    }
    Ok((f, l))
}

/// Per-point features, one row per point in part order.
pub fn encode(params: &ParamSet, cloud: &MultiPartCloud) -> Result<Array2<f64>> {
    Ok(forward_no_grad(params, cloud)?.0)
}

/// Per-point overlap probability in (0,1), one row per point.
pub fn predict_overlap(params: &ParamSet, cloud: &MultiPartCloud) -> Result<Array2<f64>> {
    let (_, logits) = forward_no_grad(params, cloud)?;
    Ok(logits.mapv(|z| 1.0 / (1.0 + (-z).exp())))
}

/// Mean binary cross-entropy of probabilities against 0/1 labels, with the
/// probabilities clamped away from {0,1} for stability.
pub fn bce_loss(probabilities: &[f64], labels: &[f64]) -> Result<f64> {
    if probabilities.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} probabilities vs {} labels",
            probabilities.len(),
            labels.len()
        )));
    }
    if probabilities.is_empty() {
        return Err(Error::EmptySet("bce_loss on empty input".into()));
    }
    let mut sum = 0.0;
    for (&p, &y) in probabilities.iter().zip(labels) {
        let p = p.clamp(1e-15, 1.0 - 1e-15);
        sum -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    Ok(sum / probabilities.len() as f64)
}

/// Re-poses each part with a Haar rotation about its center of mass plus a
/// uniform translation; normals rotate with the part.
pub fn augment_cloud<R: Rng>(cloud: &MultiPartCloud, range: f64, rng: &mut R) -> MultiPartCloud {
    let mut out = cloud.clone();
    for part in &mut out.parts {
        let rot = random_rotation(rng);
        let t = Vector3::new(
            (rng.gen::<f64>() - 0.5) * 2.0 * range,
            (rng.gen::<f64>() - 0.5) * 2.0 * range,
            (rng.gen::<f64>() - 0.5) * 2.0 * range,
        );
        let com = center_of_mass(&part.points);
        for p in &mut part.points {
            *p = rot * (*p - com) + t;
        }
        if let Some(normals) = &mut part.normals {
            for n in normals {
                *n = rot * *n;
            }
        }
    }
    out.assembled = false;
    out
}

fn flat_labels(labels: &[Vec<bool>]) -> Vec<f64> {
    labels
        .iter()
        .flat_map(|part| part.iter().map(|&b| f64::from(b)))
        .collect()
}

/// Loss and per-parameter gradients for one (possibly augmented) cloud.
fn sample_grads(
    params: &ParamSet,
    cloud: &MultiPartCloud,
    labels: &[f64],
) -> (f64, Vec<Array2<f64>>) {
    let (x, segments) = cloud_inputs(cloud);
    let mut tape = Tape::new();
    let pvars: Vec<Var> = params.tensors().iter().map(|t| tape.leaf(t.clone())).collect();
    let input = tape.leaf(x);
    let (_, logits) = forward_on_tape(&mut tape, params, &pvars, input, &segments);
    let loss = tape.bce_with_logits(logits, labels);
    let value = tape.value(loss)[(0, 0)];
    let grads = tape.backward(loss);
    let pgrads = pvars.iter().map(|v| Tape::grad_of(&grads, *v).clone()).collect();
    (value, pgrads)
}

/// Pretrains the encoder + head; returns frozen params and the loss log.
pub fn pretrain(config: &PretrainConfig, dataset: &[Sample]) -> Result<(ParamSet, Vec<f64>)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptySet("pretrain on empty dataset".into()));
    }
    // labels are fixed by the assembled geometry, so compute them once
    let labels: Vec<Vec<f64>> = dataset
        .iter()
        .map(|s| {
            let eps = config.epsilon_rel * object_scale(&s.assembled);
            Ok(flat_labels(&overlap_labels(&s.assembled, eps)?))
        })
        .collect::<Result<_>>()?;

    let mut params = encoder_init(config.feature_dim, derive_seed(config.seed, 0));
    let mut opt = crate::nn::AdamW::new(&params, config.learning_rate, 1e-4);
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(config.seed, 1));
    let mut log = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        // choose samples and per-sample augmentation seeds up front so the
        // parallel section stays deterministic
        let picks: Vec<(usize, u64)> = (0..config.batch_size)
            .map(|_| (rng.gen_range(0..dataset.len()), rng.gen::<u64>()))
            .collect();
        let results: Vec<(f64, Vec<Array2<f64>>)> = picks
            .par_iter()
            .map(|&(idx, aug_seed)| {
                let sample = &dataset[idx];
                let cloud = if config.augment {
                    let mut arng = ChaCha12Rng::seed_from_u64(aug_seed);
                    augment_cloud(&sample.assembled, config.translation_range, &mut arng)
                } else {
                    sample.assembled.clone()
                };
                sample_grads(&params, &cloud, &labels[idx])
            })
            .collect();

        let scale = 1.0 / config.batch_size as f64;
        let mut loss = 0.0;
        let mut grads: Vec<Array2<f64>> = params
            .tensors()
            .iter()
            .map(|t| Array2::zeros(t.dim()))
            .collect();
        for (l, g) in &results {
            loss += l * scale;
            for (acc, gi) in grads.iter_mut().zip(g) {
                acc.scaled_add(scale, gi);
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                msg: format!("pretrain loss {loss}"),
            });
        }
        opt.step(&mut params, &grads);
        log.push(loss);
    }
    params.validate_finite()?;
    Ok((params, log))
}

/// ROC-AUC via the rank statistic; ties get the midrank.
pub fn roc_auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::ShapeMismatch("scores/labels mismatch or empty".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = midrank;
        }
        i = j + 1;
    }
    let pos = labels.iter().filter(|&&y| y > 0.5).count() as f64;
    let neg = labels.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return Err(Error::EmptySet("roc_auc needs both classes".into()));
    }
    let rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y > 0.5)
        .map(|(r, _)| *r)
        .sum();
    Ok((rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg))
}
