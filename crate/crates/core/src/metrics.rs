//! Evaluation metrics: pose errors, recall curves, part accuracy, rigidity
//! diagnostics, and whole-dataset evaluation with a TSV report.
//!
//! All lengths are meters internally; the rendered report converts to cm.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::data::{derive_seed, Sample};
use crate::error::{Error, Result};
use crate::flow::{infer, recover_poses, ModelConfig, Prediction};
use crate::geometry::{
    center_of_mass, chamfer_distance, kabsch_solve, rotation_geodesic_deg, RigidTransform,
};
use crate::nn::ParamSet;

/// Overlap-ratio thresholds in meters: 0.1, 0.2, 0.5, 1 and 2 cm.
pub const DEFAULT_TAUS: [f64; 5] = [0.001, 0.002, 0.005, 0.01, 0.02];

/// Part-accuracy Chamfer threshold: 1 cm.
pub const CD_THRESHOLD: f64 = 0.01;

/// Rotation error (geodesic, degrees) and translation error (Euclidean norm
/// of the translation difference; both poses are expected in the anchor
/// frame, which is how `recover_poses` reports them).
pub fn pose_errors(predicted: &RigidTransform, truth: &RigidTransform) -> Result<(f64, f64)> {
    let re = rotation_geodesic_deg(&predicted.rotation, &truth.rotation)?;
    let te = (predicted.translation - truth.translation).norm();
    Ok((re, te))
}

/// Fraction of values strictly below `threshold`.
pub fn recall_at(values: &[f64], threshold: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptySet("recall_at over no values".into()));
    }
    let hits = values.iter().filter(|&&v| v < threshold).count();
    Ok(hits as f64 / values.len() as f64)
}

/// Two-level average: per-object fraction of parts with CD strictly below
/// `threshold`, then the mean of those fractions across objects. Not the
/// same as pooling all parts unless every object has equally many.
pub fn part_accuracy(per_object_cds: &[Vec<f64>], threshold: f64) -> Result<f64> {
    if per_object_cds.is_empty() {
        return Err(Error::EmptySet("part_accuracy over no objects".into()));
    }
    let mut acc = 0.0;
    for cds in per_object_cds {
        acc += recall_at(cds, threshold)?;
    }
    Ok(acc / per_object_cds.len() as f64)
}

/// Object scale D: twice the mean distance from the center of gravity.
pub fn points_scale(points: &[Vector3<f64>]) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::EmptySet("points_scale of empty cloud".into()));
    }
    let com = center_of_mass(points);
    Ok(2.0 * points.iter().map(|p| (p - com).norm()).sum::<f64>() / points.len() as f64)
}

/// Per-part rigidity diagnostics after optimal re-alignment.
#[derive(Debug, Clone)]
pub struct Rigidity {
    pub rmse: f64,
    /// Fraction of residuals strictly below each τ, aligned with the input
    /// τ list.
    pub overlap_ratio: Vec<f64>,
    /// RMSE normalized by the object scale D.
    pub relative_rmse: f64,
    pub d: f64,
}

/// Kabsch-aligns the predicted part onto its index-corresponded ground truth
/// and reports the residual RMSE, overlap ratios at each τ, and the RMSE
/// relative to the scale of `object` (the full ground-truth assembly).
pub fn rigidity_metrics(
    predicted: &[Vector3<f64>],
    truth: &[Vector3<f64>],
    taus: &[f64],
    object: &[Vector3<f64>],
) -> Result<Rigidity> {
    if predicted.len() != truth.len() {
        return Err(Error::ShapeMismatch(format!(
            "rigidity_metrics: {} predicted vs {} truth points",
            predicted.len(),
            truth.len()
        )));
    }
    let align = kabsch_solve(predicted, truth)?;
    let aligned = align.apply_points(predicted);
    let residuals: Vec<f64> = aligned
        .iter()
        .zip(truth)
        .map(|(a, b)| (a - b).norm())
        .collect();
    let rmse = (residuals.iter().map(|r| r * r).sum::<f64>() / residuals.len() as f64).sqrt();
    let d = points_scale(object)?;
    let overlap_ratio = taus
        .iter()
        .map(|&tau| residuals.iter().filter(|&&r| r < tau).count() as f64 / residuals.len() as f64)
        .collect();
    Ok(Rigidity {
        rmse,
        overlap_ratio,
        relative_rmse: rmse / d,
        d,
    })
}

/// One table row: a single part of a single object. Pose and rigidity fields
/// are NaN (and `ok` is false) when Procrustes failed on this part; CD never
/// needs an alignment and is always present.
#[derive(Debug, Clone)]
pub struct PartEval {
    pub part: usize,
    pub anchor: bool,
    pub ok: bool,
    pub re_deg: f64,
    pub te: f64,
    pub cd: f64,
    pub rmse: f64,
    pub relative_rmse: f64,
    pub overlap_ratio: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ObjectEval {
    pub object: usize,
    pub d: f64,
    /// Fraction of this object's parts with CD strictly below the threshold.
    pub part_accuracy: f64,
    pub parts: Vec<PartEval>,
    /// Whole-object failure (inference error); no part rows in that case.
    pub failure: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Aggregate {
    pub objects: usize,
    pub failed_objects: usize,
    /// Pose statistics cover non-anchor parts with successful recovery.
    pub mean_re_deg: f64,
    pub mean_te: f64,
    pub recall_re_5deg: f64,
    pub recall_te_1cm: f64,
    /// Mean per-object part accuracy; failed objects count as 0.
    pub part_accuracy: f64,
    pub mean_cd: f64,
    pub mean_rmse: f64,
    pub mean_relative_rmse: f64,
    pub mean_overlap_ratio: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub taus: Vec<f64>,
    pub cd_threshold: f64,
    pub objects: Vec<ObjectEval>,
    pub aggregate: Aggregate,
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub k_steps: usize,
    pub taus: Vec<f64>,
    pub cd_threshold: f64,
    pub seed: u64,
    /// Fixed starting noise per sample; seeded draws when absent.
    pub noise: Option<Vec<ndarray::Array2<f64>>>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k_steps: 20,
            taus: DEFAULT_TAUS.to_vec(),
            cd_threshold: CD_THRESHOLD,
            seed: 0,
            noise: None,
        }
    }
}

fn rows_as_points(m: &ndarray::Array2<f64>, rows: std::ops::Range<usize>) -> Vec<Vector3<f64>> {
    rows.map(|i| Vector3::new(m[(i, 0)], m[(i, 1)], m[(i, 2)]))
        .collect()
}

/// Scores one prediction against its sample: per-part pose errors, Chamfer
/// distances and rigidity diagnostics, plus the object's part accuracy.
pub fn evaluate_prediction(
    object: usize,
    sample: &Sample,
    pred: &Prediction,
    taus: &[f64],
    cd_threshold: f64,
) -> Result<ObjectEval> {
    let fs = &pred.sample;
    if fs.segments.len() != sample.gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predicted parts vs {} ground-truth poses",
            fs.segments.len(),
            sample.gt.len()
        )));
    }
    // ground truth per part: the condition points carried to their assembled
    // coordinates
    let truth_parts: Vec<Vec<Vector3<f64>>> = fs
        .segments
        .iter()
        .enumerate()
        .map(|(pi, seg)| {
            rows_as_points(&fs.condition, seg.clone())
                .iter()
                .map(|p| sample.gt[pi].apply(p))
                .collect()
        })
        .collect();
    let assembled: Vec<Vector3<f64>> = truth_parts.iter().flatten().copied().collect();
    let d = points_scale(&assembled)?;

    let poses = recover_poses(pred);
    let mut parts = Vec::with_capacity(fs.segments.len());
    let mut cds = Vec::with_capacity(fs.segments.len());
    for (pi, seg) in fs.segments.iter().enumerate() {
        let predicted = rows_as_points(&pred.points, seg.clone());
        // the assembled part is the recovered rigid pose applied to the
        // condition geometry; raw network points only matter for rigidity
        let posed: Vec<Vector3<f64>> = match &poses[pi] {
            Ok(pose) => rows_as_points(&fs.condition, seg.clone())
                .iter()
                .map(|p| pose.apply(p))
                .collect(),
            Err(_) => predicted.clone(),
        };
        let cd = chamfer_distance(&posed, &truth_parts[pi])?;
        cds.push(cd);
        let anchor = fs.anchor_mask[seg.start];
        let scored = poses[pi].as_ref().ok().and_then(|pose| {
            let (re, te) = pose_errors(pose, &sample.gt[pi]).ok()?;
            let rig = rigidity_metrics(&predicted, &truth_parts[pi], taus, &assembled).ok()?;
            Some((re, te, rig))
        });
        parts.push(match scored {
            Some((re_deg, te, rig)) => PartEval {
                part: pi,
                anchor,
                ok: true,
                re_deg,
                te,
                cd,
                rmse: rig.rmse,
                relative_rmse: rig.relative_rmse,
                overlap_ratio: rig.overlap_ratio,
            },
            None => PartEval {
                part: pi,
                anchor,
                ok: false,
                re_deg: f64::NAN,
                te: f64::NAN,
                cd,
                rmse: f64::NAN,
                relative_rmse: f64::NAN,
                overlap_ratio: vec![f64::NAN; taus.len()],
            },
        });
    }
    Ok(ObjectEval {
        object,
        d,
        part_accuracy: recall_at(&cds, cd_threshold)?,
        parts,
        failure: None,
    })
}

/// Fixed-order aggregation over per-object rows.
pub fn aggregate(objects: &[ObjectEval], taus: &[f64]) -> Result<Aggregate> {
    if objects.is_empty() {
        return Err(Error::EmptySet("aggregate over no objects".into()));
    }
    let failed_objects = objects.iter().filter(|o| o.failure.is_some()).count();
    let mut res = Vec::new();
    let mut tes = Vec::new();
    let mut cds = Vec::new();
    let mut rmses = Vec::new();
    let mut rels = Vec::new();
    let mut ors = vec![Vec::new(); taus.len()];
    let mut pa = 0.0;
    for obj in objects {
        pa += obj.part_accuracy * f64::from(obj.failure.is_none());
        for part in &obj.parts {
            cds.push(part.cd);
            if !part.ok {
                continue;
            }
            if !part.anchor {
                res.push(part.re_deg);
                tes.push(part.te);
            }
            rmses.push(part.rmse);
            rels.push(part.relative_rmse);
            for (k, &v) in part.overlap_ratio.iter().enumerate() {
                ors[k].push(v);
            }
        }
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(Aggregate {
        objects: objects.len(),
        failed_objects,
        mean_re_deg: mean(&res),
        mean_te: mean(&tes),
        recall_re_5deg: recall_at(&res, 5.0).unwrap_or(f64::NAN),
        recall_te_1cm: recall_at(&tes, 0.01).unwrap_or(f64::NAN),
        part_accuracy: pa / objects.len() as f64,
        mean_cd: mean(&cds),
        mean_rmse: mean(&rmses),
        mean_relative_rmse: mean(&rels),
        mean_overlap_ratio: ors.iter().map(|v| mean(v)).collect(),
    })
}

/// Runs inference and pose recovery on every sample and scores the results.
/// Per-sample failures are recorded as failed objects, never fatal.
pub fn evaluate_dataset(
    model_config: &ModelConfig,
    flow_params: &ParamSet,
    encoder_params: &ParamSet,
    dataset: &[Sample],
    config: &EvalConfig,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::EmptySet("evaluate_dataset over no samples".into()));
    }
    if let Some(noise) = &config.noise {
        if noise.len() != dataset.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} noise tensors for {} samples",
                noise.len(),
                dataset.len()
            )));
        }
    }
    let objects: Vec<ObjectEval> = dataset
        .par_iter()
        .enumerate()
        .map(|(i, sample)| {
            let run = infer(
                model_config,
                flow_params,
                encoder_params,
                &sample.condition,
                config.k_steps,
                config.noise.as_ref().map(|n| &n[i]),
                derive_seed(config.seed, i as u64),
            )
            .and_then(|pred| {
                evaluate_prediction(i, sample, &pred, &config.taus, config.cd_threshold)
            });
            run.unwrap_or_else(|e| ObjectEval {
                object: i,
                d: f64::NAN,
                part_accuracy: 0.0,
                parts: Vec::new(),
                failure: Some(e.to_string()),
            })
        })
        .collect();
    let aggregate = aggregate(&objects, &config.taus)?;
    Ok(EvalReport {
        taus: config.taus.clone(),
        cd_threshold: config.cd_threshold,
        objects,
        aggregate,
    })
}

const M_TO_CM: f64 = 100.0;

// Display round-trips f64 exactly, so the report can be re-aggregated
// without loss.
fn num(v: f64) -> String {
    format!("{v}")
}

/// Tab-separated report: one row per (object, part), lengths in cm, then an
/// aggregate block after the `#AGGREGATE` sentinel.
pub fn render_report(report: &EvalReport) -> String {
    let mut out = String::new();
    let tau_label = |tau: f64| format!("or_{}cm", tau * M_TO_CM);
    let mut cols = vec![
        "object".into(),
        "part".into(),
        "anchor".into(),
        "status".into(),
        "re_deg".into(),
        "te_cm".into(),
        "cd_cm".into(),
        "rmse_cm".into(),
        "rel_rmse".into(),
    ];
    cols.extend(report.taus.iter().map(|&t| tau_label(t)));
    cols.push("d_cm".into());
    cols.push("part_acc".into());
    out.push_str(&cols.join("\t"));
    out.push('\n');
    for obj in &report.objects {
        if let Some(msg) = &obj.failure {
            out.push_str(&format!("#FAILED\t{}\t{}\n", obj.object, msg.replace('\n', " ")));
            continue;
        }
        for part in &obj.parts {
            let mut row = vec![
                obj.object.to_string(),
                part.part.to_string(),
                u8::from(part.anchor).to_string(),
                if part.ok { "ok" } else { "degenerate" }.to_string(),
                num(part.re_deg),
                num(part.te * M_TO_CM),
                num(part.cd * M_TO_CM),
                num(part.rmse * M_TO_CM),
                num(part.relative_rmse),
            ];
            row.extend(part.overlap_ratio.iter().map(|&v| num(v)));
            row.push(num(obj.d * M_TO_CM));
            row.push(num(obj.part_accuracy));
            out.push_str(&row.join("\t"));
            out.push('\n');
        }
    }
    out.push_str("#AGGREGATE\n");
    let agg = &report.aggregate;
    let mut lines: Vec<(String, String)> = vec![
        ("objects".into(), agg.objects.to_string()),
        ("failed_objects".into(), agg.failed_objects.to_string()),
        ("cd_threshold_cm".into(), num(report.cd_threshold * M_TO_CM)),
        ("mean_re_deg".into(), num(agg.mean_re_deg)),
        ("mean_te_cm".into(), num(agg.mean_te * M_TO_CM)),
        ("recall_re_5deg".into(), num(agg.recall_re_5deg)),
        ("recall_te_1cm".into(), num(agg.recall_te_1cm)),
        ("part_accuracy".into(), num(agg.part_accuracy)),
        ("mean_cd_cm".into(), num(agg.mean_cd * M_TO_CM)),
        ("mean_rmse_cm".into(), num(agg.mean_rmse * M_TO_CM)),
        ("mean_rel_rmse".into(), num(agg.mean_relative_rmse)),
    ];
    for (k, &tau) in report.taus.iter().enumerate() {
        lines.push((
            format!("mean_{}", tau_label(tau)),
            num(agg.mean_overlap_ratio[k]),
        ));
    }
    for (k, v) in lines {
        out.push_str(&format!("{k}\t{v}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, DatasetSpec, PartitionScheme, Task};
    use crate::flow::{flow_init, inference_sample};
    use crate::geometry::{axis_angle, gaussian, random_direction, random_rotation};
    use nalgebra::Matrix3;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn pose_errors_identical_zero() {
        let t = RigidTransform {
            rotation: axis_angle(&Vector3::y(), 0.3),
            translation: Vector3::new(1.0, 2.0, 3.0),
        };
        let (re, te) = pose_errors(&t, &t).unwrap();
        assert_eq!(te, 0.0);
        assert!(re < 1e-12);
    }

    #[test]
    fn pose_errors_five_degrees_one_cm() {
        let truth = RigidTransform::identity();
        let predicted = RigidTransform {
            rotation: axis_angle(&Vector3::z(), 5f64.to_radians()),
            translation: Vector3::new(0.01, 0.0, 0.0),
        };
        let (re, te) = pose_errors(&predicted, &truth).unwrap();
        assert!((re - 5.0).abs() < 1e-9, "RE {re}");
        assert!((te - 0.01).abs() < 1e-15, "TE {te}");
    }

    // quaternion-based angle oracle (Shepperd extraction, atan2 form)
    fn quat_angle_deg(ra: &Matrix3<f64>, rb: &Matrix3<f64>) -> f64 {
        let m = ra.transpose() * rb;
        let tr = m.trace();
        let (w, x, y, z);
        if tr > 0.0 {
            let s = (tr + 1.0).sqrt() * 2.0;
            w = 0.25 * s;
            x = (m[(2, 1)] - m[(1, 2)]) / s;
            y = (m[(0, 2)] - m[(2, 0)]) / s;
            z = (m[(1, 0)] - m[(0, 1)]) / s;
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            w = (m[(2, 1)] - m[(1, 2)]) / s;
            x = 0.25 * s;
            y = (m[(0, 1)] + m[(1, 0)]) / s;
            z = (m[(0, 2)] + m[(2, 0)]) / s;
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            w = (m[(0, 2)] - m[(2, 0)]) / s;
            x = (m[(0, 1)] + m[(1, 0)]) / s;
            y = 0.25 * s;
            z = (m[(1, 2)] + m[(2, 1)]) / s;
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            w = (m[(1, 0)] - m[(0, 1)]) / s;
            x = (m[(0, 2)] + m[(2, 0)]) / s;
            y = (m[(1, 2)] + m[(2, 1)]) / s;
            z = 0.25 * s;
        }
        let v = (x * x + y * y + z * z).sqrt();
        (2.0 * v.atan2(w.abs())).to_degrees()
    }

    #[test]
    fn pose_errors_match_quaternion_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for _ in 0..200 {
            let a = RigidTransform {
                rotation: random_rotation(&mut rng),
                translation: Vector3::new(gaussian(&mut rng), gaussian(&mut rng), gaussian(&mut rng)),
            };
            let b = RigidTransform {
                rotation: random_rotation(&mut rng),
                translation: Vector3::new(gaussian(&mut rng), gaussian(&mut rng), gaussian(&mut rng)),
            };
            let (re, te) = pose_errors(&a, &b).unwrap();
            let oracle_re = quat_angle_deg(&a.rotation, &b.rotation);
            let oracle_te = ((a.translation.x - b.translation.x).powi(2)
                + (a.translation.y - b.translation.y).powi(2)
                + (a.translation.z - b.translation.z).powi(2))
            .sqrt();
            assert!((re - oracle_re).abs() < 1e-9, "{re} vs {oracle_re}");
            assert!((te - oracle_te).abs() < 1e-12);
        }
    }

    #[test]
    fn recall_examples_and_counting_oracle() {
        assert_eq!(recall_at(&[0.0, 0.0, 0.0], 0.1).unwrap(), 1.0);
        assert_eq!(recall_at(&[3.0, 7.0], 5.0).unwrap(), 0.5);
        // strict inequality: the threshold itself does not count
        assert_eq!(recall_at(&[5.0, 4.0], 5.0).unwrap(), 0.5);
        assert!(recall_at(&[], 1.0).is_err());

        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let values: Vec<f64> = (0..1000).map(|_| rng.gen::<f64>() * 10.0).collect();
        for &th in &[0.0, 1.0, 5.0, 9.99] {
            let mut count = 0usize;
            for &v in &values {
                if v < th {
                    count += 1;
                }
            }
            let expected = count as f64 / values.len() as f64;
            assert_eq!(recall_at(&values, th).unwrap(), expected);
        }
    }

    #[test]
    fn part_accuracy_two_level_average() {
        assert_eq!(part_accuracy(&[vec![0.0; 4]], 0.01).unwrap(), 1.0);
        // object A: {0.5, 2} cm, object B: {0.2} cm at 1 cm
        let groups = vec![vec![0.005, 0.02], vec![0.002]];
        assert_eq!(part_accuracy(&groups, 0.01).unwrap(), 0.75);
        // flat pooling would say 2/3 — the two-level average differs when
        // part counts differ
        let flat = recall_at(&[0.005, 0.02, 0.002], 0.01).unwrap();
        assert!((flat - 2.0 / 3.0).abs() < 1e-15);
        assert_ne!(part_accuracy(&groups, 0.01).unwrap(), flat);
    }

    proptest! {
        #[test]
        fn part_accuracy_bounded_and_monotone(
            groups in prop::collection::vec(prop::collection::vec(0.0..0.1f64, 1..6), 1..6),
            lo in 0.0..0.05f64,
            gap in 0.0..0.05f64,
        ) {
            let a = part_accuracy(&groups, lo).unwrap();
            let b = part_accuracy(&groups, lo + gap).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!(a <= b, "lower threshold cannot raise accuracy");
        }

        #[test]
        fn recall_matches_complement_count(values in prop::collection::vec(0.0..1.0f64, 1..50), th in 0.0..1.0f64) {
            let below = recall_at(&values, th).unwrap();
            let at_or_above = values.iter().filter(|&&v| v >= th).count() as f64 / values.len() as f64;
            prop_assert!((below + at_or_above - 1.0).abs() < 1e-15);
        }
    }

    fn noisy_pair(
        n: usize,
        sigma: f64,
        rng: &mut ChaCha12Rng,
    ) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
        let truth: Vec<Vector3<f64>> = (0..n)
            .map(|_| Vector3::new(gaussian(rng), gaussian(rng), gaussian(rng)) * 0.1)
            .collect();
        let motion = RigidTransform {
            rotation: random_rotation(rng),
            translation: Vector3::new(0.4, -0.2, 0.1),
        };
        let predicted: Vec<Vector3<f64>> = truth
            .iter()
            .map(|p| motion.apply(p) + random_direction(rng) * sigma)
            .collect();
        (predicted, truth)
    }

    #[test]
    fn rigid_motion_gives_zero_rmse_full_overlap() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let (predicted, truth) = noisy_pair(64, 0.0, &mut rng);
        let rig = rigidity_metrics(&predicted, &truth, &DEFAULT_TAUS, &truth).unwrap();
        assert!(rig.rmse < 1e-12, "RMSE {}", rig.rmse);
        assert!(rig.overlap_ratio.iter().all(|&v| v == 1.0));
        assert!(rig.relative_rmse < 1e-11);
    }

    #[test]
    fn unit_sphere_scale_is_two() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        // antipodal pairs put the center of gravity exactly at the origin
        let mut pts = Vec::new();
        for _ in 0..1000 {
            let dir = random_direction(&mut rng);
            pts.push(dir);
            pts.push(-dir);
        }
        let d = points_scale(&pts).unwrap();
        assert!((d - 2.0).abs() < 1e-9, "D = {d}");
    }

    #[test]
    fn rigidity_matches_bruteforce_reference() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let (predicted, truth) = noisy_pair(100, 0.001, &mut rng);
        let rig = rigidity_metrics(&predicted, &truth, &DEFAULT_TAUS, &truth).unwrap();

        // reference: align via nalgebra SVD of the cross-covariance directly
        let cp = center_of_mass(&predicted);
        let ct = center_of_mass(&truth);
        let mut h = Matrix3::zeros();
        for (p, t) in predicted.iter().zip(&truth) {
            h += (t - ct) * (p - cp).transpose();
        }
        let svd = h.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut s = Matrix3::identity();
        if (u * vt).determinant() < 0.0 {
            s[(2, 2)] = -1.0;
        }
        let r = u * s * vt;
        let t = ct - r * cp;
        let residuals: Vec<f64> = predicted
            .iter()
            .zip(&truth)
            .map(|(p, q)| (r * p + t - q).norm())
            .collect();
        let rmse_ref =
            (residuals.iter().map(|x| x * x).sum::<f64>() / residuals.len() as f64).sqrt();
        assert!((rig.rmse - rmse_ref).abs() < 1e-12, "{} vs {rmse_ref}", rig.rmse);
        for (k, &tau) in DEFAULT_TAUS.iter().enumerate() {
            let or_ref =
                residuals.iter().filter(|&&x| x < tau).count() as f64 / residuals.len() as f64;
            assert_eq!(rig.overlap_ratio[k], or_ref, "τ = {tau}");
        }
        let com = center_of_mass(&truth);
        let d_ref = 2.0 * truth.iter().map(|p| (p - com).norm()).sum::<f64>()
            / truth.len() as f64;
        assert!((rig.d - d_ref).abs() < 1e-15);
        assert!((rig.relative_rmse - rmse_ref / d_ref).abs() < 1e-12);
    }

    #[test]
    fn metrics_invariant_under_common_rigid_transform() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        for _ in 0..20 {
            let (predicted, truth) = noisy_pair(50, 0.002, &mut rng);
            let g = RigidTransform {
                rotation: random_rotation(&mut rng),
                translation: Vector3::new(gaussian(&mut rng), gaussian(&mut rng), gaussian(&mut rng)),
            };
            let rig = rigidity_metrics(&predicted, &truth, &DEFAULT_TAUS, &truth).unwrap();
            let gp = g.apply_points(&predicted);
            let gt = g.apply_points(&truth);
            let grig = rigidity_metrics(&gp, &gt, &DEFAULT_TAUS, &gt).unwrap();
            assert!((rig.rmse - grig.rmse).abs() < 1e-9);
            assert!((rig.d - grig.d).abs() < 1e-9);
            assert!((rig.relative_rmse - grig.relative_rmse).abs() < 1e-9);
            assert_eq!(rig.overlap_ratio, grig.overlap_ratio);

            // pose errors under a common left-composed motion
            let a = RigidTransform {
                rotation: random_rotation(&mut rng),
                translation: Vector3::new(0.1, 0.2, 0.3),
            };
            let b = RigidTransform {
                rotation: random_rotation(&mut rng),
                translation: Vector3::new(-0.3, 0.0, 0.5),
            };
            let (re, te) = pose_errors(&a, &b).unwrap();
            let (gre, gte) = pose_errors(&g.compose(&a), &g.compose(&b)).unwrap();
            assert!((re - gre).abs() < 1e-9, "{re} vs {gre}");
            assert!((te - gte).abs() < 1e-9);
        }
    }

    fn toy_dataset(count: usize, seed: u64) -> Vec<Sample> {
        generate(&DatasetSpec {
            task: Task::CylinderAssembly,
            count,
            points_per_part: 24,
            seed,
            scheme: PartitionScheme::Horizontal,
            part_count_range: (2, 3),
        })
        .unwrap()
    }

    fn oracle_prediction(sample: &Sample) -> Prediction {
        let fs = inference_sample(&sample.condition).unwrap();
        let mut points = Array2::zeros((fs.len(), 3));
        for (pi, seg) in fs.segments.iter().enumerate() {
            for i in seg.clone() {
                let c = Vector3::new(fs.condition[(i, 0)], fs.condition[(i, 1)], fs.condition[(i, 2)]);
                let a = sample.gt[pi].apply(&c);
                points[(i, 0)] = a.x;
                points[(i, 1)] = a.y;
                points[(i, 2)] = a.z;
            }
        }
        Prediction { points, sample: fs }
    }

    #[test]
    fn oracle_prediction_scores_perfectly() {
        let dataset = toy_dataset(3, 7);
        let objects: Vec<ObjectEval> = dataset
            .iter()
            .enumerate()
            .map(|(i, s)| {
                evaluate_prediction(i, s, &oracle_prediction(s), &DEFAULT_TAUS, CD_THRESHOLD)
                    .unwrap()
            })
            .collect();
        let agg = aggregate(&objects, &DEFAULT_TAUS).unwrap();
        assert!(agg.mean_re_deg < 1e-7, "RE {}", agg.mean_re_deg);
        assert!(agg.mean_te < 1e-9);
        assert_eq!(agg.part_accuracy, 1.0);
        assert!(agg.mean_cd < 1e-9);
        assert!(agg.mean_rmse < 1e-9);
        assert!(agg.mean_overlap_ratio.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn report_row_count_and_self_consistency() {
        let dataset = toy_dataset(4, 8);
        // untrained network: metrics are poor but the plumbing is exercised
        let mc = ModelConfig {
            blocks: 1,
            hidden: 16,
            heads: 2,
            frequencies: 2,
            encoder_dim: 8,
        };
        let flow = flow_init(&mc, 9).unwrap();
        let enc = crate::encoder::encoder_init(8, 10);
        let config = EvalConfig {
            k_steps: 2,
            seed: 11,
            ..EvalConfig::default()
        };
        let report = evaluate_dataset(&mc, &flow, &enc, &dataset, &config).unwrap();
        assert_eq!(report.objects.len(), dataset.len());
        let total_parts: usize = dataset.iter().map(|s| s.condition.num_parts()).sum();

        let text = render_report(&report);
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap().split('\t').collect();
        assert_eq!(header[0], "object");
        let mut rows = Vec::new();
        let mut agg_lines = std::collections::HashMap::new();
        let mut in_agg = false;
        for line in lines {
            if line == "#AGGREGATE" {
                in_agg = true;
                continue;
            }
            if in_agg {
                let (k, v) = line.split_once('\t').unwrap();
                agg_lines.insert(k.to_string(), v.to_string());
            } else if !line.starts_with('#') {
                rows.push(line.split('\t').map(str::to_string).collect::<Vec<_>>());
            }
        }
        assert_eq!(rows.len(), total_parts);

        // recompute the aggregate from the emitted table (all cm domain)
        let col = |name: &str| header.iter().position(|&h| h == name).unwrap();
        let f = |row: &[String], name: &str| row[col(name)].parse::<f64>().unwrap();
        let mut res = Vec::new();
        let mut cds = Vec::new();
        let mut per_object: std::collections::BTreeMap<usize, f64> = Default::default();
        for row in &rows {
            let anchor = row[col("anchor")] == "1";
            let ok = row[col("status")] == "ok";
            cds.push(f(row, "cd_cm"));
            if ok && !anchor {
                res.push(f(row, "re_deg"));
            }
            per_object.insert(row[col("object")].parse().unwrap(), f(row, "part_acc"));
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let agg_f = |k: &str| agg_lines[k].parse::<f64>().unwrap();
        assert!((agg_f("mean_re_deg") - mean(&res)).abs() < 1e-9 * mean(&res).abs().max(1.0));
        assert!((agg_f("mean_cd_cm") - mean(&cds)).abs() < 1e-9 * mean(&cds).abs().max(1.0));
        let pa = per_object.values().sum::<f64>() / per_object.len() as f64;
        assert!((agg_f("part_accuracy") - pa).abs() < 1e-12);
        assert_eq!(agg_f("objects") as usize, dataset.len());
    }

    #[test]
    fn failed_sample_recorded_not_fatal() {
        let mut dataset = toy_dataset(2, 12);
        // wreck one sample: a NaN condition point makes inference fail
        dataset[1].condition.parts[0].points[0].x = f64::NAN;
        let mc = ModelConfig {
            blocks: 1,
            hidden: 16,
            heads: 2,
            frequencies: 2,
            encoder_dim: 8,
        };
        let flow = flow_init(&mc, 13).unwrap();
        let enc = crate::encoder::encoder_init(8, 14);
        let config = EvalConfig {
            k_steps: 1,
            seed: 15,
            ..EvalConfig::default()
        };
        let report = evaluate_dataset(&mc, &flow, &enc, &dataset, &config).unwrap();
        assert_eq!(report.aggregate.failed_objects, 1);
        assert!(report.objects[1].failure.is_some());
        assert!(report.objects[0].failure.is_none());
        let text = render_report(&report);
        assert!(text.contains("#FAILED\t1"));
    }
}
