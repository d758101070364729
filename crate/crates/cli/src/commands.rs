//! The seven pipeline commands. Each takes a resolved [`RunConfig`], writes
//! its artifacts into the content-addressed output directory, and logs the
//! resolved configuration for provenance.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use rpf_core::data::{
    self, derive_seed, DatasetSpec, PartitionScheme, Sample, Task,
};
use rpf_core::encoder::{self, PretrainConfig};
use rpf_core::flow::{
    draw_noise, infer, inference_sample, interpolate_noise, recover_poses, train, ModelConfig,
    TrainConfig,
};
use rpf_core::geometry::{
    object_scale, rotation_geodesic_deg, MultiPartCloud, Part, RigidTransform,
};
use rpf_core::metrics::{evaluate_dataset, render_report, EvalConfig};
use rpf_core::nn::{
    read_checkpoint, write_checkpoint, ParamSet, MAGIC_ENCODER, MAGIC_FLOW, MAGIC_NOISE,
};
use rpf_core::symmetry::{find_identical_parts, find_stabilizer};
use rpf_core::{Error, Result};

use crate::config::RunConfig;

pub const GEN_DATA_KEYS: &[&str] = &[
    "task", "scheme", "count", "points_per_part", "parts_min", "parts_max", "seed", "out",
    "threads",
];
pub const PRETRAIN_KEYS: &[&str] = &[
    "data", "epsilon_rel", "learning_rate", "steps", "batch_size", "translation_range", "augment",
    "feature_dim", "seed", "out", "threads",
];
pub const TRAIN_KEYS: &[&str] = &[
    "data", "encoder", "learning_rate", "steps", "batch_size", "m_points", "k_steps",
    "time_alpha", "weight_decay", "halve_after", "halve_every", "blocks", "hidden", "heads",
    "frequencies", "seed", "out", "threads",
];
pub const ASSEMBLE_KEYS: &[&str] = &[
    "data", "flow", "model", "encoder", "steps", "noise", "seed", "out", "threads",
];
pub const INTERPOLATE_KEYS: &[&str] = &[
    "data", "index", "flow", "model", "encoder", "noise0", "noise1", "steps", "seed", "out",
    "threads",
];
pub const SYMMETRY_KEYS: &[&str] = &[
    "data", "identical_tol_rel", "stabilizer_tol_rel", "out", "threads",
];
pub const EVALUATE_KEYS: &[&str] = &[
    "data", "flow", "model", "encoder", "steps", "cd_threshold_cm", "noise", "seed", "out",
    "threads",
];

fn log_config(cfg: &RunConfig, dir: &Path) {
    info!("output directory: {}", dir.display());
    for line in cfg.resolved().lines() {
        info!("config: {line}");
    }
}

fn write_losses(dir: &Path, losses: &[f64]) -> Result<()> {
    let mut text = String::new();
    for (step, l) in losses.iter().enumerate() {
        text.push_str(&format!("{step}\t{l}\n"));
    }
    fs::write(dir.join("loss.txt"), text)?;
    Ok(())
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    let dir = cfg.make_out_dir()?;
    log_config(cfg, &dir);
    let spec = DatasetSpec {
        task: Task::parse(&cfg.string("task", "cylinder"))?,
        count: cfg.usize("count", 10)?,
        points_per_part: cfg.usize("points_per_part", 64)?,
        seed: cfg.u64("seed", 0)?,
        scheme: PartitionScheme::parse(&cfg.string("scheme", "horizontal"))?,
        part_count_range: (cfg.usize("parts_min", 2)?, cfg.usize("parts_max", 3)?),
    };
    let samples = data::generate(&spec)?;
    for (i, sample) in samples.iter().enumerate() {
        data::write_sample(&dir, i, sample)?;
    }
    info!("wrote {} samples to {}", samples.len(), dir.display());
    Ok(())
}

pub fn cmd_pretrain(cfg: &RunConfig) -> Result<()> {
    let dir = cfg.make_out_dir()?;
    log_config(cfg, &dir);
    let dataset = data::read_dataset(&cfg.path("data")?)?;
    let defaults = PretrainConfig::default();
    let config = PretrainConfig {
        epsilon_rel: cfg.f64("epsilon_rel", defaults.epsilon_rel)?,
        learning_rate: cfg.f64("learning_rate", defaults.learning_rate)?,
        steps: cfg.usize("steps", defaults.steps)?,
        batch_size: cfg.usize("batch_size", defaults.batch_size)?,
        translation_range: cfg.f64("translation_range", defaults.translation_range)?,
        augment: cfg.bool("augment", defaults.augment)?,
        feature_dim: cfg.usize("feature_dim", defaults.feature_dim)?,
        seed: cfg.u64("seed", 0)?,
    };
    let (params, losses) = encoder::pretrain(&config, &dataset)?;
    write_checkpoint(&dir.join("encoder.ckpt"), MAGIC_ENCODER, &params)?;
    write_losses(&dir, &losses)?;
    info!(
        "pretrained encoder: {} steps, final loss {:.6}",
        losses.len(),
        losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn write_model_config(path: &Path, mc: &ModelConfig) -> Result<()> {
    fs::write(
        path,
        format!(
            "blocks = {}\nhidden = {}\nheads = {}\nfrequencies = {}\nencoder_dim = {}\n",
            mc.blocks, mc.hidden, mc.heads, mc.frequencies, mc.encoder_dim
        ),
    )?;
    Ok(())
}

fn read_model_config(path: &Path) -> Result<ModelConfig> {
    let keys = ["blocks", "hidden", "heads", "frequencies", "encoder_dim"];
    let mut vals = [0usize; 5];
    let text = fs::read_to_string(path)?;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or(Error::ParseError {
            line: lineno + 1,
            msg: "expected 'key = value'".into(),
        })?;
        let idx = keys
            .iter()
            .position(|&n| n == k.trim())
            .ok_or_else(|| Error::ConfigError(format!("unknown model key '{}'", k.trim())))?;
        vals[idx] = v.trim().parse().map_err(|_| Error::ParseError {
            line: lineno + 1,
            msg: format!("'{}' is not an integer", v.trim()),
        })?;
    }
    let mc = ModelConfig {
        blocks: vals[0],
        hidden: vals[1],
        heads: vals[2],
        frequencies: vals[3],
        encoder_dim: vals[4],
    };
    mc.validate()?;
    Ok(mc)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let dir = cfg.make_out_dir()?;
    log_config(cfg, &dir);
    let dataset = data::read_dataset(&cfg.path("data")?)?;
    let encoder_params = read_checkpoint(&cfg.path("encoder")?, MAGIC_ENCODER)?;
    let md = ModelConfig::default();
    let model_config = ModelConfig {
        blocks: cfg.usize("blocks", md.blocks)?,
        hidden: cfg.usize("hidden", md.hidden)?,
        heads: cfg.usize("heads", md.heads)?,
        frequencies: cfg.usize("frequencies", md.frequencies)?,
        encoder_dim: encoder::feature_dim(&encoder_params),
    };
    let td = TrainConfig::default();
    let config = TrainConfig {
        learning_rate: cfg.f64("learning_rate", td.learning_rate)?,
        steps: cfg.usize("steps", td.steps)?,
        batch_size: cfg.usize("batch_size", td.batch_size)?,
        m_points: cfg.usize("m_points", td.m_points)?,
        k_steps: cfg.usize("k_steps", td.k_steps)?,
        time_alpha: cfg.f64("time_alpha", td.time_alpha)?,
        weight_decay: cfg.f64("weight_decay", td.weight_decay)?,
        halve_after: cfg.usize("halve_after", td.halve_after)?,
        halve_every: cfg.usize("halve_every", td.halve_every)?,
        seed: cfg.u64("seed", 0)?,
    };
    let (params, losses) = train(&config, &model_config, &dataset, &encoder_params)?;
    write_checkpoint(&dir.join("flow.ckpt"), MAGIC_FLOW, &params)?;
    write_model_config(&dir.join("model.cfg"), &model_config)?;
    write_losses(&dir, &losses)?;
    info!(
        "trained flow model: {} steps, first loss {:.6}, final loss {:.6}",
        losses.len(),
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

/// Loads the flow checkpoint plus its model config (default: `model.cfg`
/// next to the checkpoint) and the frozen encoder.
fn load_artifacts(cfg: &RunConfig) -> Result<(ModelConfig, ParamSet, ParamSet)> {
    let flow_path = cfg.path("flow")?;
    let model_path = match cfg.get("model") {
        Some(p) => PathBuf::from(p),
        None => flow_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("model.cfg"),
    };
    let model_config = read_model_config(&model_path)?;
    let flow_params = read_checkpoint(&flow_path, MAGIC_FLOW)?;
    let encoder_params = read_checkpoint(&cfg.path("encoder")?, MAGIC_ENCODER)?;
    Ok((model_config, flow_params, encoder_params))
}

/// Rebuilds a multi-part cloud from predicted point rows, preserving the
/// condition cloud's part structure.
fn prediction_cloud(condition: &MultiPartCloud, points: &Array2<f64>) -> MultiPartCloud {
    let mut parts = Vec::with_capacity(condition.num_parts());
    let mut row = 0;
    for part in &condition.parts {
        let pts = (0..part.len())
            .map(|j| {
                let i = row + j;
                nalgebra::Vector3::new(points[(i, 0)], points[(i, 1)], points[(i, 2)])
            })
            .collect();
        row += part.len();
        parts.push(Part {
            points: pts,
            normals: None,
            part_index: part.part_index,
            anchor: part.anchor,
        });
    }
    MultiPartCloud {
        parts,
        assembled: true,
    }
}

fn write_prediction(dir: &Path, stem: &str, sample: &Sample, points: &Array2<f64>) -> Result<()> {
    let cloud = prediction_cloud(&sample.condition, points);
    data::write_mpc(&dir.join(format!("{stem}.mpc")), &cloud)?;
    Ok(())
}

pub fn cmd_assemble(cfg: &RunConfig) -> Result<()> {
    let dir = cfg.make_out_dir()?;
    log_config(cfg, &dir);
    let dataset = data::read_dataset(&cfg.path("data")?)?;
    let (model_config, flow_params, encoder_params) = load_artifacts(cfg)?;
    let k = cfg.usize("steps", 20)?;
    let seed = cfg.u64("seed", 0)?;
    let noise_in: Option<ParamSet> = match cfg.get("noise") {
        Some(p) => Some(read_checkpoint(Path::new(p), MAGIC_NOISE)?),
        None => None,
    };
    let mut noise_used = ParamSet::new();
    for (i, sample) in dataset.iter().enumerate() {
        let name = format!("noise_{i:05}");
        let fs = inference_sample(&sample.condition)?;
        let z = match &noise_in {
            Some(set) => {
                if set.index_of(&name).is_none() {
                    return Err(Error::ConfigError(format!(
                        "noise file has no tensor '{name}'"
                    )));
                }
                set.get(&name).clone()
            }
            None => {
                let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, i as u64));
                draw_noise(&fs, &mut rng)
            }
        };
        let pred = infer(
            &model_config,
            &flow_params,
            &encoder_params,
            &sample.condition,
            k,
            Some(&z),
            0,
        )?;
        noise_used.add(&name, z);
        write_prediction(&dir, &format!("pred_{i:05}"), sample, &pred.points)?;
        let poses: Vec<RigidTransform> = recover_poses(&pred)
            .into_iter()
            .enumerate()
            .map(|(pi, pose)| {
                pose.unwrap_or_else(|e| {
                    warn!("sample {i} part {pi}: pose recovery failed ({e}); writing identity");
                    RigidTransform::identity()
                })
            })
            .collect();
        data::write_pose(&dir.join(format!("pred_{i:05}.pose")), &poses)?;
    }
    write_checkpoint(&dir.join("noise.ckpt"), MAGIC_NOISE, &noise_used)?;
    info!("assembled {} samples with K = {k}", dataset.len());
    Ok(())
}

pub fn cmd_interpolate(cfg: &RunConfig) -> Result<()> {
    let dir = cfg.make_out_dir()?;
    log_config(cfg, &dir);
    let dataset = data::read_dataset(&cfg.path("data")?)?;
    let (model_config, flow_params, encoder_params) = load_artifacts(cfg)?;
    let index = cfg.usize("index", 0)?;
    let k = cfg.usize("steps", 20)?;
    let sample = dataset.get(index).ok_or_else(|| {
        Error::ConfigError(format!(
            "index {index} out of range for {} samples",
            dataset.len()
        ))
    })?;
    let name = format!("noise_{index:05}");
    let load_noise = |key: &str| -> Result<Array2<f64>> {
        let set = read_checkpoint(&cfg.path(key)?, MAGIC_NOISE)?;
        if set.index_of(&name).is_none() {
            return Err(Error::ConfigError(format!(
                "{key} file has no tensor '{name}'"
            )));
        }
        Ok(set.get(&name).clone())
    };
    let z0 = load_noise("noise0")?;
    let z1 = load_noise("noise1")?;
    for s in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let z = interpolate_noise(&z0, &z1, s)?;
        let pred = infer(
            &model_config,
            &flow_params,
            &encoder_params,
            &sample.condition,
            k,
            Some(&z),
            0,
        )?;
        let stem = format!("pred_s{:03}", (s * 100.0).round() as u32);
        write_prediction(&dir, &stem, sample, &pred.points)?;
    }
    info!("interpolated sample {index} at s ∈ {{0, 0.25, 0.5, 0.75, 1}}");
    Ok(())
}

pub fn cmd_symmetry_report(cfg: &RunConfig) -> Result<()> {
    let dir = cfg.make_out_dir()?;
    log_config(cfg, &dir);
    let dataset = data::read_dataset(&cfg.path("data")?)?;
    let identical_rel = cfg.f64("identical_tol_rel", 0.005)?;
    let stabilizer_rel = cfg.f64("stabilizer_tol_rel", 0.01)?;
    let mut out = String::new();
    for (i, sample) in dataset.iter().enumerate() {
        let cloud = &sample.assembled;
        let d = object_scale(cloud);
        let classes = find_identical_parts(cloud, identical_rel * d);
        out.push_str(&format!("object {i} (D = {d:.6} m)\n"));
        for class in &classes {
            let members: Vec<String> = class.iter().map(usize::to_string).collect();
            out.push_str(&format!("  class: [{}]\n", members.join(" ")));
        }
        for part in &cloud.parts {
            let stab = find_stabilizer(&part.points, &[2, 3, 4, 6], stabilizer_rel * d, &[]);
            let angles: Vec<String> = stab
                .iter()
                .skip(1)
                .map(|r| {
                    let a = rotation_geodesic_deg(&nalgebra::Matrix3::identity(), r)
                        .unwrap_or(f64::NAN);
                    format!("{a:.1}°")
                })
                .collect();
            out.push_str(&format!(
                "  part {}: stabilizer order {} [{}]\n",
                part.part_index,
                stab.len(),
                angles.join(" ")
            ));
        }
    }
    fs::write(dir.join("symmetry.txt"), &out)?;
    info!("symmetry report for {} objects", dataset.len());
    Ok(())
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<()> {
    let dir = cfg.make_out_dir()?;
    log_config(cfg, &dir);
    let dataset = data::read_dataset(&cfg.path("data")?)?;
    let (model_config, flow_params, encoder_params) = load_artifacts(cfg)?;
    let noise = match cfg.get("noise") {
        Some(p) => {
            let set = read_checkpoint(Path::new(p), MAGIC_NOISE)?;
            let tensors: Vec<Array2<f64>> = (0..dataset.len())
                .map(|i| {
                    let name = format!("noise_{i:05}");
                    if set.index_of(&name).is_none() {
                        return Err(Error::ConfigError(format!(
                            "noise file has no tensor '{name}'"
                        )));
                    }
                    Ok(set.get(&name).clone())
                })
                .collect::<Result<_>>()?;
            Some(tensors)
        }
        None => None,
    };
    let defaults = EvalConfig::default();
    let config = EvalConfig {
        k_steps: cfg.usize("steps", defaults.k_steps)?,
        cd_threshold: cfg.f64("cd_threshold_cm", defaults.cd_threshold * 100.0)? / 100.0,
        seed: cfg.u64("seed", 0)?,
        noise,
        ..defaults
    };
    let report = evaluate_dataset(
        &model_config,
        &flow_params,
        &encoder_params,
        &dataset,
        &config,
    )?;
    fs::write(dir.join("report.tsv"), render_report(&report))?;
    let agg = &report.aggregate;
    info!(
        "evaluated {} objects ({} failed): part accuracy {:.4}, mean RE {:.3}°, mean CD {:.4} cm",
        agg.objects,
        agg.failed_objects,
        agg.part_accuracy,
        agg.mean_re_deg,
        agg.mean_cd * 100.0
    );
    Ok(())
}
