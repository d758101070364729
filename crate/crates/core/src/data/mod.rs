//! Synthetic dataset generation and on-disk formats.

pub mod generate;
pub mod mpc;

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub use generate::{
    derive_seed, generate, make_condition, DatasetSpec, PartitionScheme, Sample, SurfacePoint, Task,
};
pub use mpc::{read_mpc, read_pose, write_mpc, write_pose};

fn sample_paths(dir: &Path, idx: usize) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join(format!("sample_{idx:05}.mpc")),
        dir.join(format!("sample_{idx:05}.gt.mpc")),
        dir.join(format!("sample_{idx:05}.pose")),
    )
}

/// Writes a sample as condition cloud, assembled ground truth, and pose sidecar.
pub fn write_sample(dir: &Path, idx: usize, sample: &Sample) -> Result<()> {
    let (cond, gt, pose) = sample_paths(dir, idx);
    write_mpc(&cond, &sample.condition)?;
    write_mpc(&gt, &sample.assembled)?;
    write_pose(&pose, &sample.gt)?;
    Ok(())
}

pub fn read_sample(dir: &Path, idx: usize) -> Result<Sample> {
    let (cond, gt, pose) = sample_paths(dir, idx);
    Ok(Sample {
        condition: read_mpc(&cond)?,
        assembled: read_mpc(&gt)?,
        gt: read_pose(&pose)?,
    })
}

/// Reads `sample_00000.mpc`, `sample_00001.mpc`, … until the sequence stops.
pub fn read_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    loop {
        let (cond, _, _) = sample_paths(dir, out.len());
        if !cond.exists() {
            break;
        }
        out.push(read_sample(dir, out.len())?);
    }
    if out.is_empty() {
        return Err(Error::ConfigError(format!(
            "no samples found in {}",
            dir.display()
        )));
    }
    Ok(out)
}
