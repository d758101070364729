//! Text format for multi-part clouds plus the `.pose` sidecar.
//!
//! ```text
//! MPC 1
//! parts <H> assembled <0|1>
//! part <i> n <N_i> anchor <0|1> normals <0|1>
//! x y z [nx ny nz]
//! ...
//! ```
//!
//! Floats are written with 17 significant digits, so a write/read round trip
//! is bit-exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{MultiPartCloud, Part, RigidTransform};

fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_mpc(path: &Path, cloud: &MultiPartCloud) -> Result<()> {
    cloud.validate()?;
    let mut out = String::new();
    out.push_str("MPC 1\n");
    let _ = writeln!(
        out,
        "parts {} assembled {}",
        cloud.num_parts(),
        u8::from(cloud.assembled)
    );
    for part in &cloud.parts {
        let has_normals = part.normals.is_some();
        let _ = writeln!(
            out,
            "part {} n {} anchor {} normals {}",
            part.part_index,
            part.len(),
            u8::from(part.anchor),
            u8::from(has_normals)
        );
        for (j, p) in part.points.iter().enumerate() {
            let _ = write!(out, "{} {} {}", fmt_f64(p.x), fmt_f64(p.y), fmt_f64(p.z));
            if let Some(normals) = &part.normals {
                let n = &normals[j];
                let _ = write!(out, " {} {} {}", fmt_f64(n.x), fmt_f64(n.y), fmt_f64(n.z));
            }
            out.push('\n');
        }
    }
    fs::write(path, out)?;
    Ok(())
}

struct LineReader<'a> {
    lines: std::str::Lines<'a>,
    line_no: usize,
}

impl<'a> LineReader<'a> {
    fn next(&mut self) -> Result<&'a str> {
        self.line_no += 1;
        self.lines.next().ok_or(Error::ParseError {
            line: self.line_no,
            msg: "unexpected end of file".into(),
        })
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::ParseError {
            line: self.line_no,
            msg: msg.into(),
        }
    }
}

fn parse_f64(r: &LineReader, s: &str) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|_| r.err(format!("bad float '{s}'")))
}

fn parse_usize(r: &LineReader, s: &str) -> Result<usize> {
    s.parse::<usize>()
        .map_err(|_| r.err(format!("bad integer '{s}'")))
}

fn parse_flag(r: &LineReader, s: &str) -> Result<bool> {
    match s {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(r.err(format!("bad flag '{s}', expected 0 or 1"))),
    }
}

pub fn read_mpc(path: &Path) -> Result<MultiPartCloud> {
    let text = fs::read_to_string(path)?;
    let mut r = LineReader {
        lines: text.lines(),
        line_no: 0,
    };

    let magic = r.next()?;
    if magic != "MPC 1" {
        if magic.starts_with("MPC") {
            return Err(Error::VersionMismatch(format!(
                "unsupported format version '{magic}'"
            )));
        }
        return Err(r.err("missing 'MPC 1' magic"));
    }

    let header: Vec<&str> = r.next()?.split_whitespace().collect();
    if header.len() != 4 || header[0] != "parts" || header[2] != "assembled" {
        return Err(r.err("expected 'parts <H> assembled <0|1>'"));
    }
    let n_parts = parse_usize(&r, header[1])?;
    let assembled = parse_flag(&r, header[3])?;

    let mut parts = Vec::with_capacity(n_parts);
    for _ in 0..n_parts {
        let h: Vec<&str> = r.next()?.split_whitespace().collect();
        if h.len() != 8 || h[0] != "part" || h[2] != "n" || h[4] != "anchor" || h[6] != "normals" {
            return Err(r.err("expected 'part <i> n <N> anchor <0|1> normals <0|1>'"));
        }
        let part_index = parse_usize(&r, h[1])?;
        let n = parse_usize(&r, h[3])?;
        let anchor = parse_flag(&r, h[5])?;
        let has_normals = parse_flag(&r, h[7])?;

        let mut points = Vec::with_capacity(n);
        let mut normals = has_normals.then(|| Vec::with_capacity(n));
        for _ in 0..n {
            let fields: Vec<&str> = r.next()?.split_whitespace().collect();
            let want = if has_normals { 6 } else { 3 };
            if fields.len() != want {
                return Err(r.err(format!("expected {want} floats, got {}", fields.len())));
            }
            points.push(Vector3::new(
                parse_f64(&r, fields[0])?,
                parse_f64(&r, fields[1])?,
                parse_f64(&r, fields[2])?,
            ));
            if let Some(ns) = normals.as_mut() {
                ns.push(Vector3::new(
                    parse_f64(&r, fields[3])?,
                    parse_f64(&r, fields[4])?,
                    parse_f64(&r, fields[5])?,
                ));
            }
        }
        parts.push(Part {
            points,
            normals,
            part_index,
            anchor,
        });
    }

    MultiPartCloud::new(parts, assembled)
}

/// Writes per-part ground-truth transforms: `i r00 … r22 tx ty tz` per line.
pub fn write_pose(path: &Path, transforms: &[RigidTransform]) -> Result<()> {
    let mut out = String::new();
    for (i, t) in transforms.iter().enumerate() {
        let _ = write!(out, "{i}");
        for row in 0..3 {
            for col in 0..3 {
                let _ = write!(out, " {}", fmt_f64(t.rotation[(row, col)]));
            }
        }
        for k in 0..3 {
            let _ = write!(out, " {}", fmt_f64(t.translation[k]));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_pose(path: &Path) -> Result<Vec<RigidTransform>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let err = |msg: String| Error::ParseError {
            line: line_no + 1,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 13 {
            return Err(err(format!("expected 13 fields, got {}", fields.len())));
        }
        let idx: usize = fields[0]
            .parse()
            .map_err(|_| err(format!("bad part index '{}'", fields[0])))?;
        if idx != out.len() {
            return Err(err(format!("expected part index {}, got {idx}", out.len())));
        }
        let mut vals = [0.0f64; 12];
        for (k, f) in fields[1..].iter().enumerate() {
            vals[k] = f
                .parse()
                .map_err(|_| err(format!("bad float '{f}'")))?;
        }
        out.push(RigidTransform {
            rotation: Matrix3::new(
                vals[0], vals[1], vals[2], vals[3], vals[4], vals[5], vals[6], vals[7], vals[8],
            ),
            translation: Vector3::new(vals[9], vals[10], vals[11]),
        });
    }
    Ok(out)
}
