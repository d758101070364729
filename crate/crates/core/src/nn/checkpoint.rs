//! Binary tensor container used by all checkpoints.
//!
//! Layout: ASCII magic line (e.g. `RPFENC 1\n`), then per tensor:
//! u32 name length, name bytes, u32 rank, u32 dims…, little-endian float64
//! payload in row-major order. Tensors run until end of file.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::nn::ParamSet;

pub const MAGIC_ENCODER: &str = "RPFENC 1";
pub const MAGIC_FLOW: &str = "RPFFLOW 1";
pub const MAGIC_NOISE: &str = "RPFNOISE 1";

pub fn write_checkpoint(path: &Path, magic: &str, params: &ParamSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(magic.as_bytes())?;
    w.write_all(b"\n")?;
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&2u32.to_le_bytes())?;
        w.write_all(&(t.nrows() as u32).to_le_bytes())?;
        w.write_all(&(t.ncols() as u32).to_le_bytes())?;
        for v in t.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<Option<u32>> {
    let mut buf = [0u8; 4];
    match r.read_exact(&mut buf) {
        Ok(()) => Ok(Some(u32::from_le_bytes(buf))),
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Ok(None),
        Err(e) => Err(e),
    }
}

pub fn read_checkpoint(path: &Path, expected_magic: &str) -> Result<ParamSet> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = Vec::new();
    loop {
        let mut b = [0u8; 1];
        r.read_exact(&mut b).map_err(|_| {
            Error::ParseError {
                line: 1,
                msg: "missing magic line".into(),
            }
        })?;
        if b[0] == b'\n' {
            break;
        }
        magic.push(b[0]);
        if magic.len() > 32 {
            return Err(Error::ParseError {
                line: 1,
                msg: "magic line too long".into(),
            });
        }
    }
    let magic = String::from_utf8_lossy(&magic).into_owned();
    if magic != expected_magic {
        return Err(Error::VersionMismatch(format!(
            "expected '{expected_magic}', found '{magic}'"
        )));
    }

    let mut params = ParamSet::new();
    while let Some(name_len) = read_u32(&mut r)? {
        let mut name = vec![0u8; name_len as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::ParseError {
            line: 0,
            msg: "tensor name is not UTF-8".into(),
        })?;
        let rank = read_u32(&mut r)?.ok_or_else(|| Error::ParseError {
            line: 0,
            msg: format!("truncated tensor '{name}'"),
        })?;
        if rank != 2 {
            return Err(Error::ParseError {
                line: 0,
                msg: format!("tensor '{name}' has rank {rank}, expected 2"),
            });
        }
        let mut dims = [0usize; 2];
        for d in &mut dims {
            *d = read_u32(&mut r)?.ok_or_else(|| Error::ParseError {
                line: 0,
                msg: format!("truncated dims of '{name}'"),
            })? as usize;
        }
        let mut data = vec![0.0f64; dims[0] * dims[1]];
        let mut buf = [0u8; 8];
        for v in &mut data {
            r.read_exact(&mut buf).map_err(|_| Error::ParseError {
                line: 0,
                msg: format!("truncated payload of '{name}'"),
            })?;
            *v = f64::from_le_bytes(buf);
        }
        let t = Array2::from_shape_vec((dims[0], dims[1]), data).expect("shape just computed");
        params.add(&name, t);
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sample_params() -> ParamSet {
        let mut p = ParamSet::new();
        p.add("layer0.w", array![[1.0, -2.5e-17], [3.0, f64::MIN_POSITIVE]]);
        p.add("layer0.b", array![[0.0, 1.0]]);
        p
    }

    #[test]
    fn roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        let p = sample_params();
        write_checkpoint(&path, MAGIC_ENCODER, &p).unwrap();
        let back = read_checkpoint(&path, MAGIC_ENCODER).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn wrong_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        write_checkpoint(&path, MAGIC_ENCODER, &sample_params()).unwrap();
        assert!(matches!(
            read_checkpoint(&path, MAGIC_FLOW),
            Err(Error::VersionMismatch(_))
        ));
    }

    #[test]
    fn truncated_payload_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        write_checkpoint(&path, MAGIC_ENCODER, &sample_params()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            read_checkpoint(&path, MAGIC_ENCODER),
            Err(Error::ParseError { .. })
        ));
    }
}
