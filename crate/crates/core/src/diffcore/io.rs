//! `CSNT` binary tensor files.
//!
//! Layout: magic `CSNT`, a version byte, a rank byte, little-endian `u32`
//! dims, then the values little-endian. Version 1 stores `f32` values
//! (widened to `f64` on load); version 2 stores `f64` and is used wherever a
//! bit-exact round trip matters, such as model checkpoints.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{CsnError, Result};

pub const MAGIC: &[u8; 4] = b"CSNT";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    fn version(self) -> u8 {
        match self {
            Precision::F32 => 1,
            Precision::F64 => 2,
        }
    }
}

fn format_err(expected: impl Into<String>, found: impl Into<String>) -> CsnError {
    CsnError::Format {
        what: "CSNT tensor".into(),
        expected: expected.into(),
        found: found.into(),
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            format_err(what.to_string(), "end of file")
        } else {
            format_err(what.to_string(), e.to_string())
        }
    })
}

pub fn write_tensor(w: &mut impl Write, t: &Tensor, precision: Precision) -> std::io::Result<()> {
    let rank = u8::try_from(t.rank()).map_err(|_| std::io::Error::other("rank above 255"))?;
    w.write_all(MAGIC)?;
    w.write_all(&[precision.version(), rank])?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| std::io::Error::other("dimension above u32::MAX"))?;
        w.write_all(&d.to_le_bytes())?;
    }
    match precision {
        Precision::F32 => {
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Precision::F64 => {
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let mut head = [0u8; 6];
    read_exact(r, &mut head, "6-byte header")?;
    if &head[..4] != MAGIC {
        return Err(format_err("magic CSNT", format!("{:?}", String::from_utf8_lossy(&head[..4]))));
    }
    let version = head[4];
    if version != 1 && version != 2 {
        return Err(format_err("version 1 or 2", format!("version {version}")));
    }
    let rank = head[5] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 4];
        read_exact(r, &mut b, "dimension")?;
        let d = u32::from_le_bytes(b) as usize;
        if d == 0 {
            return Err(format_err("positive dimension", "0"));
        }
        shape.push(d);
    }
    let numel: usize = shape.iter().product();
    let width = if version == 1 { 4 } else { 8 };
    let mut raw = vec![0u8; numel * width];
    read_exact(r, &mut raw, &format!("{numel} values"))?;
    let data: Vec<f64> = if version == 1 {
        raw.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect()
    } else {
        raw.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect()
    };
    if data.iter().any(|v| !v.is_finite()) {
        return Err(format_err("finite values", "NaN or infinity"));
    }
    Tensor::new(shape, data)
}

pub fn save_csnt(path: impl AsRef<Path>, t: &Tensor, precision: Precision) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| CsnError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_tensor(&mut w, t, precision)
        .and_then(|_| w.flush())
        .map_err(|e| CsnError::io(path, e))
}

pub fn load_csnt(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| CsnError::io(path, e))?;
    read_tensor(&mut BufReader::new(file))
}
