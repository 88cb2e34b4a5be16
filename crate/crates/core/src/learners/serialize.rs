//! `CSNM` model files: magic, version byte, the model spec as
//! length-prefixed config text, then every parameter by name as a `CSNT`
//! tensor (f64, so the round trip is exact).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::model::CsnModel;
use super::spec::ModelSpec;
use crate::diffcore::io::{read_tensor, write_tensor, Precision};
use crate::error::{CsnError, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"CSNM";
pub const MODEL_VERSION: u8 = 1;

fn format_err(expected: impl Into<String>, found: impl Into<String>) -> CsnError {
    CsnError::Format {
        what: "CSNM model".into(),
        expected: expected.into(),
        found: found.into(),
    }
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    let len = u32::try_from(s.len()).map_err(|_| std::io::Error::other("string above u32::MAX bytes"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| format_err(what.to_string(), "end of file"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_str(r: &mut impl Read, what: &str) -> Result<String> {
    let len = read_u32(r, what)? as usize;
    let mut buf = Vec::new();
    r.take(len as u64)
        .read_to_end(&mut buf)
        .map_err(|e| format_err(what.to_string(), e.to_string()))?;
    if buf.len() != len {
        return Err(format_err(format!("{len}-byte {what}"), format!("{} bytes", buf.len())));
    }
    String::from_utf8(buf).map_err(|_| format_err(format!("UTF-8 {what}"), "invalid UTF-8"))
}

pub fn write_model(w: &mut impl Write, model: &CsnModel) -> std::io::Result<()> {
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&[MODEL_VERSION])?;
    write_str(w, &model.spec().to_text())?;
    w.write_all(&(model.store.len() as u32).to_le_bytes())?;
    for (_, p) in model.store.iter() {
        write_str(w, &p.name)?;
        write_tensor(w, &p.value, Precision::F64)?;
    }
    Ok(())
}

/// Reads a whole model. Nothing is returned unless every parameter named by
/// the rebuilt spec was present with the right shape.
pub fn read_model(r: &mut impl Read) -> Result<CsnModel> {
    let mut head = [0u8; 5];
    r.read_exact(&mut head)
        .map_err(|_| format_err("5-byte header", "end of file"))?;
    if &head[..4] != MODEL_MAGIC {
        return Err(format_err("magic CSNM", format!("{:?}", String::from_utf8_lossy(&head[..4]))));
    }
    if head[4] != MODEL_VERSION {
        return Err(format_err(format!("version {MODEL_VERSION}"), format!("version {}", head[4])));
    }
    let text = read_str(r, "model spec")?;
    let spec = ModelSpec::from_text(&text).map_err(|e| format_err("valid model spec", e.to_string()))?;
    let mut model = CsnModel::new(spec, 0)?;
    let count = read_u32(r, "parameter count")? as usize;
    if count != model.store.len() {
        return Err(format_err(
            format!("{} parameters", model.store.len()),
            format!("{count} parameters"),
        ));
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let name = read_str(r, "parameter name")?;
        let id = model
            .store
            .id_of(&name)
            .ok_or_else(|| format_err("a parameter of this architecture", format!("`{name}`")))?;
        let t = read_tensor(r)?;
        let expected = model.store.value(id).shape().to_vec();
        if t.shape() != expected.as_slice() {
            return Err(format_err(
                format!("`{name}` of shape {expected:?}"),
                format!("shape {:?}", t.shape()),
            ));
        }
        if std::mem::replace(&mut seen[id.index()], true) {
            return Err(format_err("each parameter once", format!("`{name}` repeated")));
        }
        model.store.set_value(id, t)?;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| format_err("end of file", e.to_string()))? != 0 {
        return Err(format_err("end of file", "trailing bytes"));
    }
    Ok(model)
}

pub fn save_model(path: impl AsRef<Path>, model: &CsnModel) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| CsnError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_model(&mut w, model)
        .and_then(|_| w.flush())
        .map_err(|e| CsnError::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<CsnModel> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| CsnError::io(path, e))?;
    read_model(&mut BufReader::new(file))
}
