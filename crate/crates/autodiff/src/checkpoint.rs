//! Parameter checkpoints: one line of JSON header, then raw little-endian
//! `f64` values in header order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AutodiffError, Result};
use crate::param::{Module, Param};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub arch: String,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

pub fn write_params<W: Write>(
    mut w: W,
    arch: &str,
    meta: serde_json::Value,
    params: &[&Param],
) -> Result<()> {
    let header = CheckpointHeader {
        arch: arch.to_string(),
        meta,
        params: params
            .iter()
            .map(|p| ParamEntry {
                name: p.name().to_string(),
                shape: p.shape(),
            })
            .collect(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for p in params {
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads the header and every tensor it lists.
pub fn read_params<R: Read>(r: R) -> Result<(CheckpointHeader, Vec<Tensor>)> {
    let mut r = BufReader::new(r);
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(AutodiffError::Checkpoint("missing header line".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&line[..line.len() - 1])?;
    let mut tensors = Vec::with_capacity(header.params.len());
    let mut buf = [0u8; 8];
    for entry in &header.params {
        let [rows, cols] = entry.shape;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            r.read_exact(&mut buf).map_err(|_| {
                AutodiffError::Checkpoint(format!("truncated data for {}", entry.name))
            })?;
            data.push(f64::from_le_bytes(buf));
        }
        tensors.push(Tensor::new(rows, cols, data)?);
    }
    if r.read(&mut buf)? != 0 {
        return Err(AutodiffError::Checkpoint("trailing bytes after data".into()));
    }
    Ok((header, tensors))
}

pub fn save<M: Module + ?Sized>(path: &Path, arch: &str, meta: serde_json::Value, model: &M) -> Result<()> {
    let f = BufWriter::new(File::create(path)?);
    write_params(f, arch, meta, &model.params())
}

pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let mut r = BufReader::new(File::open(path)?);
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(AutodiffError::Checkpoint("missing header line".into()));
    }
    Ok(serde_json::from_slice(&line[..line.len() - 1])?)
}

/// Loads values into `model`, checking the architecture tag, parameter
/// names and shapes.
pub fn load<M: Module + ?Sized>(path: &Path, arch: &str, model: &mut M) -> Result<CheckpointHeader> {
    let (header, tensors) = read_params(File::open(path)?)?;
    if header.arch != arch {
        return Err(AutodiffError::Checkpoint(format!(
            "expected arch {arch:?}, found {:?}",
            header.arch
        )));
    }
    let params = model.params_mut();
    if params.len() != tensors.len() {
        return Err(AutodiffError::Checkpoint(format!(
            "expected {} parameters, found {}",
            params.len(),
            tensors.len()
        )));
    }
    for ((p, t), e) in params.into_iter().zip(tensors).zip(&header.params) {
        if p.name() != e.name {
            return Err(AutodiffError::Checkpoint(format!(
                "parameter {:?} where {:?} was expected",
                e.name,
                p.name()
            )));
        }
        p.set_value(t)?;
    }
    Ok(header)
}
