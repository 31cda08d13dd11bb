use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use super::{RasterCanvas, VectorSketch};
use crate::error::{Result, SketchError};

/// One line of a sketch file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SketchRecord {
    pub instance_id: u64,
    pub class_id: usize,
    pub strokes: Vec<Vec<[f64; 2]>>,
    pub noise_mask: Vec<bool>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub pseudo: bool,
}

impl SketchRecord {
    pub fn sketch(&self) -> Result<VectorSketch> {
        VectorSketch::from_polylines(self.strokes.clone())
    }
}

pub fn write_sketch_jsonl<W: Write>(mut w: W, records: &[SketchRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_sketch_jsonl<R: BufRead>(r: R) -> Result<Vec<SketchRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SketchRecord = serde_json::from_str(&line).map_err(|e| SketchError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if rec.noise_mask.len() != rec.strokes.len() {
            return Err(SketchError::Parse {
                line: i + 1,
                msg: "noise_mask length differs from stroke count".into(),
            });
        }
        rec.sketch().map_err(|e| SketchError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Binary 8-bit greyscale PGM.
pub fn write_pgm<W: Write>(mut w: W, canvas: &RasterCanvas) -> Result<()> {
    write!(w, "P5\n{} {}\n255\n", canvas.width(), canvas.height())?;
    let bytes: Vec<u8> = canvas.data().iter().map(|v| (v * 255.0).round() as u8).collect();
    w.write_all(&bytes)?;
    Ok(())
}

pub fn read_pgm<R: Read>(mut r: R) -> Result<RasterCanvas> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let bad = |m: &str| SketchError::InvalidArgument(format!("pgm: {m}"));
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < buf.len() && buf[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < buf.len() && buf[i] == b'#' {
            while i < buf.len() && buf[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < buf.len() && !buf[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&buf[start..i]).to_string());
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary greymap"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if max == 0 || max > 255 {
        return Err(bad("only 8-bit maxval supported"));
    }
    let data = &buf[i + 1..];
    if data.len() != w * h {
        return Err(bad("pixel count mismatch"));
    }
    RasterCanvas::from_data(h, w, data.iter().map(|&b| b as f64 / max as f64).collect())
}
