//! Dataset files: `sketches.jsonl` plus one `photos/<instance_id>.pgm` per
//! instance, and `dataset.json` with the generator settings.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use sketchlab::sketch::{gen_synthetic_dataset, read_pgm, read_sketch_jsonl, write_pgm, write_sketch_jsonl, SketchRecord, SyntheticInstance};

use crate::config::DataConfig;
use crate::error::{CliError, Result};

pub const SKETCH_FILE: &str = "sketches.jsonl";
pub const PHOTO_DIR: &str = "photos";

pub fn photo_path(dir: &Path, instance_id: u64) -> PathBuf {
    dir.join(PHOTO_DIR).join(format!("{instance_id}.pgm"))
}

pub fn write_dataset(dir: &Path, data: &[SyntheticInstance], meta: &serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(dir.join(PHOTO_DIR))?;
    let records: Vec<SketchRecord> = data
        .iter()
        .map(|i| SketchRecord {
            instance_id: i.instance_id,
            class_id: i.class_id,
            strokes: i.sketch.polylines(),
            noise_mask: i.noise_mask.clone(),
            pseudo: false,
        })
        .collect();
    write_sketch_jsonl(BufWriter::new(File::create(dir.join(SKETCH_FILE))?), &records)?;
    for i in data {
        write_pgm(BufWriter::new(File::create(photo_path(dir, i.instance_id))?), &i.photo)?;
    }
    std::fs::write(dir.join("dataset.json"), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Vec<SyntheticInstance>> {
    let sketches = dir.join(SKETCH_FILE);
    if !sketches.is_file() {
        return Err(CliError::MissingPath {
            key: "data.path".into(),
            path: sketches.display().to_string(),
        });
    }
    let records = read_sketch_jsonl(BufReader::new(File::open(&sketches)?))?;
    records
        .into_iter()
        .map(|r| {
            let p = photo_path(dir, r.instance_id);
            let photo = read_pgm(BufReader::new(File::open(&p).map_err(|_| CliError::MissingPath {
                key: "data.path".into(),
                path: p.display().to_string(),
            })?))?;
            Ok(SyntheticInstance {
                instance_id: r.instance_id,
                class_id: r.class_id,
                photo,
                sketch: r.sketch()?,
                noise_mask: r.noise_mask,
                params: Vec::new(),
            })
        })
        .collect()
}

/// Loads `data.path` when set, otherwise generates from `data.synth`.
pub fn load(cfg: &DataConfig) -> Result<Vec<SyntheticInstance>> {
    match &cfg.path {
        Some(p) if !p.is_dir() => Err(CliError::MissingPath {
            key: "data.path".into(),
            path: p.display().to_string(),
        }),
        Some(p) => read_dataset(p),
        None => Ok(gen_synthetic_dataset(&cfg.synth)?),
    }
}

/// Every fourth instance (`instance_id % 4 == 3`) is held out.
pub fn split(data: &[SyntheticInstance]) -> (Vec<SyntheticInstance>, Vec<SyntheticInstance>) {
    data.iter().cloned().partition(|i| i.instance_id % 4 != 3)
}
