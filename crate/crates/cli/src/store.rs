//! Named checkpoints inside a run directory.

use std::path::Path;

use autodiff::checkpoint;
use autodiff::Module;
use serde_json::json;
use sketchlab::models::{GaussianPolicyHead, RasterEncoderConfig, StrokeHierEncoder};
use sketchlab::pretext::{PretextConfig, PretextEncoder, PretextTask};
use sketchlab::retrieval::RetrievalModel;
use sketchlab::rng;

use crate::error::{CliError, Result};

pub const RETRIEVAL: &str = "retrieval.ckpt";
pub const SELECTOR: &str = "selector.ckpt";
pub const POLICY: &str = "otf_policy.ckpt";
pub const PRETEXT: &str = "pretext_encoder.ckpt";

fn ckpt_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Checkpoint {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

fn meta<T: serde::de::DeserializeOwned>(path: &Path, header: &checkpoint::CheckpointHeader, key: &str) -> Result<T> {
    serde_json::from_value(header.meta.get(key).cloned().unwrap_or_default()).map_err(|e| ckpt_err(path, format!("meta.{key}: {e}")))
}

fn save<M: Module>(path: &Path, arch: &str, meta: serde_json::Value, m: &M) -> Result<()> {
    checkpoint::save(path, arch, meta, m).map_err(|e| ckpt_err(path, e))
}

fn load_into<M: Module>(path: &Path, arch: &str, m: &mut M) -> Result<()> {
    checkpoint::load(path, arch, m).map(|_| ()).map_err(|e| ckpt_err(path, e))
}

fn header(path: &Path) -> Result<checkpoint::CheckpointHeader> {
    if !path.is_file() {
        return Err(ckpt_err(path, "not found"));
    }
    checkpoint::read_header(path).map_err(|e| ckpt_err(path, e))
}

pub fn save_retrieval(path: &Path, m: &RetrievalModel) -> Result<()> {
    save(path, "retrieval", json!({"encoder": m.sketch.config(), "line_width": m.line_width}), m)
}

pub fn load_retrieval(path: &Path) -> Result<RetrievalModel> {
    let h = header(path)?;
    let enc: RasterEncoderConfig = meta(path, &h, "encoder")?;
    let mut m = RetrievalModel::new(enc, &mut rng::stream(0, &[]));
    m.line_width = meta(path, &h, "line_width")?;
    load_into(path, "retrieval", &mut m)?;
    Ok(m)
}

pub fn save_selector(path: &Path, s: &StrokeHierEncoder) -> Result<()> {
    save(path, "selector", json!({"hidden": s.hidden()}), s)
}

pub fn load_selector(path: &Path) -> Result<StrokeHierEncoder> {
    let h = header(path)?;
    let mut s = StrokeHierEncoder::new("selector", meta(path, &h, "hidden")?, &mut rng::stream(0, &[]));
    load_into(path, "selector", &mut s)?;
    Ok(s)
}

pub fn save_policy(path: &Path, p: &GaussianPolicyHead) -> Result<()> {
    save(path, "otf_policy", json!({"state_dim": p.mu.fan_in(), "dim": p.dim()}), p)
}

pub fn load_policy(path: &Path) -> Result<GaussianPolicyHead> {
    let h = header(path)?;
    let mut p = GaussianPolicyHead::new("otf.policy", meta(path, &h, "state_dim")?, meta(path, &h, "dim")?, &mut rng::stream(0, &[]));
    load_into(path, "otf_policy", &mut p)?;
    Ok(p)
}

pub fn save_pretext(path: &Path, e: &PretextEncoder, task: PretextTask, cfg: &PretextConfig) -> Result<()> {
    save(path, "pretext_encoder", json!({"task": task, "config": cfg}), e)
}

pub fn load_pretext(path: &Path) -> Result<(PretextEncoder, PretextTask, PretextConfig)> {
    let h = header(path)?;
    let task: PretextTask = meta(path, &h, "task")?;
    let cfg: PretextConfig = meta(path, &h, "config")?;
    let mut e = PretextEncoder::new(task, &cfg, &mut rng::stream(0, &[]));
    load_into(path, "pretext_encoder", &mut e)?;
    Ok((e, task, cfg))
}
