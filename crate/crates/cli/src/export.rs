use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sketchlab::metrics::AccSummary;
use sketchlab::otf::OtfEval;

use crate::error::{CliError, Result};

pub const EVAL_FILE: &str = "evaluations.jsonl";
pub const CSV_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const COLUMNS: [&str; 7] = ["tag", "Acc@1", "Acc@5", "Acc@10", "m@A", "m@B", "backlash"];

/// One evaluation recorded by a run. Absent metrics stay `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub tag: String,
    pub acc1: Option<f64>,
    pub acc5: Option<f64>,
    pub acc10: Option<f64>,
    pub m_a: Option<f64>,
    pub m_b: Option<f64>,
    pub backlash: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, f64>,
}

impl Evaluation {
    pub fn new(tag: impl Into<String>) -> Self {
        Self {
            tag: tag.into(),
            ..Default::default()
        }
    }

    pub fn with_acc(mut self, a: &AccSummary) -> Self {
        self.acc1 = Some(a.acc1);
        self.acc5 = Some(a.acc5);
        self.acc10 = Some(a.acc10);
        self
    }

    pub fn from_otf(tag: impl Into<String>, e: &OtfEval) -> Self {
        let mut out = Self::new(tag).with_acc(&e.acc);
        out.m_a = Some(e.m_a);
        out.m_b = Some(e.m_b);
        out.backlash = Some(e.backlash);
        out
    }

    pub fn with_extra(mut self, key: &str, v: f64) -> Self {
        self.extra.insert(key.to_string(), v);
        self
    }

    fn cells(&self) -> [Option<f64>; 6] {
        [self.acc1, self.acc5, self.acc10, self.m_a, self.m_b, self.backlash]
    }
}

pub fn append_evaluation(dir: &Path, e: &Evaluation) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(dir.join(EVAL_FILE))?;
    serde_json::to_writer(&mut f, e)?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn read_evaluations(dir: &Path) -> Result<Vec<Evaluation>> {
    let path = dir.join(EVAL_FILE);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Rounds to six significant digits.
pub fn sig6(v: f64) -> f64 {
    if !v.is_finite() || v == 0.0 {
        return v;
    }
    format!("{v:.5e}").parse().expect("formatted float parses")
}

pub fn format_sig6(v: f64) -> String {
    format!("{}", sig6(v))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub columns: Vec<String>,
    pub evaluations: Vec<Evaluation>,
}

pub struct Exported {
    pub csv: PathBuf,
    pub json: PathBuf,
    pub summary: Summary,
}

/// Writes `metrics.csv` and `summary.json` for a run into `out` (the run
/// directory by default).
pub fn export_metrics(run_dir: &Path, out: Option<&Path>) -> Result<Exported> {
    if !run_dir.is_dir() {
        return Err(CliError::MissingPath {
            key: "run_dir".into(),
            path: run_dir.display().to_string(),
        });
    }
    let out = out.unwrap_or(run_dir);
    std::fs::create_dir_all(out)?;
    let evals = read_evaluations(run_dir)?;

    let csv_path = out.join(CSV_FILE);
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(COLUMNS)?;
    for e in &evals {
        let mut row = vec![e.tag.clone()];
        row.extend(e.cells().iter().map(|c| c.map(format_sig6).unwrap_or_default()));
        w.write_record(&row)?;
    }
    w.flush()?;

    let round = |v: Option<f64>| v.map(sig6);
    let summary = Summary {
        columns: COLUMNS.iter().map(|c| c.to_string()).collect(),
        evaluations: evals
            .iter()
            .map(|e| Evaluation {
                tag: e.tag.clone(),
                acc1: round(e.acc1),
                acc5: round(e.acc5),
                acc10: round(e.acc10),
                m_a: round(e.m_a),
                m_b: round(e.m_b),
                backlash: round(e.backlash),
                extra: e.extra.iter().map(|(k, v)| (k.clone(), sig6(*v))).collect(),
            })
            .collect(),
    };
    let json_path = out.join(SUMMARY_FILE);
    std::fs::write(&json_path, serde_json::to_string_pretty(&summary)?)?;
    Ok(Exported {
        csv: csv_path,
        json: json_path,
        summary,
    })
}
