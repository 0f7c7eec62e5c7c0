//! Loss evaluation from tensor blobs.
//!
//! The input is a JSON manifest next to its blobs:
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "batch": 2, "seq": 3, "hidden": 4,
//!   "padding": [false, false, true, false, false, true],
//!   "layers": [{ "student": "s0.bin", "teacher": "t0.bin", "pruned": false }],
//!   "logits": { "student": "ls.bin", "teacher": "lt.bin", "classes": 5 },
//!   "task_loss": 0.7
//! }
//! ```
//!
//! Hidden-state blobs are `batch·seq × hidden` binary32 matrices; logits are
//! `batch × classes`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use zipkit::distill::{combined_loss, logit_kl, token_loss, LayerPair, LossWeights, PaddingMask, TokenTensor};
use zipkit::store::read_blob;
use zipkit::{Error, Result};

#[derive(Deserialize)]
struct LayerFiles {
    student: String,
    teacher: String,
    #[serde(default)]
    pruned: bool,
}

#[derive(Deserialize)]
struct LogitFiles {
    student: String,
    teacher: String,
    classes: usize,
}

#[derive(Deserialize)]
struct EvalManifest {
    format_version: u32,
    batch: usize,
    seq: usize,
    hidden: usize,
    #[serde(default)]
    padding: Option<Vec<bool>>,
    #[serde(default)]
    layers: Vec<LayerFiles>,
    #[serde(default)]
    logits: Option<LogitFiles>,
    #[serde(default)]
    task_loss: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub task: f64,
    pub logit: f64,
    pub token: f64,
    pub weights: LossWeights,
    pub temperature: f64,
    pub combined: f64,
}

fn tensor(dir: &Path, blob: &str, m: &EvalManifest) -> Result<TokenTensor> {
    let rows = m.batch * m.seq;
    let data = read_blob(dir, blob, blob, rows, m.hidden)?;
    // blob is row-major (token, hidden), which is the tensor's own layout
    let values = (0..rows)
        .flat_map(|r| (0..m.hidden).map(move |c| (r, c)))
        .map(|(r, c)| f64::from(data[(r, c)]))
        .collect();
    TokenTensor::new(m.batch, m.seq, m.hidden, values)
}

fn logit_rows(dir: &Path, blob: &str, rows: usize, classes: usize) -> Result<Vec<Vec<f64>>> {
    let data = read_blob(dir, blob, blob, rows, classes)?;
    Ok((0..rows)
        .map(|r| data.row(r).iter().map(|&v| f64::from(v)).collect())
        .collect())
}

pub fn evaluate(path: &Path, weights: LossWeights, temperature: f64) -> Result<EvalReport> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let m: EvalManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    if m.format_version != 1 {
        return Err(Error::VersionMismatch {
            found: m.format_version,
            expected: 1,
        });
    }
    let mask = match &m.padding {
        Some(p) => PaddingMask::new(m.batch, m.seq, p.clone())?,
        None => PaddingMask::none(m.batch, m.seq),
    };
    let token = if m.layers.is_empty() {
        0.0
    } else {
        let pairs = m
            .layers
            .iter()
            .map(|l| {
                Ok(LayerPair {
                    student: tensor(dir, &l.student, &m)?,
                    teacher: tensor(dir, &l.teacher, &m)?,
                    pruned: l.pruned,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        token_loss(&pairs, &mask)?
    };
    let logit = match &m.logits {
        Some(l) => logit_kl(
            &logit_rows(dir, &l.student, m.batch, l.classes)?,
            &logit_rows(dir, &l.teacher, m.batch, l.classes)?,
            temperature,
        )?,
        None => 0.0,
    };
    let task = m.task_loss.unwrap_or(0.0);
    let combined = combined_loss(task, logit, token, &weights)?;
    Ok(EvalReport {
        task,
        logit,
        token,
        weights,
        temperature,
        combined,
    })
}
