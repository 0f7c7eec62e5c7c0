//! Distillation objectives: per-token hidden-state matching, temperature
//! scaled logit KL, and their weighted combination with a task loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hidden states of shape `batch × seq × hidden`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenTensor {
    batch: usize,
    seq: usize,
    hidden: usize,
    values: Vec<f64>,
}

impl TokenTensor {
    pub fn new(batch: usize, seq: usize, hidden: usize, values: Vec<f64>) -> Result<Self> {
        if batch == 0 || seq == 0 || hidden == 0 {
            return Err(Error::Dimension(format!(
                "token tensor dims must be >= 1, got {batch}x{seq}x{hidden}"
            )));
        }
        if values.len() != batch * seq * hidden {
            return Err(Error::Dimension(format!(
                "{batch}x{seq}x{hidden} tensor needs {} values, got {}",
                batch * seq * hidden,
                values.len()
            )));
        }
        Ok(TokenTensor {
            batch,
            seq,
            hidden,
            values,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.batch, self.seq, self.hidden)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn token(&self, b: usize, s: usize) -> &[f64] {
        let start = (b * self.seq + s) * self.hidden;
        &self.values[start..start + self.hidden]
    }

    pub fn token_mut(&mut self, b: usize, s: usize) -> &mut [f64] {
        let start = (b * self.seq + s) * self.hidden;
        &mut self.values[start..start + self.hidden]
    }
}

/// `true` marks a padding position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddingMask {
    batch: usize,
    seq: usize,
    padded: Vec<bool>,
}

impl PaddingMask {
    pub fn new(batch: usize, seq: usize, padded: Vec<bool>) -> Result<Self> {
        if padded.len() != batch * seq {
            return Err(Error::Dimension(format!(
                "{batch}x{seq} mask needs {} flags, got {}",
                batch * seq,
                padded.len()
            )));
        }
        Ok(PaddingMask { batch, seq, padded })
    }

    pub fn none(batch: usize, seq: usize) -> Self {
        PaddingMask {
            batch,
            seq,
            padded: vec![false; batch * seq],
        }
    }

    pub fn is_padded(&self, b: usize, s: usize) -> bool {
        self.padded[b * self.seq + s]
    }

    pub fn real_tokens(&self) -> usize {
        self.padded.iter().filter(|p| !**p).count()
    }
}

/// Mean Euclidean distance between student and teacher hidden vectors over
/// the non-padding positions.
pub fn token_loss_layer(student: &TokenTensor, teacher: &TokenTensor, mask: &PaddingMask) -> Result<f64> {
    if student.dims() != teacher.dims() {
        return Err(Error::Dimension(format!(
            "student {:?} and teacher {:?} differ in shape",
            student.dims(),
            teacher.dims()
        )));
    }
    let (batch, seq, _) = student.dims();
    if (mask.batch, mask.seq) != (batch, seq) {
        return Err(Error::Dimension(format!(
            "mask is {}x{}, tensors are {batch}x{seq}",
            mask.batch, mask.seq
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for b in 0..batch {
        for s in 0..seq {
            if mask.is_padded(b, s) {
                continue;
            }
            let sq: f64 = student
                .token(b, s)
                .iter()
                .zip(teacher.token(b, s))
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            total += sq.sqrt();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::NoTokens);
    }
    Ok(total / count as f64)
}

/// Student and teacher outputs of one layer. Layers the student dropped
/// entirely are skipped by [`token_loss`].
#[derive(Clone, Debug)]
pub struct LayerPair {
    pub student: TokenTensor,
    pub teacher: TokenTensor,
    pub pruned: bool,
}

/// Mean of [`token_loss_layer`] over the layers that are still present.
pub fn token_loss(layers: &[LayerPair], mask: &PaddingMask) -> Result<f64> {
    let kept: Vec<&LayerPair> = layers.iter().filter(|l| !l.pruned).collect();
    if kept.is_empty() {
        return Err(Error::InvalidArgument(
            "token loss needs at least one unpruned layer".into(),
        ));
    }
    let mut sum = 0.0;
    for l in &kept {
        sum += token_loss_layer(&l.student, &l.teacher, mask)?;
    }
    Ok(sum / kept.len() as f64)
}

fn log_softmax(row: &[f64], t: f64) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v / t));
    let lse = row.iter().map(|v| (v / t - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|v| v / t - lse).collect()
}

/// `T² · KL(softmax(teacher/T) ‖ softmax(student/T))`, averaged over
/// examples. Each row is one example's logits.
pub fn logit_kl(student: &[Vec<f64>], teacher: &[Vec<f64>], temperature: f64) -> Result<f64> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if student.len() != teacher.len() || student.is_empty() {
        return Err(Error::Dimension(format!(
            "logit batches differ or are empty: {} vs {}",
            student.len(),
            teacher.len()
        )));
    }
    let mut total = 0.0;
    for (i, (s, t)) in student.iter().zip(teacher).enumerate() {
        if s.len() != t.len() || s.is_empty() {
            return Err(Error::Dimension(format!(
                "example {i}: {} vs {} classes",
                s.len(),
                t.len()
            )));
        }
        if s.iter().chain(t).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("logits of example {i}")));
        }
        let ls = log_softmax(s, temperature);
        let lt = log_softmax(t, temperature);
        let kl: f64 = lt.iter().zip(&ls).map(|(a, b)| a.exp() * (a - b)).sum();
        // rounding can leave a tiny negative value for near-identical rows
        total += kl.max(0.0);
    }
    Ok(total / student.len() as f64 * temperature * temperature)
}

/// Weights of the task, logit and token terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub task: f64,
    pub logit: f64,
    pub token: f64,
}

impl LossWeights {
    pub fn new(task: f64, logit: f64, token: f64) -> Result<Self> {
        let w = LossWeights { task, logit, token };
        if [task, logit, token].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be finite and >= 0, got {w:?}"
            )));
        }
        Ok(w)
    }

    pub fn glue() -> Self {
        LossWeights {
            task: 0.0,
            logit: 0.5,
            token: 0.5,
        }
    }

    pub fn squad() -> Self {
        LossWeights {
            task: 0.0,
            logit: 1.0,
            token: 0.0,
        }
    }

    pub fn gpt2() -> Self {
        LossWeights {
            task: 1.0,
            logit: 0.0,
            token: 0.0,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "glue" => Some(Self::glue()),
            "squad" => Some(Self::squad()),
            "gpt2" => Some(Self::gpt2()),
            _ => None,
        }
    }
}

pub fn combined_loss(task: f64, logit: f64, token: f64, weights: &LossWeights) -> Result<f64> {
    if [task, logit, token].iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("loss components ({task}, {logit}, {token})")));
    }
    Ok(weights.task * task + weights.logit * logit + weights.token * token)
}
