//! One-shot pruning at several calibration sample budgets.

use serde::Serialize;

use crate::calib::Damping;
use crate::error::Result;
use crate::latency::LatencyTable;
use crate::linalg::to_f64;
use crate::pipeline::{build_databases, run_search, EvaluatorKind};
use crate::pruner::measure_relative_error;
use crate::search::SearchSettings;
use crate::store::{CalibrationSet, Model};

pub const CALIBRATION_BUDGETS: [usize; 5] = [4, 32, 128, 512, 2048];

#[derive(Clone, Debug)]
pub struct SweepOptions {
    pub budgets: Vec<usize>,
    pub target_speedup: f64,
    pub damping: Damping,
    pub settings: SearchSettings,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            budgets: CALIBRATION_BUDGETS.to_vec(),
            target_speedup: 2.0,
            damping: Damping::default(),
            settings: SearchSettings {
                steps: 100,
                ..Default::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub budget: usize,
    pub samples_used: usize,
    /// Σ relative layer error on the samples used for pruning.
    pub in_sample_loss: f64,
    /// Σ relative layer error of the same variants on unseen inputs.
    pub heldout_loss: f64,
    pub runtime_ms: f64,
}

/// Prunes `model` once per budget using the first `budget` calibration
/// samples, then scores the chosen configuration on `heldout`.
pub fn calibration_sweep(
    model: &Model,
    calib: &CalibrationSet,
    heldout: &CalibrationSet,
    table: &LatencyTable,
    opts: &SweepOptions,
) -> Result<Vec<SweepPoint>> {
    let mut points = Vec::with_capacity(opts.budgets.len());
    for &budget in &opts.budgets {
        let subset = calib.truncated(budget);
        let dbs = build_databases(model, &subset, opts.damping)?;
        let report = run_search(
            model,
            Some(&subset),
            &dbs,
            table,
            &[opts.target_speedup],
            &opts.settings,
            EvaluatorKind::Proxy,
            false,
        )?
        .remove(0);
        let mut heldout_loss = 0.0;
        for (db, entry) in dbs.iter().zip(&report.layers) {
            let w = to_f64(model.matrix(&db.group.target_matrix)?);
            let x = to_f64(heldout.layer(&db.layer)?);
            heldout_loss += measure_relative_error(&db.variants[entry.level_index].weights, &w, &x)?;
        }
        log::info!(
            "budget {budget}: in-sample {:.6}, held-out {heldout_loss:.6}",
            report.loss
        );
        points.push(SweepPoint {
            budget,
            samples_used: subset.sample_count,
            in_sample_loss: report.loss,
            heldout_loss,
            runtime_ms: report.runtime_ms,
        });
    }
    Ok(points)
}
