//! End-to-end stages: Hessians, pruning databases, per-target search and
//! export of compacted models.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::calib::{layer_hessian, Damping, HessianState};
use crate::chain::{compact_layer, Chain, ChainEvaluator};
use crate::error::{Error, Result};
use crate::latency::LatencyTable;
use crate::linalg::{to_f32, to_f64};
use crate::par;
use crate::pruner::{build_database, level_grid, LayerDatabase};
use crate::search::{
    check_targets, coefficient_search, Evaluator, ProxyEvaluator, SearchOutcome, SearchProblem, SearchSettings,
};
use crate::store::{self, BlobRef, CalibrationSet, LayerSpec, Model, FORMAT_VERSION};

/// Column batch used when accumulating Hessians.
pub const HESSIAN_BATCH: usize = 256;
pub const HESSIAN_INDEX: &str = "index.json";
pub const REPORT_VERSION: u32 = 1;

/// Layers that carry a structure group, in model order.
pub fn prunable_layers(model: &Model) -> Vec<&LayerSpec> {
    model.manifest.layers.iter().filter(|l| l.group.is_some()).collect()
}

/// Per-layer target inputs: stored calibration where present, otherwise
/// propagated through the dense chain from the model-level input.
pub fn layer_inputs(model: &Model, calib: &CalibrationSet) -> Result<BTreeMap<String, DMatrix<f32>>> {
    let mut out = BTreeMap::new();
    let mut derived: Option<Vec<nalgebra::DMatrix<f64>>> = None;
    for (i, layer) in model.manifest.layers.iter().enumerate() {
        if layer.group.is_none() {
            continue;
        }
        if let Some(x) = calib.layers.get(&layer.name) {
            out.insert(layer.name.clone(), x.clone());
            continue;
        }
        let Some(input) = &calib.input else {
            return Err(Error::InvalidArgument(format!(
                "no calibration data for layer {} and no model input to derive it from",
                layer.name
            )));
        };
        if derived.is_none() {
            derived = Some(Chain::from_model(model)?.target_inputs(&to_f64(input))?);
        }
        out.insert(layer.name.clone(), to_f32(&derived.as_ref().expect("set above")[i]));
    }
    Ok(out)
}

/// Finalized Hessian per prunable layer, built in parallel.
pub fn calibrate(model: &Model, calib: &CalibrationSet, damping: Damping) -> Result<Vec<(String, HessianState)>> {
    let inputs = layer_inputs(model, calib)?;
    let layers = prunable_layers(model);
    par::try_map_range(layers.len(), |i| {
        let name = &layers[i].name;
        let state = layer_hessian(name, &inputs[name], HESSIAN_BATCH, damping)?;
        Ok((name.clone(), state))
    })
}

#[derive(Serialize, Deserialize)]
struct HessianRecord {
    layer: String,
    dim: usize,
    samples: usize,
    damping: f64,
    inverse: BlobRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gram: Option<BlobRef>,
}

#[derive(Serialize, Deserialize)]
struct HessianIndex {
    format_version: u32,
    layers: Vec<HessianRecord>,
}

/// Writes each inverse (and optionally the raw gram) as a binary32 blob
/// plus an index recording the damping actually used.
pub fn write_hessians(dir: impl AsRef<Path>, states: &[(String, HessianState)], dump_gram: bool) -> Result<()> {
    let dir = dir.as_ref();
    store::ensure_dir(dir)?;
    let mut layers = Vec::with_capacity(states.len());
    for (name, s) in states {
        let inv = s
            .inverse()
            .ok_or_else(|| Error::InvalidArgument(format!("Hessian of {name} is not finalized")))?;
        let blob = format!("hinv.{name}.bin");
        store::write_blob(dir, &blob, &to_f32(inv))?;
        let gram = if dump_gram {
            let g = format!("gram.{name}.bin");
            store::write_blob(dir, &g, &to_f32(s.gram()))?;
            Some(BlobRef {
                blob: g,
                rows: s.dim(),
                cols: s.dim(),
            })
        } else {
            None
        };
        layers.push(HessianRecord {
            layer: name.clone(),
            dim: s.dim(),
            samples: s.samples_seen(),
            damping: s.damping().unwrap_or(0.0),
            inverse: BlobRef {
                blob,
                rows: s.dim(),
                cols: s.dim(),
            },
            gram,
        });
    }
    store::write_json(
        &dir.join(HESSIAN_INDEX),
        &HessianIndex {
            format_version: FORMAT_VERSION,
            layers,
        },
    )
}

/// One database per prunable layer over its full level grid. Layers are
/// processed in parallel; the result is in model order.
pub fn build_databases(model: &Model, calib: &CalibrationSet, damping: Damping) -> Result<Vec<LayerDatabase>> {
    let inputs = layer_inputs(model, calib)?;
    let layers = prunable_layers(model);
    par::try_map_range(layers.len(), |i| {
        let layer = layers[i];
        let group = layer.group.as_ref().expect("prunable");
        let x = &inputs[&layer.name];
        let hessian = layer_hessian(&layer.name, x, HESSIAN_BATCH, damping)?;
        let w = model.matrix(&group.target_matrix)?;
        let grid = level_grid(group.kind, group.len());
        let db = build_database(layer, w, hessian.inverse().expect("finalized"), x, &grid)?;
        log::info!("layer {}: {} levels", layer.name, db.variants.len());
        Ok(db)
    })
}

pub fn save_databases(dir: impl AsRef<Path>, dbs: &[LayerDatabase]) -> Result<()> {
    let dir = dir.as_ref();
    for db in dbs {
        db.save(dir.join(&db.layer))?;
    }
    Ok(())
}

/// Loads `dir/<layer>/` for every prunable layer, checking each still
/// matches the model's structure group.
pub fn load_databases(dir: impl AsRef<Path>, model: &Model) -> Result<Vec<LayerDatabase>> {
    let dir = dir.as_ref();
    prunable_layers(model)
        .into_iter()
        .map(|layer| {
            let db = LayerDatabase::load(dir.join(&layer.name))?;
            if Some(&db.group) != layer.group.as_ref() || db.layer != layer.name {
                return Err(Error::InvalidModel(format!(
                    "database for layer {} does not match the model",
                    layer.name
                )));
            }
            Ok(db)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvaluatorKind {
    Proxy,
    Chain,
}

impl EvaluatorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EvaluatorKind::Proxy => "proxy",
            EvaluatorKind::Chain => "chain",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportLayer {
    pub layer: String,
    pub latency_key: String,
    pub level_index: usize,
    pub kept: usize,
    pub total: usize,
    pub runtime_ms: f64,
    pub prior: f64,
    pub coefficient: f64,
}

/// Outcome of one target. Contains no timing of the search itself, so equal
/// inputs and seed give byte-identical files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub format_version: u32,
    pub target_speedup: f64,
    pub seed: u64,
    pub steps: usize,
    pub mutation_prob: f64,
    pub evaluator: EvaluatorKind,
    pub dense_runtime_ms: f64,
    pub time_budget_ms: f64,
    pub runtime_ms: f64,
    /// `None` when every layer was dropped.
    pub speedup: Option<f64>,
    pub loss: f64,
    pub layers: Vec<ReportLayer>,
    pub trace_len: usize,
    pub accepted_steps: usize,
    pub evaluations: usize,
}

impl SearchReport {
    pub fn new(
        problem: &SearchProblem,
        dbs: &[LayerDatabase],
        outcome: &SearchOutcome,
        settings: &SearchSettings,
        evaluator: EvaluatorKind,
    ) -> Self {
        let best = &outcome.best;
        let layers = problem
            .groups
            .iter()
            .zip(dbs)
            .zip(&best.levels)
            .zip(&outcome.coefficients)
            .map(|(((g, db), &l), &c)| ReportLayer {
                layer: g.name.clone(),
                latency_key: db.latency_key.clone(),
                level_index: l,
                kept: g.levels[l].kept,
                total: db.group.len(),
                runtime_ms: g.levels[l].runtime_ms,
                prior: g.levels[l].prior,
                coefficient: c,
            })
            .collect();
        SearchReport {
            format_version: REPORT_VERSION,
            target_speedup: outcome.budget.target_speedup,
            seed: settings.seed,
            steps: settings.steps,
            mutation_prob: settings.mutation_prob,
            evaluator,
            dense_runtime_ms: problem.dense_runtime_ms,
            time_budget_ms: outcome.budget.time_budget_ms,
            runtime_ms: best.runtime_ms,
            speedup: (!best.speedup.unbounded).then_some(best.speedup.speedup),
            loss: best.loss,
            layers,
            trace_len: outcome.trace.len(),
            accepted_steps: outcome.trace.iter().filter(|t| t.accepted).count(),
            evaluations: outcome.evaluations,
        }
    }

    pub fn levels(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.level_index).collect()
    }

    pub fn meets_target(&self) -> bool {
        self.runtime_ms <= self.time_budget_ms
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let r: SearchReport = store::read_json(path.as_ref())?;
        if r.format_version != REPORT_VERSION {
            return Err(Error::VersionMismatch {
                found: r.format_version,
                expected: REPORT_VERSION,
            });
        }
        Ok(r)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        store::write_json(path.as_ref(), self)
    }

    /// File name used for this target inside a report directory.
    pub fn file_name(&self) -> String {
        format!("search_{}x.json", self.target_speedup)
    }
}

/// Searches every target with the selected evaluator.
#[allow(clippy::too_many_arguments)]
pub fn run_search(
    model: &Model,
    calib: Option<&CalibrationSet>,
    dbs: &[LayerDatabase],
    table: &LatencyTable,
    targets: &[f64],
    settings: &SearchSettings,
    kind: EvaluatorKind,
    interpolate: bool,
) -> Result<Vec<SearchReport>> {
    check_targets(targets)?;
    let problem = SearchProblem::from_databases(dbs, table, interpolate)?;
    let chain;
    let proxy = ProxyEvaluator { problem: &problem };
    let evaluator: &dyn Evaluator = match kind {
        EvaluatorKind::Proxy => &proxy,
        EvaluatorKind::Chain => {
            let input = calib.and_then(|c| c.input.as_ref()).ok_or_else(|| {
                Error::InvalidArgument("the chain evaluator needs model-level calibration input".into())
            })?;
            chain = ChainEvaluator::new(model, dbs, input)?;
            &chain
        }
    };
    targets
        .iter()
        .map(|&t| {
            let outcome = coefficient_search(&problem, evaluator, t, settings)?;
            let report = SearchReport::new(&problem, dbs, &outcome, settings, kind);
            log::info!(
                "target {t}x: runtime {:.4} ms (budget {:.4}), loss {:e}",
                report.runtime_ms,
                report.time_budget_ms,
                report.loss
            );
            Ok(report)
        })
        .collect()
}

fn level_of<'a>(
    dbs: &'a [LayerDatabase],
    report: &SearchReport,
    layer: &str,
) -> Result<Option<(&'a LayerDatabase, usize)>> {
    let Some(db) = dbs.iter().find(|d| d.layer == layer) else {
        return Ok(None);
    };
    let entry = report
        .layers
        .iter()
        .find(|l| l.layer == layer)
        .ok_or_else(|| Error::InvalidArgument(format!("report has no entry for layer {layer}")))?;
    let v = db
        .variants
        .get(entry.level_index)
        .ok_or_else(|| Error::InvalidArgument(format!("layer {layer}: level {} not in database", entry.level_index)))?;
    if v.kept_structures != entry.kept {
        return Err(Error::InvalidArgument(format!(
            "layer {layer}: report keeps {} structures, database level keeps {}",
            entry.kept, v.kept_structures
        )));
    }
    Ok(Some((db, entry.level_index)))
}

/// Full-size model with each chosen variant's weights in place; pruned
/// columns are zero but nothing is removed.
pub fn masked_model(model: &Model, dbs: &[LayerDatabase], report: &SearchReport) -> Result<Model> {
    let mut out = model.clone();
    for layer in &model.manifest.layers {
        if let Some((db, l)) = level_of(dbs, report, &layer.name)? {
            out.matrices
                .insert(db.group.target_matrix.clone(), to_f32(&db.variants[l].weights));
        }
    }
    Ok(out)
}

/// Physically compacted model for a report. Layers with no structure left
/// are removed, since the residual block then reduces to the identity.
pub fn export(model: &Model, dbs: &[LayerDatabase], report: &SearchReport) -> Result<Model> {
    let mut manifest = model.manifest.clone();
    manifest.layers.clear();
    let mut matrices = BTreeMap::new();
    for layer in &model.manifest.layers {
        let Some((db, l)) = level_of(dbs, report, &layer.name)? else {
            for rec in &layer.matrices {
                matrices.insert(rec.name.clone(), model.matrix(&rec.name)?.clone());
            }
            manifest.layers.push(layer.clone());
            continue;
        };
        let compacted = compact_layer(model, layer, &db.group, &db.variants[l])?;
        if compacted.is_empty() {
            log::debug!("dropping layer {}", layer.name);
            continue;
        }
        let mut spec = layer.clone();
        for (rec, (name, m)) in spec.matrices.iter_mut().zip(compacted.matrices) {
            rec.rows = m.nrows();
            rec.cols = m.ncols();
            matrices.insert(name, m);
        }
        spec.group = Some(compacted.group);
        manifest.layers.push(spec);
    }
    let meta = &mut manifest.metadata;
    meta.insert("zipkit.target_speedup".into(), report.target_speedup.to_string());
    meta.insert("zipkit.seed".into(), report.seed.to_string());
    meta.insert("zipkit.evaluator".into(), report.evaluator.as_str().into());
    meta.insert("zipkit.loss".into(), report.loss.to_string());
    meta.insert("zipkit.estimated_runtime_ms".into(), report.runtime_ms.to_string());
    meta.insert(
        "zipkit.estimated_speedup".into(),
        report.speedup.map_or_else(|| "inf".into(), |s| s.to_string()),
    );
    Model::new(manifest, matrices)
}
