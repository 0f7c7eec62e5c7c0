use std::collections::BTreeMap;

use nalgebra::DMatrix;
use zipkit::calib::Damping;
use zipkit::chain::{Chain, ChainEvaluator};
use zipkit::harness::{calibration_sweep, SweepOptions};
use zipkit::latency::{LatencyEntry, LatencyTable};
use zipkit::pipeline::{
    build_databases, export, layer_inputs, load_databases, masked_model, run_search, save_databases, EvaluatorKind,
    SearchReport,
};
use zipkit::pruner::level_grid;
use zipkit::search::{Evaluator, SearchSettings};
use zipkit::store::{CalibrationSet, Model, StructureKind};
use zipkit::synth::{synth_calibration, synth_inputs, synth_model, SynthLayer, SynthSpec};

fn spec() -> SynthSpec {
    SynthSpec {
        hidden: 16,
        layers: vec![
            SynthLayer::Ffn { width: 32 },
            SynthLayer::Heads { heads: 4, head_dim: 4 },
            SynthLayer::Ffn { width: 24 },
        ],
        input_rank: 8,
        noise: 0.05,
        seed: 21,
    }
}

/// Runtime linear in the latency count, with an entry for every grid level.
fn linear_table(model: &Model) -> LatencyTable {
    let mut kinds: BTreeMap<String, Vec<LatencyEntry>> = BTreeMap::new();
    let mut dense = 0.0;
    for l in &model.manifest.layers {
        let g = l.group.as_ref().unwrap();
        let count = |kept: usize| {
            if g.kind == StructureKind::FfnColumns {
                kept * g.structure_width
            } else {
                kept
            }
        };
        let entries = kinds.entry(g.kind.as_str().to_string()).or_default();
        for kept in level_grid(g.kind, g.len()) {
            entries.push(LatencyEntry {
                key: count(kept),
                ms: count(kept) as f64 / 8.0,
            });
        }
        dense += count(g.len()) as f64 / 8.0;
    }
    for v in kinds.values_mut() {
        v.sort_by_key(|e| e.key);
        v.dedup_by_key(|e| e.key);
    }
    LatencyTable::new("linear", dense, kinds).unwrap()
}

fn setup() -> (Model, CalibrationSet, Vec<zipkit::pruner::LayerDatabase>, LatencyTable) {
    let s = spec();
    let model = synth_model(&s).unwrap();
    let calib = synth_calibration(&model, &s, 256, 0).unwrap();
    let dbs = build_databases(&model, &calib, Damping::default()).unwrap();
    let table = linear_table(&model);
    (model, calib, dbs, table)
}

fn params(m: &Model) -> usize {
    m.matrices.values().map(|w| w.len()).sum()
}

fn search(
    model: &Model,
    calib: &CalibrationSet,
    dbs: &[zipkit::pruner::LayerDatabase],
    table: &LatencyTable,
    targets: &[f64],
    kind: EvaluatorKind,
) -> Vec<SearchReport> {
    let settings = SearchSettings {
        steps: 40,
        seed: 3,
        ..Default::default()
    };
    run_search(model, Some(calib), dbs, table, targets, &settings, kind, false).unwrap()
}

#[test]
fn exported_model_matches_masked_model_outputs() {
    let (model, calib, dbs, table) = setup();
    let reports = search(
        &model,
        &calib,
        &dbs,
        &table,
        &[1.0, 1.5, 2.0, 3.0],
        EvaluatorKind::Proxy,
    );
    let x = synth_inputs(&spec(), 64, 99);
    let dense_out = Chain::from_model(&model).unwrap().forward(&x).unwrap();
    let mut last_params = usize::MAX;
    for r in &reports {
        assert!(
            r.meets_target(),
            "{}x: {} > {}",
            r.target_speedup,
            r.runtime_ms,
            r.time_budget_ms
        );
        let masked = masked_model(&model, &dbs, r).unwrap();
        let compact = export(&model, &dbs, r).unwrap();
        let a = Chain::from_model(&masked).unwrap().forward(&x).unwrap();
        let b = Chain::from_model(&compact).unwrap().forward(&x).unwrap();
        let dev = (&a - &b).amax();
        assert!(dev <= 1e-5, "{}x: {dev}", r.target_speedup);
        let p = params(&compact);
        assert!(p <= last_params);
        last_params = p;
        if r.target_speedup == 1.0 {
            assert_eq!(compact.matrices, model.matrices);
            assert_eq!((&b - &dense_out).amax(), 0.0);
        } else {
            assert!(p < params(&model));
        }
        assert_eq!(
            compact.manifest.metadata["zipkit.target_speedup"],
            r.target_speedup.to_string()
        );
    }
}

#[test]
fn exported_model_round_trips_on_disk() {
    let (model, calib, dbs, table) = setup();
    let r = search(&model, &calib, &dbs, &table, &[2.0], EvaluatorKind::Proxy).remove(0);
    let compact = export(&model, &dbs, &r).unwrap();
    let dir = tempfile::tempdir().unwrap();
    compact.save(dir.path()).unwrap();
    assert_eq!(Model::load(dir.path()).unwrap(), compact);
    let rp = dir.path().join(r.file_name());
    r.save(&rp).unwrap();
    assert_eq!(SearchReport::load(&rp).unwrap(), r);
}

#[test]
fn chain_evaluator_is_zero_at_dense_and_grows_when_pruned() {
    let (model, calib, dbs, _) = setup();
    let ev = ChainEvaluator::new(&model, &dbs, calib.input.as_ref().unwrap()).unwrap();
    assert_eq!(ev.evaluate(&[0, 0, 0]).unwrap(), 0.0);
    let last: Vec<usize> = dbs.iter().map(|d| d.variants.len() - 1).collect();
    let all_gone = ev.evaluate(&last).unwrap();
    let half: Vec<usize> = dbs.iter().map(|d| d.variants.len() / 2).collect();
    let mid = ev.evaluate(&half).unwrap();
    assert!(mid > 0.0 && mid < all_gone, "{mid} vs {all_gone}");
    // everything removed leaves the identity map
    let out = ev.output(&last).unwrap();
    let input = zipkit::linalg::to_f64(calib.input.as_ref().unwrap());
    assert!((out - input).amax() < 1e-12);
}

#[test]
fn chain_search_meets_targets() {
    let (model, calib, dbs, table) = setup();
    for r in search(&model, &calib, &dbs, &table, &[1.5, 2.5], EvaluatorKind::Chain) {
        assert!(r.meets_target());
        assert_eq!(r.evaluator, EvaluatorKind::Chain);
        assert!(r.loss >= 0.0);
    }
}

#[test]
fn derived_layer_inputs_match_stored() {
    let (model, calib, _, _) = setup();
    let stripped = CalibrationSet {
        layers: BTreeMap::new(),
        ..calib.clone()
    };
    let derived = layer_inputs(&model, &stripped).unwrap();
    for (name, x) in &calib.layers {
        let d: &DMatrix<f32> = &derived[name];
        assert!((d - x).amax() <= 1e-6 * x.amax().max(1.0), "{name}");
    }
    let no_input = CalibrationSet {
        input: None,
        ..stripped
    };
    assert!(layer_inputs(&model, &no_input).is_err());
}

#[test]
fn database_files_are_reproducible() {
    let (model, calib, dbs, _) = setup();
    let again = build_databases(&model, &calib, Damping::default()).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    save_databases(a.path(), &dbs).unwrap();
    save_databases(b.path(), &again).unwrap();
    for db in &dbs {
        for entry in std::fs::read_dir(a.path().join(&db.layer)).unwrap() {
            let p = entry.unwrap().path();
            let q = b.path().join(&db.layer).join(p.file_name().unwrap());
            assert_eq!(
                std::fs::read(&p).unwrap(),
                std::fs::read(&q).unwrap(),
                "{}",
                p.display()
            );
        }
    }
    let loaded = load_databases(a.path(), &model).unwrap();
    assert_eq!(loaded.len(), dbs.len());
    for (x, y) in loaded.iter().zip(&dbs) {
        assert_eq!(x.priors(), y.priors());
    }
}

#[test]
fn calibration_sweep_reports_every_budget() {
    let s = spec();
    let model = synth_model(&s).unwrap();
    let calib = synth_calibration(&model, &s, 128, 0).unwrap();
    let heldout = synth_calibration(&model, &s, 128, 1).unwrap();
    let table = linear_table(&model);
    let opts = SweepOptions {
        budgets: vec![8, 32, 128],
        settings: SearchSettings {
            steps: 10,
            ..Default::default()
        },
        ..Default::default()
    };
    let points = calibration_sweep(&model, &calib, &heldout, &table, &opts).unwrap();
    assert_eq!(
        points.iter().map(|p| p.samples_used).collect::<Vec<_>>(),
        vec![8, 32, 128]
    );
    assert!(points
        .iter()
        .all(|p| p.heldout_loss.is_finite() && p.runtime_ms <= table.dense_runtime_ms / 2.0));
}

#[test]
fn sequential_fallback_gives_identical_databases() {
    let (model, calib, dbs, _) = setup();
    let seq = zipkit::par::sequential(|| build_databases(&model, &calib, Damping::default()).unwrap());
    assert_eq!(seq, dbs);
}
