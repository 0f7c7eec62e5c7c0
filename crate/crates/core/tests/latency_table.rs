use std::collections::BTreeMap;
use std::path::PathBuf;

use proptest::prelude::*;
use zipkit::latency::{
    bench_kernel, bench_table, estimate_runtime, estimate_speedup, exact_runtime, BenchOptions, LatencyEntry,
    LatencyTable, LayerChoice,
};
use zipkit::synth::{synth_model, SynthSpec};
use zipkit::Error;

fn fixture() -> LatencyTable {
    LatencyTable::load(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/table7.json")).unwrap()
}

fn layer(ffn: usize, heads: usize) -> [LayerChoice; 2] {
    [
        LayerChoice::new("ffn_columns", ffn),
        LayerChoice::new("attention_heads", heads),
    ]
}

#[test]
fn transcribed_table_shape() {
    let t = fixture();
    assert_eq!(t.entries("ffn_columns").unwrap().len(), 7);
    assert_eq!(t.entries("attention_heads").unwrap().len(), 7);
    assert_eq!(t.dense_runtime_ms, 19.8);
}

#[test]
fn single_layer_sums() {
    let t = fixture();
    assert!((estimate_runtime(&layer(3072, 12), &t, false).unwrap() - 19.8).abs() < 1e-12);
    assert!((estimate_runtime(&layer(302, 6), &t, false).unwrap() - 6.0).abs() < 1e-12);
    assert_eq!(estimate_runtime(&layer(0, 0), &t, false).unwrap(), 0.0);
    let dense = estimate_speedup(&layer(3072, 12), &t, false).unwrap();
    assert!((dense.speedup - 1.0).abs() < 1e-12);
    let none = estimate_speedup(&layer(0, 0), &t, false).unwrap();
    assert!(none.unbounded && none.speedup.is_infinite());
}

#[test]
fn missing_level_needs_interpolation() {
    let t = fixture();
    assert!(matches!(
        estimate_runtime(&layer(2000, 12), &t, false),
        Err(Error::MissingLatency { .. })
    ));
    let v = estimate_runtime(&[LayerChoice::new("ffn_columns", 2443)], &t, true).unwrap();
    // halfway between 1814 (7.4) and 3072 (11.9)
    assert!((v - 9.65).abs() < 1e-9, "{v}");
    // below the smallest entry interpolates toward the implicit zero
    let v = estimate_runtime(&[LayerChoice::new("ffn_columns", 11)], &t, true).unwrap();
    assert!((v - 0.7 / 3.0).abs() < 1e-12);
    assert!(estimate_runtime(&[LayerChoice::new("ffn_columns", 4000)], &t, true).is_err());
}

#[test]
fn per_op_speedup_column() {
    // V100 MLP speedups as a per-op table relative to a 1 ms dense op
    let col = [
        (3072, 1.0),
        (1814, 1.6),
        (1322, 2.0),
        (302, 6.9),
        (130, 11.8),
        (76, 13.1),
        (33, 14.8),
    ];
    let entries = col.iter().map(|&(key, s)| LatencyEntry { key, ms: 1.0 / s }).collect();
    let t = LatencyTable::new("v100-mlp", 1.0, BTreeMap::from([("mlp".to_string(), entries)])).unwrap();
    for (key, s) in col {
        let e = estimate_speedup(&[LayerChoice::new("mlp", key)], &t, false).unwrap();
        assert!((e.speedup - s).abs() < 1e-12);
    }
}

#[test]
fn halving_every_layer_doubles_speed() {
    let entries = vec![LatencyEntry { key: 2, ms: 1.5 }, LatencyEntry { key: 4, ms: 3.0 }];
    let t = LatencyTable::new("toy", 9.0, BTreeMap::from([("k".to_string(), entries)])).unwrap();
    let half = vec![LayerChoice::new("k", 2); 3];
    assert!((estimate_speedup(&half, &t, false).unwrap().speedup - 2.0).abs() < 1e-15);
}

#[test]
fn round_trip_is_bit_identical() {
    let t = fixture();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.json");
    t.save(&p).unwrap();
    let back = LatencyTable::load(&p).unwrap();
    assert_eq!(back, t);
    for (a, b) in t.kinds["ffn_columns"].iter().zip(&back.kinds["ffn_columns"]) {
        assert_eq!(a.ms.to_bits(), b.ms.to_bits());
    }
}

#[test]
fn invalid_tables_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    std::fs::write(
        &p,
        r#"{"device":"x","dense_runtime_ms":1.0,"kinds":{"k":[{"key":3,"ms":-1.0}]}}"#,
    )
    .unwrap();
    assert!(matches!(LatencyTable::load(&p), Err(Error::InvalidTable(_))));
    std::fs::write(&p, r#"{"device":"x","kinds":{"k":[{"key":3,"ms":1.0}]}}"#).unwrap();
    assert!(matches!(LatencyTable::load(&p), Err(Error::InvalidTable(_))));
    assert_eq!(Error::InvalidTable(String::new()).exit_code(), 3);
}

#[test]
fn bench_generates_one_entry_per_grid_level() {
    let spec = SynthSpec::ffn_chain(16, 3072, 1, 0);
    let model = synth_model(&spec).unwrap();
    let opts = BenchOptions {
        batch: 1,
        reps: 3,
        warmup: 0,
        ..Default::default()
    };
    let t = bench_table(&model, &opts).unwrap();
    let e = t.entries("ffn_columns").unwrap();
    assert_eq!(e.len(), 44);
    assert_eq!(e[0].key, 0);
    assert_eq!(e[0].ms, 0.0);
    assert_eq!(e[43].key, 3072);
    assert!(e.iter().all(|x| x.ms >= 0.0));
}

#[test]
fn kernel_timing_is_self_consistent() {
    // Generous bound: two medians of the same shape within 25%. Retried to
    // ride out scheduler noise on shared machines.
    let ok = (0..5).any(|_| {
        let a = bench_kernel(64, 64, 64, 9, 2).unwrap();
        let b = bench_kernel(64, 64, 64, 9, 2).unwrap();
        (a - b).abs() <= 0.25 * a.max(b)
    });
    assert!(ok);
    assert_eq!(bench_kernel(0, 64, 64, 3, 0).unwrap(), 0.0);
}

proptest! {
    #[test]
    fn runtime_is_additive_over_disjoint_layers(
        a in proptest::collection::vec((0usize..7, 0usize..7), 1..8),
        b in proptest::collection::vec((0usize..7, 0usize..7), 1..8),
    ) {
        let t = fixture();
        let ffn: Vec<usize> = t.kinds["ffn_columns"].iter().map(|e| e.key).collect();
        let heads: Vec<usize> = t.kinds["attention_heads"].iter().map(|e| e.key).collect();
        let to_choices = |v: &[(usize, usize)]| -> Vec<LayerChoice> {
            v.iter().flat_map(|&(f, h)| layer(ffn[f], heads[h])).collect()
        };
        let ca = to_choices(&a);
        let cb = to_choices(&b);
        let mut both = ca.clone();
        both.extend(cb.clone());
        let ea = exact_runtime(&ca, &t, false).unwrap();
        let eb = exact_runtime(&cb, &t, false).unwrap();
        prop_assert_eq!(ea + eb, exact_runtime(&both, &t, false).unwrap());
        // order never matters
        let mut rev = both.clone();
        rev.reverse();
        prop_assert_eq!(
            estimate_runtime(&both, &t, false).unwrap().to_bits(),
            estimate_runtime(&rev, &t, false).unwrap().to_bits()
        );
    }
}
