//! Latency tables and runtime estimation.
//!
//! A table maps, per layer kind, a structural configuration (kept heads or
//! kept FFN width) to the measured time of the whole block at that
//! configuration. The runtime of a model configuration is the sum of its
//! per-layer entries. A kept count of 0 always costs exactly 0 ms.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::pruner::level_grid;
use crate::store::{self, Activation, Model};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyEntry {
    pub key: usize,
    pub ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyTable {
    pub device: String,
    pub dense_runtime_ms: f64,
    /// Entries sorted by key, per layer kind.
    pub kinds: BTreeMap<String, Vec<LatencyEntry>>,
}

#[derive(Serialize, Deserialize)]
struct TableFile {
    device: String,
    #[serde(default)]
    dense_runtime_ms: Option<f64>,
    kinds: BTreeMap<String, Vec<LatencyEntry>>,
}

impl LatencyTable {
    pub fn new(
        device: impl Into<String>,
        dense_runtime_ms: f64,
        kinds: BTreeMap<String, Vec<LatencyEntry>>,
    ) -> Result<Self> {
        let mut table = LatencyTable {
            device: device.into(),
            dense_runtime_ms,
            kinds,
        };
        for entries in table.kinds.values_mut() {
            entries.sort_by_key(|e| e.key);
        }
        table.validate()?;
        Ok(table)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dense_runtime_ms.is_finite() && self.dense_runtime_ms > 0.0) {
            return Err(Error::InvalidTable(format!(
                "dense_runtime_ms must be positive, got {}",
                self.dense_runtime_ms
            )));
        }
        for (kind, entries) in &self.kinds {
            for pair in entries.windows(2) {
                if pair[0].key == pair[1].key {
                    return Err(Error::InvalidTable(format!("{kind}: duplicate key {}", pair[0].key)));
                }
            }
            for e in entries {
                if !(e.ms.is_finite() && e.ms >= 0.0) {
                    return Err(Error::InvalidTable(format!(
                        "{kind}: key {} has latency {} ms",
                        e.key, e.ms
                    )));
                }
                if e.key == 0 && e.ms != 0.0 {
                    return Err(Error::InvalidTable(format!(
                        "{kind}: the all-pruned entry must be 0 ms, got {}",
                        e.ms
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn entries(&self, kind: &str) -> Option<&[LatencyEntry]> {
        self.kinds.get(kind).map(Vec::as_slice)
    }

    /// Latency of `kind` at `kept`. Missing keys are linearly interpolated
    /// between the nearest neighbours (the implicit `0 → 0 ms` point
    /// included) when `interpolate` is set; extrapolation is an error.
    pub fn lookup(&self, kind: &str, kept: usize, interpolate: bool) -> Result<f64> {
        if kept == 0 {
            return Ok(0.0);
        }
        let missing = || Error::MissingLatency {
            key: kind.to_string(),
            kept,
        };
        let entries = self.kinds.get(kind).ok_or_else(missing)?;
        match entries.binary_search_by_key(&kept, |e| e.key) {
            Ok(i) => Ok(entries[i].ms),
            Err(_) if !interpolate => Err(missing()),
            Err(i) => {
                if i == entries.len() {
                    return Err(missing());
                }
                let hi = entries[i];
                let lo = if i == 0 {
                    LatencyEntry { key: 0, ms: 0.0 }
                } else {
                    entries[i - 1]
                };
                let t = (kept - lo.key) as f64 / (hi.key - lo.key) as f64;
                Ok(lo.ms + t * (hi.ms - lo.ms))
            }
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: TableFile =
            serde_json::from_str(&text).map_err(|e| Error::InvalidTable(format!("{}: {e}", path.display())))?;
        let dense = file
            .dense_runtime_ms
            .ok_or_else(|| Error::InvalidTable(format!("{}: missing dense_runtime_ms", path.display())))?;
        LatencyTable::new(file.device, dense, file.kinds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            store::ensure_dir(parent)?;
        }
        store::write_json(
            path,
            &TableFile {
                device: self.device.clone(),
                dense_runtime_ms: Some(self.dense_runtime_ms),
                kinds: self.kinds.clone(),
            },
        )
    }
}

/// One layer's structural choice: table section plus kept count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerChoice {
    pub kind: String,
    pub kept: usize,
}

impl LayerChoice {
    pub fn new(kind: impl Into<String>, kept: usize) -> Self {
        LayerChoice {
            kind: kind.into(),
            kept,
        }
    }
}

/// Runtime in fixed-point units of 2⁻⁶⁰ ms. Table entries convert exactly
/// (down to 2⁻⁸ ms), so sums are exact and independent of order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ExactRuntime(pub i128);

const UNITS_PER_MS: f64 = (1u64 << 60) as f64;

impl ExactRuntime {
    pub fn from_ms(ms: f64) -> Self {
        ExactRuntime((ms * UNITS_PER_MS).round() as i128)
    }

    /// Nearest binary64 millisecond value.
    pub fn ms(self) -> f64 {
        self.0 as f64 / UNITS_PER_MS
    }
}

impl std::ops::Add for ExactRuntime {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        ExactRuntime(self.0 + rhs.0)
    }
}

impl std::iter::Sum for ExactRuntime {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(ExactRuntime::default(), |a, b| a + b)
    }
}

/// Correctly rounded sum of millisecond values.
pub fn sum_ms(values: impl IntoIterator<Item = f64>) -> f64 {
    values.into_iter().map(ExactRuntime::from_ms).sum::<ExactRuntime>().ms()
}

pub fn exact_runtime(choices: &[LayerChoice], table: &LatencyTable, interpolate: bool) -> Result<ExactRuntime> {
    choices
        .iter()
        .map(|c| table.lookup(&c.kind, c.kept, interpolate).map(ExactRuntime::from_ms))
        .sum()
}

/// Sum of per-layer table entries.
pub fn estimate_runtime(choices: &[LayerChoice], table: &LatencyTable, interpolate: bool) -> Result<f64> {
    Ok(exact_runtime(choices, table, interpolate)?.ms())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpeedupEstimate {
    pub runtime_ms: f64,
    pub dense_runtime_ms: f64,
    /// `dense / runtime`; infinite when the configuration costs nothing.
    pub speedup: f64,
    pub unbounded: bool,
}

impl SpeedupEstimate {
    pub fn from_runtime(runtime_ms: f64, dense_runtime_ms: f64) -> Self {
        let unbounded = runtime_ms <= 0.0;
        SpeedupEstimate {
            runtime_ms,
            dense_runtime_ms,
            speedup: if unbounded {
                f64::INFINITY
            } else {
                dense_runtime_ms / runtime_ms
            },
            unbounded,
        }
    }
}

pub fn estimate_speedup(choices: &[LayerChoice], table: &LatencyTable, interpolate: bool) -> Result<SpeedupEstimate> {
    let runtime = estimate_runtime(choices, table, interpolate)?;
    Ok(SpeedupEstimate::from_runtime(runtime, table.dense_runtime_ms))
}

/// Smallest observable step of the monotonic clock.
fn clock_granularity() -> Duration {
    let mut best = Duration::from_secs(1);
    for _ in 0..64 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

/// Median wall-clock milliseconds of `f` over `reps` timed repetitions
/// after `warmup` discarded calls. Calls shorter than ten clock ticks are
/// batched into an inner loop whose length doubles until they are not.
pub fn median_ms<F: FnMut()>(mut f: F, reps: usize, warmup: usize) -> Result<f64> {
    if reps < 3 {
        return Err(Error::InvalidArgument(format!(
            "need at least 3 repetitions, got {reps}"
        )));
    }
    for _ in 0..warmup {
        f();
    }
    let floor = clock_granularity() * 10;
    let mut inner = 1usize;
    loop {
        let start = Instant::now();
        for _ in 0..inner {
            f();
        }
        if start.elapsed() >= floor || inner >= 1 << 20 {
            break;
        }
        inner *= 2;
    }
    if inner > 1 {
        log::warn!("kernel runs below timer resolution; timing {inner} calls per sample");
    }
    let mut samples: Vec<f64> = (0..reps)
        .map(|_| {
            let start = Instant::now();
            for _ in 0..inner {
                f();
            }
            start.elapsed().as_secs_f64() * 1e3 / inner as f64
        })
        .collect();
    samples.sort_by(f64::total_cmp);
    let mid = samples.len() / 2;
    Ok(if samples.len() % 2 == 1 {
        samples[mid]
    } else {
        0.5 * (samples[mid - 1] + samples[mid])
    })
}

fn random_f32(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f32> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Median time of a dense `rows × cols` by `cols × batch` multiply.
pub fn bench_kernel(rows: usize, cols: usize, batch: usize, reps: usize, warmup: usize) -> Result<f64> {
    if reps < 3 {
        return Err(Error::InvalidArgument(format!(
            "need at least 3 repetitions, got {reps}"
        )));
    }
    if rows == 0 || cols == 0 || batch == 0 {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x6265_6e63);
    let a = random_f32(rows, cols, &mut rng);
    let b = random_f32(cols, batch, &mut rng);
    let mut c = DMatrix::<f32>::zeros(rows, batch);
    median_ms(
        || {
            c.gemm(1.0, &a, &b, 0.0);
            std::hint::black_box(&c);
        },
        reps,
        warmup,
    )
}

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub device: String,
    /// Columns of the benchmark input (tokens processed per call).
    pub batch: usize,
    pub reps: usize,
    pub warmup: usize,
    /// Time grid levels concurrently, one per worker.
    pub parallel: bool,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            device: "host-cpu".into(),
            batch: 128,
            reps: 7,
            warmup: 2,
            parallel: false,
        }
    }
}

/// Median time of one residual block with the given matrix shapes.
fn bench_block(shapes: &[(usize, usize)], activation: Activation, batch: usize, opts: &BenchOptions) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x626c_6f63);
    let mats: Vec<DMatrix<f32>> = shapes.iter().map(|&(r, c)| random_f32(r, c, &mut rng)).collect();
    let input = random_f32(shapes[0].1, batch, &mut rng);
    median_ms(
        || {
            let mut z = &mats[0] * &input;
            for m in &mats[1..] {
                z.apply(|v| *v = activation.apply(f64::from(*v)) as f32);
                z = m * &z;
            }
            z += &input;
            std::hint::black_box(&z);
        },
        opts.reps,
        opts.warmup,
    )
}

/// Generates a table for `model` by timing every grid level of every
/// distinct latency key on this host. The dense runtime is the sum of the
/// dense entries over the model's prunable layers.
pub fn bench_table(model: &Model, opts: &BenchOptions) -> Result<LatencyTable> {
    let mut kinds = BTreeMap::new();
    let mut dense_key_of_layer = Vec::new();
    for layer in &model.manifest.layers {
        let (Some(group), Some(key)) = (&layer.group, layer.latency_key()) else {
            continue;
        };
        let per_count = |kept: usize| match group.kind {
            store::StructureKind::FfnColumns => kept * group.structure_width,
            _ => kept,
        };
        dense_key_of_layer.push((key.clone(), per_count(group.len())));
        if kinds.contains_key(&key) {
            continue;
        }
        // shapes at each kept count: producer loses rows, target loses columns
        let target_idx = layer
            .matrices
            .iter()
            .position(|m| m.name == group.target_matrix)
            .expect("validated");
        let producer_idx = group
            .linked_producer
            .as_ref()
            .and_then(|p| layer.matrices.iter().position(|m| m.name == p.matrix));
        let grid = level_grid(group.kind, group.len());
        let shapes_at = |kept: usize| -> Vec<(usize, usize)> {
            let pruned_cols = (group.len() - kept) * group.structure_width;
            layer
                .matrices
                .iter()
                .enumerate()
                .map(|(i, m)| {
                    if i == target_idx {
                        (m.rows, m.cols - pruned_cols)
                    } else if Some(i) == producer_idx {
                        (m.rows - pruned_cols, m.cols)
                    } else {
                        (m.rows, m.cols)
                    }
                })
                .collect()
        };
        let time_level = |i: usize| -> Result<LatencyEntry> {
            let kept = grid[i];
            let ms = if kept == 0 {
                0.0
            } else {
                bench_block(&shapes_at(kept), layer.activation, opts.batch, opts)?
            };
            Ok(LatencyEntry {
                key: per_count(kept),
                ms,
            })
        };
        let mut entries: Vec<LatencyEntry> = if opts.parallel {
            par::try_map_range(grid.len(), time_level)?
        } else {
            (0..grid.len()).map(time_level).collect::<Result<_>>()?
        };
        entries.sort_by_key(|e| e.key);
        log::info!("benchmarked {key}: {} levels", entries.len());
        kinds.insert(key, entries);
    }
    if kinds.is_empty() {
        return Err(Error::InvalidModel("model has no prunable layers to benchmark".into()));
    }
    let provisional = LatencyTable {
        device: opts.device.clone(),
        dense_runtime_ms: 1.0,
        kinds,
    };
    let dense = sum_ms(
        dense_key_of_layer
            .iter()
            .map(|(k, kept)| provisional.lookup(k, *kept, false))
            .collect::<Result<Vec<f64>>>()?,
    );
    LatencyTable::new(provisional.device, dense, provisional.kinds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entries(pairs: &[(usize, f64)]) -> Vec<LatencyEntry> {
        pairs.iter().map(|&(key, ms)| LatencyEntry { key, ms }).collect()
    }

    #[test]
    fn interpolation_and_extrapolation() {
        let t = LatencyTable::new(
            "d",
            10.0,
            [("ffn".to_string(), entries(&[(10, 2.0), (20, 4.0)]))].into(),
        )
        .unwrap();
        assert_eq!(t.lookup("ffn", 15, true).unwrap(), 3.0);
        assert_eq!(t.lookup("ffn", 5, true).unwrap(), 1.0);
        assert_eq!(t.lookup("ffn", 0, false).unwrap(), 0.0);
        assert!(matches!(t.lookup("ffn", 15, false), Err(Error::MissingLatency { .. })));
        assert!(matches!(t.lookup("ffn", 25, true), Err(Error::MissingLatency { .. })));
        assert!(t.lookup("heads", 1, true).is_err());
    }

    #[test]
    fn negative_and_nonzero_empty_entries_rejected() {
        let neg = LatencyTable::new("d", 1.0, [("a".to_string(), entries(&[(4, -1.0)]))].into());
        assert!(matches!(neg, Err(Error::InvalidTable(_))));
        let zero = LatencyTable::new("d", 1.0, [("a".to_string(), entries(&[(0, 0.5)]))].into());
        assert!(matches!(zero, Err(Error::InvalidTable(_))));
    }

    #[test]
    fn missing_dense_runtime_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.json");
        std::fs::write(&p, r#"{"device":"x","kinds":{"a":[{"key":1,"ms":1.0}]}}"#).unwrap();
        assert!(matches!(LatencyTable::load(&p), Err(Error::InvalidTable(_))));
    }

    #[test]
    fn speedup_arithmetic() {
        let dense = SpeedupEstimate::from_runtime(8.0, 8.0);
        assert_eq!(dense.speedup, 1.0);
        assert_eq!(SpeedupEstimate::from_runtime(4.0, 8.0).speedup, 2.0);
        let free = SpeedupEstimate::from_runtime(0.0, 8.0);
        assert!(free.unbounded && free.speedup.is_infinite());
    }

    #[test]
    fn kernel_width_zero_is_free_and_reps_checked() {
        assert_eq!(bench_kernel(16, 0, 8, 3, 0).unwrap(), 0.0);
        assert!(bench_kernel(16, 16, 8, 2, 0).is_err());
    }
}
