//! Structured OBS pruning of weight-matrix columns.
//!
//! For a layer `W` (`d_row × d_col`) with inverse Hessian `H⁻¹` and a set of
//! column structures, one greedy step
//!
//! 1. scores every remaining structure `S` by
//!    `Σ_i W[i,S] · ((H⁻¹)[S,S])⁻¹ · W[i,S]ᵀ`,
//! 2. removes the cheapest one with the compensating update
//!    `W ← W − W[:,S] · ((H⁻¹)[S,S])⁻¹ · (H⁻¹)[S,:]`,
//! 3. eliminates `S` from `H⁻¹` with a block Gaussian-elimination step
//!    `H⁻¹ ← H⁻¹ − (H⁻¹)[:,S] · ((H⁻¹)[S,S])⁻¹ · (H⁻¹)[S,:]`.
//!
//! Rows and columns of `H⁻¹` at removed indices are left stale; nothing
//! reads them again. With `H = 2·X·Xᵀ + λI` a score is twice the increase of
//! `‖ŴX − WX‖²` (plus the ridge term) caused by the removal.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{select, select_cols, spd_inverse, to_f32, to_f64, Mat};
use crate::par;
use crate::store::{self, LayerSpec, StructureGroup, StructureKind, FORMAT_VERSION};

/// Number of geometric shrink steps on the FFN grid (`0.9^i`, `i = 0..=42`).
pub const FFN_GRID_STEPS: i32 = 42;
pub const FFN_GRID_RATIO: f64 = 0.9;

/// `((H⁻¹)[S,S])⁻¹`, or an error naming the structure if the block is not
/// positive definite.
fn block_inverse(hinv: &Mat, cols: &[usize], candidate: usize) -> Result<Mat> {
    spd_inverse(&select(hinv, cols, cols)).ok_or(Error::SingularBlock { candidate })
}

fn score_with(w: &Mat, cols: &[usize], block_inv: &Mat) -> f64 {
    if cols.len() == 1 {
        let inv = block_inv[(0, 0)];
        let c = cols[0];
        return w.column(c).iter().map(|v| v * v).sum::<f64>() * inv;
    }
    let ws = select_cols(w, cols);
    let wa = &ws * block_inv;
    wa.component_mul(&ws).sum()
}

fn check_shapes(w: &Mat, hinv: &Mat) -> Result<()> {
    if hinv.nrows() != hinv.ncols() || hinv.nrows() != w.ncols() {
        return Err(Error::Dimension(format!(
            "weights are {}x{} but inverse Hessian is {}x{}",
            w.nrows(),
            w.ncols(),
            hinv.nrows(),
            hinv.ncols()
        )));
    }
    Ok(())
}

/// Structured saliency of every candidate column set.
pub fn saliency_scores(w: &Mat, hinv: &Mat, candidates: &[Vec<usize>]) -> Result<Vec<f64>> {
    check_shapes(w, hinv)?;
    par::try_map_range(candidates.len(), |s| {
        let cols = &candidates[s];
        let inv = block_inverse(hinv, cols, s)?;
        Ok(score_with(w, cols, &inv))
    })
}

/// Applies the rank-|S| compensation and downdate to the columns flagged
/// in `live` (all columns when `None`).
fn apply_removal(w: &mut Mat, hinv: &mut Mat, cols: &[usize], block_inv: &Mat, live: Option<&[bool]>) {
    let d = hinv.nrows();
    let rows = w.nrows();
    // B = A · (H⁻¹)[S,:]   (|S| × d)
    let hs_t = select_cols(hinv, cols); // d × |S|, equals ((H⁻¹)[S,:])ᵀ
    let b = block_inv * hs_t.transpose();
    let ws = select_cols(w, cols); // rows × |S|
    let is_live = |j: usize| live.is_none_or(|l| l[j]);

    par::for_each_chunk_mut(w.as_mut_slice(), rows, |j, col| {
        if !is_live(j) {
            return;
        }
        for k in 0..cols.len() {
            let f = b[(k, j)];
            if f != 0.0 {
                for (c, s) in col.iter_mut().zip(ws.column(k).iter()) {
                    *c -= s * f;
                }
            }
        }
    });
    par::for_each_chunk_mut(hinv.as_mut_slice(), d, |j, col| {
        if !is_live(j) {
            return;
        }
        for k in 0..cols.len() {
            let f = b[(k, j)];
            if f != 0.0 {
                for (c, s) in col.iter_mut().zip(hs_t.column(k).iter()) {
                    *c -= s * f;
                }
            }
        }
    });
}

/// One removal step on full matrices: returns `(W + δ_S, downdated H⁻¹)`.
pub fn prune_one(w: &Mat, hinv: &Mat, cols: &[usize]) -> Result<(Mat, Mat)> {
    check_shapes(w, hinv)?;
    let inv = block_inverse(hinv, cols, 0)?;
    let mut w2 = w.clone();
    let mut h2 = hinv.clone();
    apply_removal(&mut w2, &mut h2, cols, &inv, None);
    Ok((w2, h2))
}

/// Removed structures in removal order plus the cumulative column mask
/// (`true` = pruned).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneMask {
    pub removed: Vec<usize>,
    pub columns: Vec<bool>,
}

impl PruneMask {
    pub fn empty(cols: usize) -> Self {
        PruneMask {
            removed: Vec::new(),
            columns: vec![false; cols],
        }
    }

    pub fn from_removed(removed: &[usize], structures: &[Vec<usize>], cols: usize) -> Self {
        let mut columns = vec![false; cols];
        for &s in removed {
            for &c in &structures[s] {
                columns[c] = true;
            }
        }
        PruneMask {
            removed: removed.to_vec(),
            columns,
        }
    }

    /// Column mask of the `step`-th removal alone.
    pub fn step_mask(&self, step: usize, structures: &[Vec<usize>]) -> Vec<bool> {
        let mut m = vec![false; self.columns.len()];
        for &c in &structures[self.removed[step]] {
            m[c] = true;
        }
        m
    }

    pub fn pruned_columns(&self) -> usize {
        self.columns.iter().filter(|&&m| m).count()
    }
}

/// Greedy one-at-a-time pruner over a fixed set of structures.
#[derive(Clone, Debug)]
pub struct PruneState {
    weights: Mat,
    hinv: Mat,
    structures: Vec<Vec<usize>>,
    remaining: Vec<bool>,
    live_cols: Vec<bool>,
    removed: Vec<usize>,
    step_scores: Vec<f64>,
}

impl PruneState {
    pub fn new(weights: Mat, hinv: Mat, structures: Vec<Vec<usize>>) -> Result<Self> {
        check_shapes(&weights, &hinv)?;
        if let Some(c) = structures.iter().flatten().find(|&&c| c >= weights.ncols()) {
            return Err(Error::Dimension(format!(
                "structure column {c} out of range ({} cols)",
                weights.ncols()
            )));
        }
        let n = structures.len();
        let live_cols = vec![true; weights.ncols()];
        Ok(PruneState {
            weights,
            hinv,
            structures,
            remaining: vec![true; n],
            live_cols,
            removed: Vec::new(),
            step_scores: Vec::new(),
        })
    }

    pub fn weights(&self) -> &Mat {
        &self.weights
    }

    pub fn hinv(&self) -> &Mat {
        &self.hinv
    }

    pub fn structures(&self) -> &[Vec<usize>] {
        &self.structures
    }

    pub fn removed(&self) -> &[usize] {
        &self.removed
    }

    pub fn step_scores(&self) -> &[f64] {
        &self.step_scores
    }

    pub fn remaining_count(&self) -> usize {
        self.remaining.iter().filter(|&&r| r).count()
    }

    pub fn is_remaining(&self, s: usize) -> bool {
        self.remaining[s]
    }

    /// Saliency of each structure; `None` for removed ones.
    pub fn scores(&self) -> Result<Vec<Option<f64>>> {
        par::try_map_range(self.structures.len(), |s| {
            if !self.remaining[s] {
                return Ok(None);
            }
            let cols = &self.structures[s];
            let inv = block_inverse(&self.hinv, cols, s)?;
            Ok(Some(score_with(&self.weights, cols, &inv)))
        })
    }

    /// Cheapest remaining structure; ties go to the lowest index.
    pub fn argmin(&self) -> Result<Option<(usize, f64)>> {
        let mut best: Option<(usize, f64)> = None;
        for (s, score) in self.scores()?.into_iter().enumerate() {
            if let Some(v) = score {
                if best.is_none_or(|(_, b)| v < b) {
                    best = Some((s, v));
                }
            }
        }
        Ok(best)
    }

    /// Removes structure `s` with optimal compensation.
    pub fn remove(&mut self, s: usize, score: f64) -> Result<()> {
        if !self.remaining.get(s).copied().unwrap_or(false) {
            return Err(Error::InvalidArgument(format!("structure {s} is not removable")));
        }
        let cols = self.structures[s].clone();
        let inv = block_inverse(&self.hinv, &cols, s)?;
        for &c in &cols {
            self.live_cols[c] = false;
        }
        apply_removal(&mut self.weights, &mut self.hinv, &cols, &inv, Some(&self.live_cols));
        for &c in &cols {
            self.weights.column_mut(c).fill(0.0);
        }
        self.remaining[s] = false;
        self.removed.push(s);
        self.step_scores.push(score);
        Ok(())
    }

    /// Argmin followed by removal. `None` when nothing remains.
    pub fn step(&mut self) -> Result<Option<(usize, f64)>> {
        let Some((s, score)) = self.argmin()? else {
            return Ok(None);
        };
        self.remove(s, score)?;
        Ok(Some((s, score)))
    }

    pub fn mask(&self) -> PruneMask {
        PruneMask::from_removed(&self.removed, &self.structures, self.weights.ncols())
    }

    /// Current weights with every pruned column set exactly to zero.
    pub fn masked_weights(&self) -> Mat {
        let mut w = self.weights.clone();
        for (c, live) in self.live_cols.iter().enumerate() {
            if !live {
                w.column_mut(c).fill(0.0);
            }
        }
        w
    }
}

#[derive(Clone, Debug)]
pub struct PruneRun {
    pub weights: Mat,
    pub mask: PruneMask,
    /// Saliency of each removed structure at the time of its removal.
    pub scores: Vec<f64>,
}

/// Removes exactly `k` structures greedily.
pub fn greedy_prune(w: &Mat, hinv: &Mat, k: usize, group: &StructureGroup) -> Result<PruneRun> {
    if k > group.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot remove {k} of {} structures",
            group.len()
        )));
    }
    let mut state = PruneState::new(w.clone(), hinv.clone(), group.structures.clone())?;
    for _ in 0..k {
        state.step()?;
    }
    Ok(PruneRun {
        weights: state.masked_weights(),
        mask: state.mask(),
        scores: state.step_scores().to_vec(),
    })
}

/// `‖ŴX − WX‖_F / ‖WX‖_F`.
pub fn measure_relative_error(w_hat: &Mat, w: &Mat, x: &Mat) -> Result<f64> {
    if w_hat.shape() != w.shape() || w.ncols() != x.nrows() {
        return Err(Error::Dimension(format!(
            "W is {:?}, Ŵ is {:?}, X is {:?}",
            w.shape(),
            w_hat.shape(),
            x.shape()
        )));
    }
    let reference = (w * x).norm();
    if reference == 0.0 {
        return Err(Error::ZeroReference);
    }
    Ok(((w_hat - w) * x).norm() / reference)
}

/// Kept-structure counts for a group, densest first, always ending at 0.
///
/// Heads and generic groups get every count; FFN groups get
/// `round(n · 0.9^i)` for `i = 0..=42` (duplicates dropped) plus 0.
pub fn level_grid(kind: StructureKind, n: usize) -> Vec<usize> {
    let mut grid: Vec<usize> = match kind {
        StructureKind::FfnColumns => (0..=FFN_GRID_STEPS)
            .map(|i| (n as f64 * FFN_GRID_RATIO.powi(i)).round() as usize)
            .collect(),
        StructureKind::AttentionHeads | StructureKind::Generic => (0..=n).rev().collect(),
    };
    grid.push(0);
    grid.dedup();
    grid
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrunedVariant {
    pub level_index: usize,
    pub kept_structures: usize,
    /// Target matrix after compensation; pruned columns are exactly zero and
    /// every value is representable in binary32.
    pub weights: Mat,
    pub mask: PruneMask,
    pub relative_error: f64,
    pub cumulative_saliency: f64,
}

/// All grid levels of one layer, produced by a single greedy run.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerDatabase {
    pub layer: String,
    pub latency_key: String,
    pub group: StructureGroup,
    pub grid: Vec<usize>,
    pub variants: Vec<PrunedVariant>,
}

impl LayerDatabase {
    pub fn kind(&self) -> StructureKind {
        self.group.kind
    }

    /// Latency-table key for a kept-structure count: columns for FFN
    /// groups, structures otherwise.
    pub fn latency_count(&self, kept_structures: usize) -> usize {
        match self.group.kind {
            StructureKind::FfnColumns => kept_structures * self.group.structure_width,
            _ => kept_structures,
        }
    }

    pub fn priors(&self) -> Vec<f64> {
        self.variants.iter().map(|v| v.relative_error).collect()
    }
}

/// Runs the greedy pruner once down to the sparsest grid level and
/// snapshots a variant at every level. `grid` holds kept-structure counts
/// in decreasing order.
pub fn build_database(
    layer: &LayerSpec,
    w: &DMatrix<f32>,
    hinv: &Mat,
    x: &DMatrix<f32>,
    grid: &[usize],
) -> Result<LayerDatabase> {
    let group = layer
        .group
        .as_ref()
        .ok_or_else(|| Error::InvalidModel(format!("layer {} has no structure group", layer.name)))?;
    let n = group.len();
    if grid.is_empty() || grid.windows(2).any(|p| p[0] <= p[1]) || grid[0] > n {
        return Err(Error::InvalidArgument(format!(
            "layer {}: grid must be strictly decreasing and start at most at {n}",
            layer.name
        )));
    }
    let w0 = to_f64(w);
    let x = to_f64(x);
    if x.nrows() != w0.ncols() {
        return Err(Error::Dimension(format!(
            "layer {}: calibration has {} rows, target has {} columns",
            layer.name,
            x.nrows(),
            w0.ncols()
        )));
    }

    let mut state = PruneState::new(w0.clone(), hinv.clone(), group.structures.clone())?;
    // (level, kept, weights, mask, cumulative saliency)
    let mut snaps = Vec::with_capacity(grid.len());
    let mut cumulative = 0.0;
    for (level, &kept) in grid.iter().enumerate() {
        while state.remaining_count() > kept {
            let (_, score) = state.step()?.expect("structures remain");
            cumulative += score;
        }
        // round to the storage precision so p matches what gets saved
        let weights = to_f64(&to_f32(&state.masked_weights()));
        snaps.push((level, kept, weights, state.mask(), cumulative));
    }

    let errors = par::try_map_range(snaps.len(), |i| measure_relative_error(&snaps[i].2, &w0, &x))?;
    let variants = snaps
        .into_iter()
        .zip(errors)
        .map(
            |((level_index, kept, weights, mask, cumulative_saliency), relative_error)| PrunedVariant {
                level_index,
                kept_structures: kept,
                weights,
                mask,
                relative_error,
                cumulative_saliency,
            },
        )
        .collect();
    Ok(LayerDatabase {
        layer: layer.name.clone(),
        latency_key: layer.latency_key().unwrap_or_else(|| group.kind.as_str().into()),
        group: group.clone(),
        grid: grid.to_vec(),
        variants,
    })
}

/// Physically shrunk matrices after pruning.
#[derive(Clone, Debug, PartialEq)]
pub struct Compacted {
    pub target: DMatrix<f32>,
    pub producer: Option<DMatrix<f32>>,
    /// Surviving structures re-indexed into the shrunk matrices.
    pub group: StructureGroup,
}

/// Deletes masked target columns and the producer rows linked to them.
pub fn compact(
    target: &DMatrix<f32>,
    producer: Option<&DMatrix<f32>>,
    group: &StructureGroup,
    mask: &[bool],
) -> Result<Compacted> {
    if mask.len() != target.ncols() {
        return Err(Error::Dimension(format!(
            "mask has {} entries for {} columns",
            mask.len(),
            target.ncols()
        )));
    }
    let link = match (&group.linked_producer, producer) {
        (Some(link), Some(p)) => Some((link, p)),
        (None, None) if !group.kind.requires_producer() => None,
        _ => {
            return Err(Error::InvalidModel(format!(
                "{} group on {} needs its linked producer to compact",
                group.kind.as_str(),
                group.target_matrix
            )))
        }
    };
    for (c, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        if target.column(c).iter().any(|&v| v != 0.0) {
            return Err(Error::InvalidArgument(format!(
                "column {c} of {} is masked but not zero",
                group.target_matrix
            )));
        }
    }

    let kept_cols: Vec<usize> = (0..target.ncols()).filter(|&c| !mask[c]).collect();
    let col_map: BTreeMap<usize, usize> = kept_cols.iter().enumerate().map(|(n, &o)| (o, n)).collect();
    let new_target = DMatrix::from_fn(target.nrows(), kept_cols.len(), |i, j| target[(i, kept_cols[j])]);

    let mut new_group = StructureGroup {
        target_matrix: group.target_matrix.clone(),
        structure_width: group.structure_width,
        structures: Vec::new(),
        linked_producer: None,
        kind: group.kind,
    };
    let surviving: Vec<&Vec<usize>> = group
        .structures
        .iter()
        .filter(|cols| cols.iter().all(|&c| !mask[c]))
        .collect();
    new_group.structures = surviving
        .iter()
        .map(|cols| cols.iter().map(|c| col_map[c]).collect())
        .collect();

    let new_producer = match link {
        Some((link, p)) => {
            let rows_of = group.producer_rows().expect("link present");
            let dropped: Vec<usize> = (0..target.ncols())
                .filter(|&c| mask[c])
                .filter_map(|c| rows_of.get(&c).copied())
                .collect();
            let kept_rows: Vec<usize> = (0..p.nrows()).filter(|r| !dropped.contains(r)).collect();
            let row_map: BTreeMap<usize, usize> = kept_rows.iter().enumerate().map(|(n, &o)| (o, n)).collect();
            new_group.linked_producer = Some(store::LinkedProducer {
                matrix: link.matrix.clone(),
                rows: surviving
                    .iter()
                    .flat_map(|cols| cols.iter())
                    .map(|c| row_map[&rows_of[c]])
                    .collect(),
            });
            Some(DMatrix::from_fn(kept_rows.len(), p.ncols(), |i, j| {
                p[(kept_rows[i], j)]
            }))
        }
        None => None,
    };
    Ok(Compacted {
        target: new_target,
        producer: new_producer,
        group: new_group,
    })
}

#[derive(Serialize, Deserialize)]
struct VariantRecord {
    level_index: usize,
    kept_structures: usize,
    blob: String,
    relative_error: f64,
    cumulative_saliency: f64,
    removed_structures: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct DatabaseIndex {
    format_version: u32,
    layer: String,
    latency_key: String,
    rows: usize,
    cols: usize,
    group: StructureGroup,
    grid: Vec<usize>,
    variants: Vec<VariantRecord>,
}

pub const DATABASE_INDEX: &str = "index.json";

impl LayerDatabase {
    /// Writes `index.json` plus one binary32 blob per level into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        store::ensure_dir(dir)?;
        let (rows, cols) = self.variants.first().map(|v| v.weights.shape()).unwrap_or((0, 0));
        let mut variants = Vec::with_capacity(self.variants.len());
        for v in &self.variants {
            let blob = format!("level{:03}.bin", v.level_index);
            store::write_blob(dir, &blob, &to_f32(&v.weights))?;
            variants.push(VariantRecord {
                level_index: v.level_index,
                kept_structures: v.kept_structures,
                blob,
                relative_error: v.relative_error,
                cumulative_saliency: v.cumulative_saliency,
                removed_structures: v.mask.removed.clone(),
            });
        }
        let index = DatabaseIndex {
            format_version: FORMAT_VERSION,
            layer: self.layer.clone(),
            latency_key: self.latency_key.clone(),
            rows,
            cols,
            group: self.group.clone(),
            grid: self.grid.clone(),
            variants,
        };
        store::write_json(&dir.join(DATABASE_INDEX), &index)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let index: DatabaseIndex = store::read_json(&dir.join(DATABASE_INDEX))?;
        if index.format_version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: index.format_version,
                expected: FORMAT_VERSION,
            });
        }
        let mut variants = Vec::with_capacity(index.variants.len());
        for r in index.variants {
            let w = store::read_blob(
                dir,
                &format!("{}/{}", index.layer, r.blob),
                &r.blob,
                index.rows,
                index.cols,
            )?;
            variants.push(PrunedVariant {
                level_index: r.level_index,
                kept_structures: r.kept_structures,
                weights: to_f64(&w),
                mask: PruneMask::from_removed(&r.removed_structures, &index.group.structures, index.cols),
                relative_error: r.relative_error,
                cumulative_saliency: r.cumulative_saliency,
            });
        }
        Ok(LayerDatabase {
            layer: index.layer,
            latency_key: index.latency_key,
            group: index.group,
            grid: index.grid,
            variants,
        })
    }
}
