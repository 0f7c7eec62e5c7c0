//! On-disk containers.
//!
//! A container is a directory holding one UTF-8 JSON manifest plus one raw
//! blob per matrix. Blobs are little-endian binary32, row-major, with no
//! header, so `len == rows * cols * 4`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{decode_row_major, encode_row_major};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CALIBRATION_FILE: &str = "calibration.json";
/// Sample budget applied when a run does not specify one.
pub const DEFAULT_SAMPLE_BUDGET: usize = 2048;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixRecord {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub blob: String,
}

impl MatrixRecord {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        let name = name.into();
        let blob = format!("{name}.bin");
        MatrixRecord { name, rows, cols, blob }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureKind {
    AttentionHeads,
    FfnColumns,
    Generic,
}

impl StructureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StructureKind::AttentionHeads => "attention_heads",
            StructureKind::FfnColumns => "ffn_columns",
            StructureKind::Generic => "generic",
        }
    }

    /// Heads and FFN columns only make sense with a producer whose rows can
    /// be deleted alongside the pruned columns.
    pub fn requires_producer(self) -> bool {
        !matches!(self, StructureKind::Generic)
    }
}

/// Producer matrix whose rows feed the target's structure columns.
///
/// `rows[k]` is the producer row linked to the `k`-th column of the
/// flattened structure list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkedProducer {
    pub matrix: String,
    pub rows: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructureGroup {
    pub target_matrix: String,
    pub structure_width: usize,
    pub structures: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linked_producer: Option<LinkedProducer>,
    pub kind: StructureKind,
}

impl StructureGroup {
    /// `count` consecutive blocks of `width` columns starting at column 0,
    /// linked to the same rows of `producer`.
    pub fn contiguous(
        kind: StructureKind,
        target: impl Into<String>,
        producer: Option<&str>,
        width: usize,
        count: usize,
    ) -> Self {
        let structures: Vec<Vec<usize>> = (0..count).map(|s| (s * width..(s + 1) * width).collect()).collect();
        let linked_producer = producer.map(|p| LinkedProducer {
            matrix: p.to_string(),
            rows: (0..width * count).collect(),
        });
        StructureGroup {
            target_matrix: target.into(),
            structure_width: width,
            structures,
            linked_producer,
            kind,
        }
    }

    pub fn len(&self) -> usize {
        self.structures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.structures.is_empty()
    }

    /// Producer row for every structure column, keyed by target column.
    pub fn producer_rows(&self) -> Option<BTreeMap<usize, usize>> {
        let link = self.linked_producer.as_ref()?;
        Some(
            self.structures
                .iter()
                .flatten()
                .copied()
                .zip(link.rows.iter().copied())
                .collect(),
        )
    }

    fn validate(&self, layer: &str, target: &MatrixRecord, producer: Option<&MatrixRecord>) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidModel(format!("layer {layer}: {msg}")));
        if self.structure_width == 0 {
            return bad("structure_width must be positive".into());
        }
        let mut seen = BTreeSet::new();
        for (s, cols) in self.structures.iter().enumerate() {
            if cols.len() != self.structure_width {
                return bad(format!(
                    "structure {s} has {} columns, expected {}",
                    cols.len(),
                    self.structure_width
                ));
            }
            for &c in cols {
                if c >= target.cols {
                    return bad(format!("structure {s} column {c} out of range ({} cols)", target.cols));
                }
                if !seen.insert(c) {
                    return bad(format!("column {c} appears in more than one structure"));
                }
            }
        }
        match (&self.linked_producer, producer) {
            (Some(link), Some(p)) => {
                if link.rows.len() != seen.len() {
                    return bad(format!(
                        "linked producer maps {} rows for {} structure columns",
                        link.rows.len(),
                        seen.len()
                    ));
                }
                let mut rows = BTreeSet::new();
                for &r in &link.rows {
                    if r >= p.rows {
                        return bad(format!("linked row {r} out of range ({} rows)", p.rows));
                    }
                    if !rows.insert(r) {
                        return bad(format!("linked row {r} used twice"));
                    }
                }
            }
            (Some(link), None) => {
                return bad(format!("linked producer {} not found", link.matrix));
            }
            (None, _) => {}
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    #[default]
    Relu,
    Tanh,
    /// tanh approximation
    Gelu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Gelu => {
                const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
                0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
            }
        }
    }
}

/// One residual block: `h + M_k σ(… σ(M_1 h))` over `matrices` in order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub matrices: Vec<MatrixRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<StructureGroup>,
    #[serde(default)]
    pub activation: Activation,
    /// Latency-table section used for this layer; defaults to the group kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_key: Option<String>,
}

impl LayerSpec {
    pub fn matrix(&self, name: &str) -> Option<&MatrixRecord> {
        self.matrices.iter().find(|m| m.name == name)
    }

    /// Matrix whose columns consume the layer's calibration input.
    pub fn target(&self) -> Option<&MatrixRecord> {
        match &self.group {
            Some(g) => self.matrix(&g.target_matrix),
            None => self.matrices.last(),
        }
    }

    pub fn latency_key(&self) -> Option<String> {
        self.latency_key
            .clone()
            .or_else(|| self.group.as_ref().map(|g| g.kind.as_str().to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format_version: u32,
    pub hidden_dim: usize,
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl ModelManifest {
    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Structural checks that do not need the blobs.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: self.format_version,
                expected: FORMAT_VERSION,
            });
        }
        if self.hidden_dim == 0 {
            return Err(Error::InvalidModel("hidden_dim must be positive".into()));
        }
        let mut layer_names = BTreeSet::new();
        let mut matrix_names = BTreeSet::new();
        for layer in &self.layers {
            if !layer_names.insert(layer.name.as_str()) {
                return Err(Error::InvalidModel(format!("duplicate layer name {}", layer.name)));
            }
            if layer.matrices.is_empty() {
                return Err(Error::InvalidModel(format!("layer {} has no matrices", layer.name)));
            }
            for m in &layer.matrices {
                if m.rows == 0 || m.cols == 0 {
                    return Err(Error::ShapeMismatch {
                        name: m.name.clone(),
                        detail: format!("dimensions must be positive, got {}x{}", m.rows, m.cols),
                    });
                }
                if !matrix_names.insert(m.name.as_str()) {
                    return Err(Error::InvalidModel(format!("duplicate matrix name {}", m.name)));
                }
            }
            if let Some(group) = &layer.group {
                let target = layer.matrix(&group.target_matrix).ok_or_else(|| {
                    Error::InvalidModel(format!(
                        "layer {}: target matrix {} not declared",
                        layer.name, group.target_matrix
                    ))
                })?;
                let producer = group.linked_producer.as_ref().and_then(|p| layer.matrix(&p.matrix));
                group.validate(&layer.name, target, producer)?;
            }
        }
        Ok(())
    }
}

/// A manifest together with its decoded matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub manifest: ModelManifest,
    pub matrices: BTreeMap<String, DMatrix<f32>>,
}

impl Model {
    /// Builds a model, filling in matrix records from the supplied payloads.
    pub fn new(manifest: ModelManifest, matrices: BTreeMap<String, DMatrix<f32>>) -> Result<Self> {
        let model = Model { manifest, matrices };
        model.validate()?;
        Ok(model)
    }

    pub fn matrix(&self, name: &str) -> Result<&DMatrix<f32>> {
        self.matrices
            .get(name)
            .ok_or_else(|| Error::InvalidModel(format!("matrix {name} not loaded")))
    }

    pub fn validate(&self) -> Result<()> {
        self.manifest.validate()?;
        for layer in &self.manifest.layers {
            for rec in &layer.matrices {
                let m = self.matrix(&rec.name)?;
                if m.nrows() != rec.rows || m.ncols() != rec.cols {
                    return Err(Error::ShapeMismatch {
                        name: rec.name.clone(),
                        detail: format!(
                            "declared {}x{}, payload is {}x{}",
                            rec.rows,
                            rec.cols,
                            m.nrows(),
                            m.ncols()
                        ),
                    });
                }
            }
        }
        Ok(())
    }

    /// Total number of stored weights.
    pub fn parameter_count(&self) -> usize {
        self.manifest
            .layers
            .iter()
            .flat_map(|l| &l.matrices)
            .map(|m| m.rows * m.cols)
            .sum()
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        load_model(dir)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        save_model(&self.manifest, &self.matrices, dir)
    }
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn read_blob(dir: &Path, name: &str, blob: &str, rows: usize, cols: usize) -> Result<DMatrix<f32>> {
    let path = dir.join(blob);
    if !path.is_file() {
        return Err(Error::MissingBlob {
            name: name.to_string(),
            blob: path,
        });
    }
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    decode_row_major(&bytes, rows, cols).ok_or_else(|| Error::ShapeMismatch {
        name: name.to_string(),
        detail: format!(
            "declared {rows}x{cols} needs {} bytes, blob has {}",
            rows * cols * 4,
            bytes.len()
        ),
    })
}

pub fn write_blob(dir: &Path, blob: &str, m: &DMatrix<f32>) -> Result<()> {
    let path = dir.join(blob);
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    fs::write(&path, encode_row_major(m)).map_err(|e| Error::io(&path, e))
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<Model> {
    let dir = dir.as_ref();
    let manifest: ModelManifest = read_json(&dir.join(MANIFEST_FILE))?;
    manifest.validate()?;
    let mut matrices = BTreeMap::new();
    for layer in &manifest.layers {
        for rec in &layer.matrices {
            let m = read_blob(dir, &rec.name, &rec.blob, rec.rows, rec.cols)?;
            matrices.insert(rec.name.clone(), m);
        }
    }
    Model::new(manifest, matrices)
}

pub fn save_model(
    manifest: &ModelManifest,
    matrices: &BTreeMap<String, DMatrix<f32>>,
    dir: impl AsRef<Path>,
) -> Result<()> {
    let dir = dir.as_ref();
    let model = Model {
        manifest: manifest.clone(),
        matrices: matrices.clone(),
    };
    model.validate()?;
    ensure_dir(dir)?;
    for layer in &manifest.layers {
        for rec in &layer.matrices {
            write_blob(dir, &rec.blob, &matrices[&rec.name])?;
        }
    }
    write_json(&dir.join(MANIFEST_FILE), manifest)
}

/// Reference to a 2-D blob inside a container.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobRef {
    pub blob: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct CalibrationManifest {
    format_version: u32,
    sample_count: usize,
    /// layer name -> target-matrix input activations (d_col x samples)
    calibration: BTreeMap<String, BlobRef>,
    /// model-level inputs (hidden_dim x samples), used by the chain evaluator
    #[serde(default, skip_serializing_if = "Option::is_none")]
    input: Option<BlobRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    padding: Option<Vec<bool>>,
}

/// Per-layer calibration inputs, one column per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationSet {
    pub sample_count: usize,
    pub layers: BTreeMap<String, DMatrix<f32>>,
    pub input: Option<DMatrix<f32>>,
    pub padding: Option<Vec<bool>>,
}

impl CalibrationSet {
    pub fn layer(&self, name: &str) -> Result<&DMatrix<f32>> {
        self.layers
            .get(name)
            .ok_or_else(|| Error::InvalidModel(format!("no calibration data for layer {name}")))
    }

    /// Keeps the first `budget` samples.
    pub fn truncated(&self, budget: usize) -> CalibrationSet {
        let n = self.sample_count.min(budget.max(1));
        let cut = |m: &DMatrix<f32>| m.columns(0, n).into_owned();
        CalibrationSet {
            sample_count: n,
            layers: self.layers.iter().map(|(k, v)| (k.clone(), cut(v))).collect(),
            input: self.input.as_ref().map(cut),
            padding: self.padding.as_ref().map(|p| p[..n.min(p.len())].to_vec()),
        }
    }

    pub fn validate(&self, manifest: &ModelManifest) -> Result<()> {
        if self.sample_count == 0 {
            return Err(Error::InvalidArgument("calibration needs at least one sample".into()));
        }
        for (name, x) in &self.layers {
            let layer = manifest
                .layer(name)
                .ok_or_else(|| Error::InvalidModel(format!("calibration for unknown layer {name}")))?;
            let target = layer.target().expect("validated layer has matrices");
            if x.nrows() != target.cols {
                return Err(Error::ShapeMismatch {
                    name: format!("calibration/{name}"),
                    detail: format!(
                        "has {} rows but matrix {} has {} columns",
                        x.nrows(),
                        target.name,
                        target.cols
                    ),
                });
            }
            if x.ncols() != self.sample_count {
                return Err(Error::ShapeMismatch {
                    name: format!("calibration/{name}"),
                    detail: format!("has {} samples, expected {}", x.ncols(), self.sample_count),
                });
            }
        }
        if let Some(input) = &self.input {
            if input.nrows() != manifest.hidden_dim || input.ncols() != self.sample_count {
                return Err(Error::ShapeMismatch {
                    name: "calibration/input".into(),
                    detail: format!(
                        "expected {}x{}, got {}x{}",
                        manifest.hidden_dim,
                        self.sample_count,
                        input.nrows(),
                        input.ncols()
                    ),
                });
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        ensure_dir(dir)?;
        let mut calibration = BTreeMap::new();
        for (name, x) in &self.layers {
            let blob = format!("calib.{name}.bin");
            write_blob(dir, &blob, x)?;
            calibration.insert(
                name.clone(),
                BlobRef {
                    blob,
                    rows: x.nrows(),
                    cols: x.ncols(),
                },
            );
        }
        let input = match &self.input {
            Some(x) => {
                let blob = "calib.input.bin".to_string();
                write_blob(dir, &blob, x)?;
                Some(BlobRef {
                    blob,
                    rows: x.nrows(),
                    cols: x.ncols(),
                })
            }
            None => None,
        };
        let manifest = CalibrationManifest {
            format_version: FORMAT_VERSION,
            sample_count: self.sample_count,
            calibration,
            input,
            padding: self.padding.clone(),
        };
        write_json(&dir.join(CALIBRATION_FILE), &manifest)
    }
}

/// Loads calibration activations, keeping at most `budget` samples
/// ([`DEFAULT_SAMPLE_BUDGET`] when `None`).
pub fn load_calibration(
    dir: impl AsRef<Path>,
    manifest: &ModelManifest,
    budget: Option<usize>,
) -> Result<CalibrationSet> {
    let dir = dir.as_ref();
    let cm: CalibrationManifest = read_json(&dir.join(CALIBRATION_FILE))?;
    if cm.format_version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: cm.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let mut layers = BTreeMap::new();
    for (name, r) in &cm.calibration {
        let x = read_blob(dir, &format!("calibration/{name}"), &r.blob, r.rows, r.cols)?;
        layers.insert(name.clone(), x);
    }
    let input = cm
        .input
        .as_ref()
        .map(|r| read_blob(dir, "calibration/input", &r.blob, r.rows, r.cols))
        .transpose()?;
    let set = CalibrationSet {
        sample_count: cm.sample_count,
        layers,
        input,
        padding: cm.padding,
    };
    set.validate(manifest)?;
    let budget = budget.unwrap_or(DEFAULT_SAMPLE_BUDGET);
    if budget == 0 {
        return Err(Error::InvalidArgument("sample budget must be at least 1".into()));
    }
    Ok(if budget < set.sample_count {
        set.truncated(budget)
    } else {
        set
    })
}
