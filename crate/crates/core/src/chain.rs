//! Sequential residual-block models.
//!
//! Each layer computes `h + M_k σ(… σ(M_1 h))`. A block whose inner width
//! has been pruned to zero contributes nothing and passes `h` through.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{to_f64, Mat};
use crate::pruner::{compact, LayerDatabase, PrunedVariant};
use crate::search::Evaluator;
use crate::store::{Activation, LayerSpec, Model, StructureGroup};

#[derive(Clone, Debug)]
pub struct Block {
    pub name: String,
    pub matrices: Vec<Mat>,
    pub activation: Activation,
}

impl Block {
    pub fn from_layer(model: &Model, layer: &LayerSpec) -> Result<Self> {
        let matrices = layer
            .matrices
            .iter()
            .map(|r| model.matrix(&r.name).map(to_f64))
            .collect::<Result<Vec<_>>>()?;
        Ok(Block {
            name: layer.name.clone(),
            matrices,
            activation: layer.activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.matrices[0].ncols()
    }

    fn check_inner(&self) -> Result<()> {
        for pair in self.matrices.windows(2) {
            if pair[1].ncols() != pair[0].nrows() {
                return Err(Error::ShapeMismatch {
                    name: self.name.clone(),
                    detail: format!(
                        "inner matrices do not chain: {}x{} then {}x{}",
                        pair[0].nrows(),
                        pair[0].ncols(),
                        pair[1].nrows(),
                        pair[1].ncols()
                    ),
                });
            }
        }
        Ok(())
    }

    /// Input to the last matrix, `σ(M_{k-1} … )`, or `h` for one-matrix blocks.
    pub fn target_input(&self, h: &Mat) -> Mat {
        let k = self.matrices.len();
        if k == 1 {
            return h.clone();
        }
        let mut z = &self.matrices[0] * h;
        for m in &self.matrices[1..k - 1] {
            z.apply(|v| *v = self.activation.apply(*v));
            z = m * &z;
        }
        z.apply(|v| *v = self.activation.apply(*v));
        z
    }

    pub fn forward(&self, h: &Mat) -> Mat {
        let x = self.target_input(h);
        h + self.matrices.last().expect("non-empty block") * x
    }
}

#[derive(Clone, Debug)]
pub struct Chain {
    pub hidden_dim: usize,
    pub blocks: Vec<Block>,
}

impl Chain {
    pub fn from_model(model: &Model) -> Result<Self> {
        check_layout(model)?;
        let blocks = model
            .manifest
            .layers
            .iter()
            .map(|l| Block::from_layer(model, l))
            .collect::<Result<Vec<_>>>()?;
        Ok(Chain {
            hidden_dim: model.manifest.hidden_dim,
            blocks,
        })
    }

    fn check_stitch(&self, prev: Option<&Block>, block: &Block, h_rows: usize) -> Result<()> {
        block.check_inner()?;
        let out_rows = block.matrices.last().expect("non-empty").nrows();
        if block.input_dim() != h_rows || out_rows != h_rows {
            return Err(Error::ShapeMismatch {
                name: format!("{} -> {}", prev.map_or("input", |p| p.name.as_str()), block.name),
                detail: format!(
                    "block maps {} -> {} but the hidden state has {} rows",
                    block.input_dim(),
                    out_rows,
                    h_rows
                ),
            });
        }
        Ok(())
    }

    pub fn forward(&self, input: &Mat) -> Result<Mat> {
        self.run(self.blocks.iter(), input)
    }

    fn run<'a>(&self, blocks: impl Iterator<Item = &'a Block>, input: &Mat) -> Result<Mat> {
        let mut h = input.clone();
        let mut prev = None;
        for b in blocks {
            self.check_stitch(prev, b, h.nrows())?;
            h = b.forward(&h);
            prev = Some(b);
        }
        Ok(h)
    }

    /// Target-matrix inputs of every block when running the dense chain.
    pub fn target_inputs(&self, input: &Mat) -> Result<Vec<Mat>> {
        let mut h = input.clone();
        let mut out = Vec::with_capacity(self.blocks.len());
        let mut prev = None;
        for b in &self.blocks {
            self.check_stitch(prev, b, h.nrows())?;
            out.push(b.target_input(&h));
            h = b.forward(&h);
            prev = Some(b);
        }
        Ok(out)
    }
}

/// Pruning a group is only meaningful for the chain when its target is the
/// block's last matrix and its producer the one before it.
pub fn check_layout(model: &Model) -> Result<()> {
    for layer in &model.manifest.layers {
        let Some(group) = &layer.group else { continue };
        let k = layer.matrices.len();
        if layer.matrices[k - 1].name != group.target_matrix {
            return Err(Error::InvalidModel(format!(
                "layer {}: pruned matrix {} must be the last matrix of the block",
                layer.name, group.target_matrix
            )));
        }
        if let Some(p) = &group.linked_producer {
            if k < 2 || layer.matrices[k - 2].name != p.matrix {
                return Err(Error::InvalidModel(format!(
                    "layer {}: linked producer {} must directly precede {}",
                    layer.name, p.matrix, group.target_matrix
                )));
            }
        }
    }
    Ok(())
}

/// A layer's matrices after physically removing a variant's pruned
/// structures.
#[derive(Clone, Debug)]
pub struct CompactLayer {
    pub matrices: Vec<(String, DMatrix<f32>)>,
    pub group: StructureGroup,
}

impl CompactLayer {
    /// `true` when every structure was removed.
    pub fn is_empty(&self) -> bool {
        self.matrices.iter().any(|(_, m)| m.is_empty())
    }

    pub fn block(&self, name: &str, activation: Activation) -> Block {
        Block {
            name: name.to_string(),
            matrices: self.matrices.iter().map(|(_, m)| to_f64(m)).collect(),
            activation,
        }
    }
}

pub fn compact_layer(
    model: &Model,
    layer: &LayerSpec,
    group: &StructureGroup,
    variant: &PrunedVariant,
) -> Result<CompactLayer> {
    let target = variant.weights.map(|v| v as f32);
    let producer = match &group.linked_producer {
        Some(p) => Some(model.matrix(&p.matrix)?),
        None => None,
    };
    let c = compact(&target, producer, group, &variant.mask.columns)?;
    let producer_name = group.linked_producer.as_ref().map(|p| p.matrix.as_str());
    let mut matrices = Vec::with_capacity(layer.matrices.len());
    for rec in &layer.matrices {
        let m = if rec.name == group.target_matrix {
            c.target.clone()
        } else if Some(rec.name.as_str()) == producer_name {
            c.producer.clone().expect("producer compacted")
        } else {
            model.matrix(&rec.name)?.clone()
        };
        matrices.push((rec.name.clone(), m));
    }
    Ok(CompactLayer {
        matrices,
        group: c.group,
    })
}

/// End-to-end loss of the compressed chain: mean squared error against the
/// dense chain's outputs on fixed inputs.
pub struct ChainEvaluator {
    chain: Chain,
    input: Mat,
    reference: Mat,
    /// group index -> (layer index, block per level)
    options: Vec<(usize, Vec<Block>)>,
}

impl ChainEvaluator {
    /// `databases` must be in search-group order.
    pub fn new(model: &Model, databases: &[LayerDatabase], input: &DMatrix<f32>) -> Result<Self> {
        let chain = Chain::from_model(model)?;
        let input = to_f64(input);
        let reference = chain.forward(&input)?;
        let index: BTreeMap<&str, usize> = model
            .manifest
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| (l.name.as_str(), i))
            .collect();
        let mut options = Vec::with_capacity(databases.len());
        for db in databases {
            let li = *index
                .get(db.layer.as_str())
                .ok_or_else(|| Error::InvalidModel(format!("database for unknown layer {}", db.layer)))?;
            let layer = &model.manifest.layers[li];
            let blocks = db
                .variants
                .iter()
                .map(|v| Ok(compact_layer(model, layer, &db.group, v)?.block(&layer.name, layer.activation)))
                .collect::<Result<Vec<_>>>()?;
            options.push((li, blocks));
        }
        Ok(ChainEvaluator {
            chain,
            input,
            reference,
            options,
        })
    }

    pub fn output(&self, levels: &[usize]) -> Result<Mat> {
        if levels.len() != self.options.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} level choices, got {}",
                self.options.len(),
                levels.len()
            )));
        }
        let mut chosen: Vec<&Block> = self.chain.blocks.iter().collect();
        for ((li, blocks), &lvl) in self.options.iter().zip(levels) {
            chosen[*li] = blocks
                .get(lvl)
                .ok_or_else(|| Error::InvalidArgument(format!("level {lvl} out of range")))?;
        }
        self.chain.run(chosen.into_iter(), &self.input)
    }
}

impl Evaluator for ChainEvaluator {
    fn evaluate(&self, levels: &[usize]) -> Result<f64> {
        let out = self.output(levels)?;
        Ok((out - &self.reference).norm_squared() / self.reference.len() as f64)
    }
}
