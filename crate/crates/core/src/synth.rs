//! Small synthetic residual chains with correlated inputs, for demos,
//! benchmarks and tests.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::chain::Chain;
use crate::error::{Error, Result};
use crate::linalg::{to_f32, to_f64};
use crate::store::{
    Activation, CalibrationSet, LayerSpec, MatrixRecord, Model, ModelManifest, StructureGroup, StructureKind,
    FORMAT_VERSION,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SynthLayer {
    /// `hidden -> width -> hidden` with ReLU, pruned by intermediate column.
    Ffn { width: usize },
    /// Value/output projections of `heads` heads of size `head_dim`,
    /// pruned by head.
    Heads { heads: usize, head_dim: usize },
}

#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub hidden: usize,
    pub layers: Vec<SynthLayer>,
    /// Rank of the latent factors behind the inputs; below `hidden` makes
    /// input features linearly dependent up to noise.
    pub input_rank: usize,
    pub noise: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn ffn_chain(hidden: usize, width: usize, layers: usize, seed: u64) -> Self {
        SynthSpec {
            hidden,
            layers: vec![SynthLayer::Ffn { width }; layers],
            input_rank: hidden / 2,
            noise: 0.05,
            seed,
        }
    }
}

fn normal(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Random chain whose intermediate units have widely spread importance.
pub fn synth_model(spec: &SynthSpec) -> Result<Model> {
    if spec.hidden == 0 || spec.layers.is_empty() {
        return Err(Error::InvalidArgument(
            "synthetic model needs a hidden size and layers".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let h = spec.hidden;
    let mut layers = Vec::new();
    let mut matrices = BTreeMap::new();
    for (i, l) in spec.layers.iter().enumerate() {
        let (name, width, structure_width, kind, activation) = match *l {
            SynthLayer::Ffn { width } => (format!("ffn{i}"), width, 1, StructureKind::FfnColumns, Activation::Relu),
            SynthLayer::Heads { heads, head_dim } => (
                format!("attn{i}"),
                heads * head_dim,
                head_dim,
                StructureKind::AttentionHeads,
                Activation::Identity,
            ),
        };
        if width == 0 {
            return Err(Error::InvalidArgument(format!("layer {name} has zero width")));
        }
        let up_name = format!("{name}.in");
        let down_name = format!("{name}.out");
        let up = normal(width, h, 1.0 / (h as f64).sqrt(), &mut rng);
        let mut down = normal(h, width, 0.5 / (width as f64).sqrt(), &mut rng);
        // log-uniform structure importance over two decades
        for s in 0..width / structure_width {
            let gain = 10f64.powf(rng.random_range(-1.0..1.0));
            for c in s * structure_width..(s + 1) * structure_width {
                down.column_mut(c).scale_mut(gain);
            }
        }
        matrices.insert(up_name.clone(), to_f32(&up));
        matrices.insert(down_name.clone(), to_f32(&down));
        let group = StructureGroup::contiguous(
            kind,
            &down_name,
            Some(&up_name),
            structure_width,
            width / structure_width,
        );
        layers.push(LayerSpec {
            name,
            matrices: vec![
                MatrixRecord::new(up_name, width, h),
                MatrixRecord::new(down_name, h, width),
            ],
            group: Some(group),
            activation,
            latency_key: None,
        });
    }
    let mut metadata = BTreeMap::new();
    metadata.insert("source".into(), format!("synthetic seed {}", spec.seed));
    Model::new(
        ModelManifest {
            format_version: FORMAT_VERSION,
            hidden_dim: h,
            layers,
            metadata,
        },
        matrices,
    )
}

/// `hidden × n` inputs drawn from a low-rank factor model plus noise.
pub fn synth_inputs(spec: &SynthSpec, n: usize, stream: u64) -> DMatrix<f64> {
    // the mixing matrix depends only on the spec so all streams share it
    let mut mix_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x6d69_7865);
    let rank = spec.input_rank.clamp(1, spec.hidden);
    let mix = normal(spec.hidden, rank, 1.0 / (rank as f64).sqrt(), &mut mix_rng);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15)));
    let z = normal(rank, n, 1.0, &mut rng);
    mix * z + normal(spec.hidden, n, spec.noise, &mut rng)
}

/// Calibration set for `model` on `n` samples of input stream `stream`:
/// model-level input plus every prunable layer's target input.
pub fn synth_calibration(model: &Model, spec: &SynthSpec, n: usize, stream: u64) -> Result<CalibrationSet> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let input = to_f32(&synth_inputs(spec, n, stream));
    let chain = Chain::from_model(model)?;
    let xs = chain.target_inputs(&to_f64(&input))?;
    let layers = model
        .manifest
        .layers
        .iter()
        .zip(xs)
        .filter(|(l, _)| l.group.is_some())
        .map(|(l, x)| (l.name.clone(), to_f32(&x)))
        .collect();
    Ok(CalibrationSet {
        sample_count: n,
        layers,
        input: Some(input),
        padding: None,
    })
}
