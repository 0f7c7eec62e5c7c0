//! Layer-wise Hessian `2·X·Xᵀ + λI` and its inverse.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{spd_inverse, symmetrize, Mat};

/// Maximum number of times the damping is multiplied by 10 after a failed
/// factorization.
pub const MAX_DAMPING_RETRIES: usize = 5;

/// How the diagonal damping λ is chosen at finalization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Damping {
    /// Fixed λ.
    Absolute(f64),
    /// λ = factor × mean(diag(gram)).
    Relative(f64),
}

impl Default for Damping {
    fn default() -> Self {
        Damping::Relative(0.01)
    }
}

impl Damping {
    pub fn resolve(self, gram: &Mat) -> f64 {
        match self {
            Damping::Absolute(l) => l,
            Damping::Relative(f) => {
                let n = gram.nrows().max(1) as f64;
                f * gram.diagonal().sum() / n
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct HessianState {
    dim: usize,
    gram: Mat,
    samples_seen: usize,
    damping: Option<f64>,
    inverse: Option<Mat>,
}

impl HessianState {
    pub fn new(dim: usize) -> Self {
        HessianState {
            dim,
            gram: Mat::zeros(dim, dim),
            samples_seen: 0,
            damping: None,
            inverse: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Accumulated `2·Σ X·Xᵀ`, without damping.
    pub fn gram(&self) -> &Mat {
        &self.gram
    }

    pub fn samples_seen(&self) -> usize {
        self.samples_seen
    }

    /// Effective λ used by the last successful [`finalize`](Self::finalize).
    pub fn damping(&self) -> Option<f64> {
        self.damping
    }

    pub fn inverse(&self) -> Option<&Mat> {
        self.inverse.as_ref()
    }

    /// Adds `2·X·Xᵀ` for a `dim × b` batch. Invalidates any inverse.
    pub fn accumulate(&mut self, batch: &Mat) -> Result<()> {
        if batch.nrows() != self.dim {
            return Err(Error::Dimension(format!(
                "batch has {} rows, Hessian dimension is {}",
                batch.nrows(),
                self.dim
            )));
        }
        self.gram.gemm(2.0, batch, &batch.transpose(), 1.0);
        symmetrize(&mut self.gram);
        self.samples_seen += batch.ncols();
        self.inverse = None;
        self.damping = None;
        Ok(())
    }

    pub fn accumulate_f32(&mut self, batch: &DMatrix<f32>) -> Result<()> {
        self.accumulate(&batch.map(f64::from))
    }

    /// Multiplies the accumulated gram by `c`.
    pub fn scale(&mut self, c: f64) {
        self.gram *= c;
        self.inverse = None;
        self.damping = None;
    }

    /// Inverts `gram + λI` by Cholesky. On breakdown λ is multiplied by 10
    /// (a zero λ restarts at 1e-8 × mean diagonal) up to
    /// [`MAX_DAMPING_RETRIES`] times.
    pub fn finalize(&mut self, damping: Damping, layer: &str) -> Result<()> {
        if self.samples_seen == 0 {
            return Err(Error::InvalidArgument(format!(
                "layer {layer}: cannot finalize a Hessian with no samples"
            )));
        }
        let mut lambda = damping.resolve(&self.gram);
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "damping must be finite and >= 0, got {lambda}"
            )));
        }
        for attempt in 0..=MAX_DAMPING_RETRIES {
            let mut h = self.gram.clone();
            for i in 0..self.dim {
                h[(i, i)] += lambda;
            }
            if let Some(inv) = spd_inverse(&h) {
                if attempt > 0 {
                    log::warn!("layer {layer}: Hessian needed damping {lambda:e} to factorize");
                }
                self.inverse = Some(inv);
                self.damping = Some(lambda);
                return Ok(());
            }
            lambda = if lambda > 0.0 {
                lambda * 10.0
            } else {
                let mean = self.gram.diagonal().sum() / self.dim.max(1) as f64;
                if mean > 0.0 {
                    1e-8 * mean
                } else {
                    1e-8
                }
            };
        }
        Err(Error::NotPositiveDefinite {
            layer: layer.to_string(),
            attempts: MAX_DAMPING_RETRIES + 1,
            damping: lambda / 10.0,
        })
    }
}

/// Builds and finalizes the Hessian of one layer from its `d_col × n`
/// calibration inputs, accumulating in column batches of `batch` samples.
pub fn layer_hessian(layer: &str, x: &DMatrix<f32>, batch: usize, damping: Damping) -> Result<HessianState> {
    let mut state = HessianState::new(x.nrows());
    let batch = batch.max(1);
    let mut start = 0;
    while start < x.ncols() {
        let len = batch.min(x.ncols() - start);
        state.accumulate(&x.columns(start, len).map(f64::from))?;
        start += len;
    }
    state.finalize(damping, layer)?;
    Ok(state)
}
