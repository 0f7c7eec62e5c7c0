//! Small dense helpers shared by the numeric modules.

use nalgebra::{Cholesky, DMatrix};

pub type Mat = DMatrix<f64>;

pub fn to_f64(m: &DMatrix<f32>) -> Mat {
    m.map(f64::from)
}

pub fn to_f32(m: &Mat) -> DMatrix<f32> {
    m.map(|v| v as f32)
}

/// Decodes a row-major little-endian binary32 payload.
pub fn decode_row_major(bytes: &[u8], rows: usize, cols: usize) -> Option<DMatrix<f32>> {
    if bytes.len() != rows * cols * 4 {
        return None;
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Some(DMatrix::from_row_slice(rows, cols, &values))
}

pub fn encode_row_major(m: &DMatrix<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(m.len() * 4);
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
    out
}

/// Submatrix at the given row and column indices, in the order given.
pub fn select(m: &Mat, rows: &[usize], cols: &[usize]) -> Mat {
    Mat::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

pub fn select_cols(m: &Mat, cols: &[usize]) -> Mat {
    Mat::from_fn(m.nrows(), cols.len(), |i, j| m[(i, cols[j])])
}

pub fn symmetrize(m: &mut Mat) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Inverse of a symmetric positive definite matrix, `None` when the
/// Cholesky factorization breaks down.
pub fn spd_inverse(m: &Mat) -> Option<Mat> {
    if m.nrows() == 1 {
        let v = m[(0, 0)];
        return (v > 0.0 && v.is_finite()).then(|| Mat::from_element(1, 1, 1.0 / v));
    }
    let chol = Cholesky::new(m.clone())?;
    let l = chol.l_dirty();
    if (0..m.nrows()).any(|i| !(l[(i, i)].is_finite() && l[(i, i)] > 0.0)) {
        return None;
    }
    let mut inv = chol.inverse();
    symmetrize(&mut inv);
    Some(inv)
}

/// Largest relative asymmetry `|a_ij - a_ji| / max|a|`.
pub fn asymmetry(m: &Mat) -> f64 {
    let scale = m.amax();
    if scale == 0.0 {
        return 0.0;
    }
    let n = m.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst / scale
}
