//! Dense encoder math: the alignment encoder, its gradients, and AdamW.

mod adamw;
mod encoder;
mod params;

pub use adamw::{adamw_step, AdamWConfig, AdamWState};
pub use encoder::{encoder_backward, encoder_backward_into, encoder_forward, EncoderTape, MaskedSequence};
pub use params::{Affine, LayerNormParams, RamDims, RamParams, Role};

use crate::matrix::Matrix;

/// Scales every nonzero row to unit Euclidean norm; zero rows stay zero.
pub fn l2_normalize_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|x| *x /= norm);
        }
    }
    out
}

/// Backward of [`l2_normalize_rows`]: for `y = x/|x|`,
/// `dx = (dy − y·(y·dy)) / |x|`. Zero rows pass zero gradient.
pub fn l2_normalize_rows_backward(input: &Matrix, output: &Matrix, grad_out: &Matrix) -> Matrix {
    let mut dx = Matrix::zeros(input.rows(), input.cols());
    for i in 0..input.rows() {
        let norm = input.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let y = output.row(i);
        let dy = grad_out.row(i);
        let proj: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
        for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
            *d = (dy[j] - y[j] * proj) / norm;
        }
    }
    dx
}
