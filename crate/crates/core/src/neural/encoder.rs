//! Single-layer post-norm transformer encoder with a hand-written backward
//! pass.
//!
//! ```text
//! z   = LayerNorm1(x + MHA(x))
//! out = LayerNorm2(z + W2 · relu(W1 · z))
//! ```
//!
//! Padding rows never act as attention keys and produce zero output. The
//! implementation drops them before attention, which is exactly a `-inf`
//! logit mask on their columns, then scatters results back to full length.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

use super::params::{LayerNormParams, RamDims, RamParams};

const LN_EPS: f64 = 1e-5;

/// Embedded sequence with a validity flag per row (`false` = padding).
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedSequence {
    pub features: Matrix,
    pub valid: Vec<bool>,
}

impl MaskedSequence {
    pub fn new(features: Matrix, valid: Vec<bool>) -> Result<Self> {
        if features.rows() != valid.len() {
            return Err(Error::dims(
                "MaskedSequence",
                format!("{} validity flags", features.rows()),
                valid.len(),
            ));
        }
        Ok(MaskedSequence { features, valid })
    }

    /// Every row valid.
    pub fn dense(features: Matrix) -> Self {
        let valid = vec![true; features.rows()];
        MaskedSequence { features, valid }
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn valid_indices(&self) -> Vec<usize> {
        (0..self.valid.len()).filter(|&i| self.valid[i]).collect()
    }
}

struct LnCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

/// Activations recorded by [`encoder_forward`]. Consumed by
/// [`encoder_backward`], so a tape cannot be replayed.
pub struct EncoderTape {
    dims: RamDims,
    len: usize,
    valid_idx: Vec<usize>,
    x: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Vec<Matrix>,
    ctx: Matrix,
    ln1: LnCache,
    z: Matrix,
    hidden_pre: Matrix,
    hidden: Matrix,
    ln2: LnCache,
}

impl EncoderTape {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn layer_norm(x: &Matrix, p: &LayerNormParams) -> (Matrix, LnCache) {
    let (n, d) = x.shape();
    let mut xhat = Matrix::zeros(n, d);
    let mut inv_std = Vec::with_capacity(n);
    let mut y = Matrix::zeros(n, d);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        let xh = xhat.row_mut(i);
        for j in 0..d {
            xh[j] = (row[j] - mean) * is;
        }
        let yr = y.row_mut(i);
        for j in 0..d {
            yr[j] = p.gamma[j] * xhat[(i, j)] + p.beta[j];
        }
    }
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward(
    dy: &Matrix,
    cache: &LnCache,
    p: &LayerNormParams,
    grad: &mut LayerNormParams,
) -> Matrix {
    let (n, d) = dy.shape();
    let mut dx = Matrix::zeros(n, d);
    let mut dxhat = vec![0.0; d];
    for i in 0..n {
        let dyr = dy.row(i);
        let xh = cache.xhat.row(i);
        for j in 0..d {
            grad.gamma[j] += dyr[j] * xh[j];
            grad.beta[j] += dyr[j];
            dxhat[j] = dyr[j] * p.gamma[j];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let is = cache.inv_std[i];
        let dxr = dx.row_mut(i);
        for j in 0..d {
            dxr[j] = is * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    dx
}

fn softmax_rows(m: &mut Matrix) {
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
}

fn check_dims(params: &RamParams, cols: usize) -> Result<()> {
    params.dims.validate()?;
    if cols != params.dims.model_dim {
        return Err(Error::dims(
            "encoder input width",
            params.dims.model_dim,
            cols,
        ));
    }
    Ok(())
}

/// Runs the encoder layer. Output rows at padding positions are zero.
pub fn encoder_forward(params: &RamParams, seq: &MaskedSequence) -> Result<(Matrix, EncoderTape)> {
    check_dims(params, seq.features.cols())?;
    if seq.features.rows() != seq.valid.len() {
        return Err(Error::dims(
            "encoder sequence",
            format!("{} validity flags", seq.features.rows()),
            seq.valid.len(),
        ));
    }
    let dims = params.dims;
    let (d, heads, dh) = (dims.model_dim, dims.heads, dims.head_dim());
    let valid_idx = seq.valid_indices();
    let x = seq.features.select_rows(&valid_idx);
    let n = x.rows();

    let q = params.query.forward(&x);
    let k = params.key.forward(&x);
    let v = params.value.forward(&x);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = Matrix::zeros(n, d);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.col_block(h * dh, dh);
        let kh = k.col_block(h * dh, dh);
        let vh = v.col_block(h * dh, dh);
        let mut p = qh.matmul_nt(&kh).map(|s| s * scale);
        softmax_rows(&mut p);
        ctx.set_col_block(h * dh, &p.matmul(&vh));
        probs.push(p);
    }
    let mut r1 = params.output.forward(&ctx);
    r1.add_assign(&x);
    let (z, ln1) = layer_norm(&r1, &params.norm1);

    let hidden_pre = params.ffn_in.forward(&z);
    let hidden = hidden_pre.map(|a| a.max(0.0));
    let mut r2 = params.ffn_out.forward(&hidden);
    r2.add_assign(&z);
    let (y, ln2) = layer_norm(&r2, &params.norm2);

    let mut out = Matrix::zeros(seq.len(), d);
    for (row, &i) in valid_idx.iter().enumerate() {
        out.row_mut(i).copy_from_slice(y.row(row));
    }
    let tape = EncoderTape {
        dims,
        len: seq.len(),
        valid_idx,
        x,
        q,
        k,
        v,
        probs,
        ctx,
        ln1,
        z,
        hidden_pre,
        hidden,
        ln2,
    };
    Ok((out, tape))
}

/// Reverse-mode pass for one [`encoder_forward`] call.
///
/// Returns parameter gradients (projection tensors stay zero) and the
/// gradient with respect to the input sequence, zero at padding rows.
pub fn encoder_backward(
    params: &RamParams,
    tape: EncoderTape,
    grad_out: &Matrix,
) -> Result<(RamParams, Matrix)> {
    let mut grads = params.zeros_like();
    let grad_in = encoder_backward_into(params, tape, grad_out, &mut grads)?;
    Ok((grads, grad_in))
}

/// Like [`encoder_backward`] but accumulates into an existing gradient.
pub fn encoder_backward_into(
    params: &RamParams,
    tape: EncoderTape,
    grad_out: &Matrix,
    grads: &mut RamParams,
) -> Result<Matrix> {
    if tape.dims != params.dims || grads.dims != params.dims {
        return Err(Error::dims(
            "encoder tape",
            format!("{:?}", params.dims),
            format!("{:?}", tape.dims),
        ));
    }
    if grad_out.shape() != (tape.len, tape.dims.model_dim) {
        return Err(Error::dims(
            "encoder grad_out",
            format!("{}x{}", tape.len, tape.dims.model_dim),
            format!("{}x{}", grad_out.rows(), grad_out.cols()),
        ));
    }
    let dims = tape.dims;
    let (d, heads, dh) = (dims.model_dim, dims.heads, dims.head_dim());
    let dy = grad_out.select_rows(&tape.valid_idx);
    let n = dy.rows();

    let dr2 = layer_norm_backward(&dy, &tape.ln2, &params.norm2, &mut grads.norm2);
    let dhidden = params.ffn_out.backward(&tape.hidden, &dr2, &mut grads.ffn_out);
    let mut dpre = dhidden;
    for (g, &a) in dpre.as_mut_slice().iter_mut().zip(tape.hidden_pre.as_slice()) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
    let mut dz = params.ffn_in.backward(&tape.z, &dpre, &mut grads.ffn_in);
    dz.add_assign(&dr2);

    let dr1 = layer_norm_backward(&dz, &tape.ln1, &params.norm1, &mut grads.norm1);
    let dctx = params.output.backward(&tape.ctx, &dr1, &mut grads.output);

    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Matrix::zeros(n, d);
    let mut dk = Matrix::zeros(n, d);
    let mut dv = Matrix::zeros(n, d);
    for h in 0..heads {
        let p = &tape.probs[h];
        let qh = tape.q.col_block(h * dh, dh);
        let kh = tape.k.col_block(h * dh, dh);
        let vh = tape.v.col_block(h * dh, dh);
        let doh = dctx.col_block(h * dh, dh);
        let dp = doh.matmul_nt(&vh);
        dv.set_col_block(h * dh, &p.matmul_tn(&doh));
        let mut ds = Matrix::zeros(n, n);
        for i in 0..n {
            let pr = p.row(i);
            let dpr = dp.row(i);
            let dot: f64 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
            let dsr = ds.row_mut(i);
            for j in 0..n {
                dsr[j] = pr[j] * (dpr[j] - dot) * scale;
            }
        }
        dq.set_col_block(h * dh, &ds.matmul(&kh));
        dk.set_col_block(h * dh, &ds.matmul_tn(&qh));
    }
    let mut dx = dr1;
    dx.add_assign(&params.query.backward(&tape.x, &dq, &mut grads.query));
    dx.add_assign(&params.key.backward(&tape.x, &dk, &mut grads.key));
    dx.add_assign(&params.value.backward(&tape.x, &dv, &mut grads.value));

    let mut grad_in = Matrix::zeros(tape.len, d);
    for (row, &i) in tape.valid_idx.iter().enumerate() {
        grad_in.row_mut(i).copy_from_slice(dx.row(row));
    }
    Ok(grad_in)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn small_dims() -> RamDims {
        RamDims { input_dim: 4, model_dim: 8, heads: 2, ffn_dim: 12 }
    }

    fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Perturbs the non-identity layer norms so their gradients are generic.
    fn random_params(seed: u64) -> RamParams {
        let mut p = RamParams::init(small_dims(), seed).unwrap();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed ^ 0xabc);
        for x in p.norm1.gamma.iter_mut().chain(p.norm2.gamma.iter_mut()) {
            *x += rng.random_range(-0.3..0.3);
        }
        for x in p.norm1.beta.iter_mut().chain(p.norm2.beta.iter_mut()) {
            *x += rng.random_range(-0.3..0.3);
        }
        p
    }

    fn weighted_loss(p: &RamParams, seq: &MaskedSequence, w: &Matrix) -> f64 {
        let (out, _) = encoder_forward(p, seq).unwrap();
        out.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn padding_rows_are_inert() {
        let p = random_params(1);
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(9);
        let feats = random_matrix(5, 8, &mut rng);
        let valid = vec![true, false, true, true, false];
        let seq = MaskedSequence::new(feats.clone(), valid.clone()).unwrap();
        let (out, tape) = encoder_forward(&p, &seq).unwrap();
        assert!(out.row(1).iter().all(|&x| x == 0.0));
        assert!(out.row(4).iter().all(|&x| x == 0.0));

        let mut other = feats;
        other.row_mut(1).iter_mut().for_each(|x| *x = 42.0);
        let seq2 = MaskedSequence::new(other, valid).unwrap();
        let (out2, tape2) = encoder_forward(&p, &seq2).unwrap();
        assert_eq!(out, out2);

        let w = random_matrix(5, 8, &mut rng);
        let (g1, gin1) = encoder_backward(&p, tape, &w).unwrap();
        let (g2, gin2) = encoder_backward(&p, tape2, &w).unwrap();
        assert_eq!(g1, g2);
        assert_eq!(gin1, gin2);
        assert!(gin1.row(1).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn all_padding_gives_zeros() {
        let p = random_params(2);
        let seq = MaskedSequence::new(Matrix::from_fn(3, 8, |i, j| (i + j) as f64), vec![false; 3])
            .unwrap();
        let (out, tape) = encoder_forward(&p, &seq).unwrap();
        assert_eq!(out, Matrix::zeros(3, 8));
        let (g, gin) = encoder_backward(&p, tape, &Matrix::from_fn(3, 8, |_, _| 1.0)).unwrap();
        assert_eq!(g.max_abs(), 0.0);
        assert_eq!(gin, Matrix::zeros(3, 8));
    }

    #[test]
    fn permutation_equivariant() {
        let p = random_params(3);
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(4);
        let x = random_matrix(4, 8, &mut rng);
        let (out, _) = encoder_forward(&p, &MaskedSequence::dense(x.clone())).unwrap();
        let perm = [2, 0, 3, 1];
        let (out_p, _) = encoder_forward(&p, &MaskedSequence::dense(x.select_rows(&perm))).unwrap();
        assert!(out_p.max_abs_diff(&out.select_rows(&perm)) < 1e-12);
    }

    #[test]
    fn single_row_depends_on_itself_only() {
        let p = random_params(5);
        let row = Matrix::from_fn(1, 8, |_, j| j as f64 * 0.1 - 0.3);
        let (a, _) = encoder_forward(&p, &MaskedSequence::dense(row.clone())).unwrap();
        let mut padded = Matrix::zeros(3, 8);
        padded.row_mut(2).copy_from_slice(row.row(0));
        padded.row_mut(0).iter_mut().for_each(|x| *x = 7.0);
        let seq = MaskedSequence::new(padded, vec![false, false, true]).unwrap();
        let (b, _) = encoder_forward(&p, &seq).unwrap();
        assert_eq!(a.row(0), b.row(2));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let p = random_params(6);
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(6);
        let seq = MaskedSequence::dense(random_matrix(4, 8, &mut rng));
        let (_, tape) = encoder_forward(&p, &seq).unwrap();
        let (g, gin) = encoder_backward(&p, tape, &Matrix::zeros(4, 8)).unwrap();
        assert_eq!(g.max_abs(), 0.0);
        assert_eq!(gin, Matrix::zeros(4, 8));
    }

    #[test]
    fn rejects_bad_shapes() {
        let p = random_params(7);
        let seq = MaskedSequence::dense(Matrix::zeros(2, 5));
        assert!(encoder_forward(&p, &seq).is_err());
        let seq = MaskedSequence::dense(Matrix::zeros(2, 8));
        let (_, tape) = encoder_forward(&p, &seq).unwrap();
        assert!(encoder_backward(&p, tape, &Matrix::zeros(3, 8)).is_err());
        assert!(MaskedSequence::new(Matrix::zeros(2, 8), vec![true]).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let p = random_params(8);
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(8);
        let seq = MaskedSequence::new(
            random_matrix(5, 8, &mut rng),
            vec![true, true, false, true, true],
        )
        .unwrap();
        let w = random_matrix(5, 8, &mut rng);
        let (_, tape) = encoder_forward(&p, &seq).unwrap();
        let (g, gin) = encoder_backward(&p, tape, &w).unwrap();

        let h = 1e-5;
        let check = |analytic: f64, plus: f64, minus: f64, what: &str| {
            let numeric = (plus - minus) / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(rel < 1e-4, "{what}: analytic {analytic} numeric {numeric}");
        };

        let names: Vec<&str> = p.tensors().iter().map(|(n, _)| *n).collect();
        for (t, name) in names.iter().enumerate() {
            if name.contains("_proj") {
                continue;
            }
            let len = p.tensors()[t].1.len();
            for k in 0..len {
                let mut pp = p.clone();
                pp.tensors_mut()[t].1[k] += h;
                let mut pm = p.clone();
                pm.tensors_mut()[t].1[k] -= h;
                check(
                    g.tensors()[t].1[k],
                    weighted_loss(&pp, &seq, &w),
                    weighted_loss(&pm, &seq, &w),
                    name,
                );
            }
        }
        for i in 0..5 {
            for j in 0..8 {
                let mut sp = seq.clone();
                sp.features[(i, j)] += h;
                let mut sm = seq.clone();
                sm.features[(i, j)] -= h;
                check(gin[(i, j)], weighted_loss(&p, &sp, &w), weighted_loss(&p, &sm, &w), "input");
            }
        }
    }
}
