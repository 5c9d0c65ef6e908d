//! Representation alignment modules and affinity fusion.
//!
//! An alignment module embeds two input streams with per-role projections,
//! stacks them into one sequence, runs the encoder and returns unit-norm
//! aligned features per stream. TRAM pairs current humans with trajectories,
//! SRAM pairs humans with their mark boxes, STRAM is one of each with the
//! two affinities blended.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{box_features, mark_box, BBox, FrameSize, DEFAULT_MARK_AREA_FRACTION};
use crate::matrix::{AffinityMatrix, Matrix};
use crate::neural::{
    encoder_backward_into, encoder_forward, l2_normalize_rows, l2_normalize_rows_backward,
    EncoderTape, MaskedSequence, RamParams, Role,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RamKind {
    Tram,
    Sram,
    Stram,
}

impl RamKind {
    pub fn uses_temporal(self) -> bool {
        matches!(self, RamKind::Tram | RamKind::Stram)
    }

    pub fn uses_spatial(self) -> bool {
        matches!(self, RamKind::Sram | RamKind::Stram)
    }
}

impl fmt::Display for RamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RamKind::Tram => "tram",
            RamKind::Sram => "sram",
            RamKind::Stram => "stram",
        })
    }
}

impl FromStr for RamKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tram" => Ok(RamKind::Tram),
            "sram" => Ok(RamKind::Sram),
            "stram" => Ok(RamKind::Stram),
            other => Err(Error::invalid(
                "ram kind",
                format!("{other:?} (expected tram, sram or stram)"),
            )),
        }
    }
}

/// Trained weights for one alignment variant. STRAM holds two independent
/// encoders.
#[derive(Clone, Debug, PartialEq)]
pub struct RamModel {
    pub kind: RamKind,
    pub temporal: Option<RamParams>,
    pub spatial: Option<RamParams>,
}

impl RamModel {
    pub fn new(
        kind: RamKind,
        temporal: Option<RamParams>,
        spatial: Option<RamParams>,
    ) -> Result<Self> {
        if kind.uses_temporal() != temporal.is_some() || kind.uses_spatial() != spatial.is_some() {
            return Err(Error::invalid(
                "ram model",
                format!("{kind} needs exactly its own encoders"),
            ));
        }
        if let (Some(t), Some(s)) = (&temporal, &spatial) {
            if t.dims.input_dim != s.dims.input_dim {
                return Err(Error::dims(
                    "ram model input width",
                    t.dims.input_dim,
                    s.dims.input_dim,
                ));
            }
        }
        Ok(RamModel {
            kind,
            temporal,
            spatial,
        })
    }

    /// Fresh initialization; the spatial encoder uses a derived seed.
    pub fn init(kind: RamKind, dims: crate::neural::RamDims, seed: u64) -> Result<Self> {
        let temporal = kind
            .uses_temporal()
            .then(|| RamParams::init(dims, seed))
            .transpose()?;
        let spatial = kind
            .uses_spatial()
            .then(|| RamParams::init(dims, spatial_seed(seed)))
            .transpose()?;
        RamModel::new(kind, temporal, spatial)
    }

    pub fn input_dim(&self) -> usize {
        self.temporal
            .as_ref()
            .or(self.spatial.as_ref())
            .map(|p| p.dims.input_dim)
            .unwrap_or(4)
    }

    pub fn model_dim(&self) -> usize {
        self.temporal
            .as_ref()
            .or(self.spatial.as_ref())
            .map(|p| p.dims.model_dim)
            .unwrap_or(0)
    }
}

pub(crate) fn spatial_seed(seed: u64) -> u64 {
    seed ^ 0x5a5a_5a5a_5a5a_5a5a
}

/// Fusion weights: `alpha_t`, `alpha_s` weight the raw affinity, `lambda`
/// weights the spatial branch in STRAM.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionCoefficients {
    pub alpha_t: f64,
    pub alpha_s: f64,
    pub lambda: f64,
}

impl FusionCoefficients {
    pub fn new(alpha_t: f64, alpha_s: f64, lambda: f64) -> Result<Self> {
        let c = FusionCoefficients {
            alpha_t,
            alpha_s,
            lambda,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let in_half_open = |a: f64| a > 0.0 && a <= 1.0;
        if !in_half_open(self.alpha_t) || !in_half_open(self.alpha_s) {
            return Err(Error::invalid(
                "fusion alpha",
                format!("alpha_t={} alpha_s={} must lie in (0, 1]", self.alpha_t, self.alpha_s),
            ));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(
                "fusion lambda",
                format!("{} must lie in [0, 1]", self.lambda),
            ));
        }
        Ok(())
    }
}

/// Forward record of one alignment call, consumed by [`align_backward`].
pub struct AlignTape {
    first_role: Role,
    second_role: Role,
    first_input: Matrix,
    second_input: Matrix,
    slot: usize,
    encoder: EncoderTape,
    first_raw: Matrix,
    second_raw: Matrix,
    first_out: Matrix,
    second_out: Matrix,
}

/// Aligned, unit-norm features of both streams.
#[derive(Clone, Debug, PartialEq)]
pub struct Aligned {
    pub first: Matrix,
    pub second: Matrix,
}

/// Projects both streams, stacks them (first stream, then second) and runs
/// the encoder.
///
/// With `pad_to = Some(p)` each stream occupies `p` slots and the remainder
/// is filled with zero-input padding rows that the encoder ignores.
pub fn align_streams(
    params: &RamParams,
    first: (Role, &Matrix),
    second: (Role, &Matrix),
    pad_to: Option<usize>,
) -> Result<(Aligned, AlignTape)> {
    let (first_role, first_input) = first;
    let (second_role, second_input) = second;
    let d_in = params.dims.input_dim;
    for m in [first_input, second_input] {
        if m.cols() != d_in && m.rows() != 0 {
            return Err(Error::dims("alignment input width", d_in, m.cols()));
        }
    }
    let (n1, n2) = (first_input.rows(), second_input.rows());
    let slot = match pad_to {
        Some(p) => {
            if n1 > p || n2 > p {
                return Err(Error::invalid(
                    "padded sequence",
                    format!("{} rows exceed pad length {p}", n1.max(n2)),
                ));
            }
            p
        }
        None => n1.max(n2),
    };
    let first_input = reshape_empty(first_input, d_in);
    let second_input = reshape_empty(second_input, d_in);

    let d = params.dims.model_dim;
    let pad_row = params.projection(first_role).bias.clone();
    let pad_row2 = params.projection(second_role).bias.clone();
    let e1 = params.projection(first_role).forward(&first_input);
    let e2 = params.projection(second_role).forward(&second_input);
    let mut features = Matrix::zeros(2 * slot, d);
    let mut valid = vec![false; 2 * slot];
    for i in 0..slot {
        let row = if i < n1 { e1.row(i) } else { &pad_row };
        features.row_mut(i).copy_from_slice(row);
        valid[i] = i < n1;
        let row = if i < n2 { e2.row(i) } else { &pad_row2 };
        features.row_mut(slot + i).copy_from_slice(row);
        valid[slot + i] = i < n2;
    }
    let seq = MaskedSequence::new(features, valid)?;
    let (out, encoder) = encoder_forward(params, &seq)?;
    let first_raw = out.select_rows(&(0..n1).collect::<Vec<_>>());
    let second_raw = out.select_rows(&(slot..slot + n2).collect::<Vec<_>>());
    let first_out = l2_normalize_rows(&first_raw);
    let second_out = l2_normalize_rows(&second_raw);
    let aligned = Aligned {
        first: first_out.clone(),
        second: second_out.clone(),
    };
    let tape = AlignTape {
        first_role,
        second_role,
        first_input,
        second_input,
        slot,
        encoder,
        first_raw,
        second_raw,
        first_out,
        second_out,
    };
    Ok((aligned, tape))
}

fn reshape_empty(m: &Matrix, cols: usize) -> Matrix {
    if m.rows() == 0 {
        Matrix::zeros(0, cols)
    } else {
        m.clone()
    }
}

/// Accumulates parameter gradients for the loss whose gradients with respect
/// to the aligned (normalized) features are `grad_first` / `grad_second`.
pub fn align_backward(
    params: &RamParams,
    tape: AlignTape,
    grad_first: &Matrix,
    grad_second: &Matrix,
    grads: &mut RamParams,
) -> Result<()> {
    if grad_first.shape() != tape.first_out.shape() || grad_second.shape() != tape.second_out.shape()
    {
        return Err(Error::dims(
            "alignment gradient",
            format!("{:?}/{:?}", tape.first_out.shape(), tape.second_out.shape()),
            format!("{:?}/{:?}", grad_first.shape(), grad_second.shape()),
        ));
    }
    let d = params.dims.model_dim;
    let g1 = l2_normalize_rows_backward(&tape.first_raw, &tape.first_out, grad_first);
    let g2 = l2_normalize_rows_backward(&tape.second_raw, &tape.second_out, grad_second);
    let slot = tape.slot;
    let mut grad_out = Matrix::zeros(2 * slot, d);
    for i in 0..g1.rows() {
        grad_out.row_mut(i).copy_from_slice(g1.row(i));
    }
    for i in 0..g2.rows() {
        grad_out.row_mut(slot + i).copy_from_slice(g2.row(i));
    }
    let grad_seq = encoder_backward_into(params, tape.encoder, &grad_out, grads)?;
    let n1 = tape.first_input.rows();
    let n2 = tape.second_input.rows();
    let ge1 = grad_seq.select_rows(&(0..n1).collect::<Vec<_>>());
    let ge2 = grad_seq.select_rows(&(slot..slot + n2).collect::<Vec<_>>());
    params.projection(tape.first_role).backward_params(
        &tape.first_input,
        &ge1,
        grads.projection_mut(tape.first_role),
    );
    params.projection(tape.second_role).backward_params(
        &tape.second_input,
        &ge2,
        grads.projection_mut(tape.second_role),
    );
    Ok(())
}

/// Temporal alignment of current humans against trajectory features.
/// Returns `(aligned humans, aligned trajectories)`.
pub fn tram_align_features(
    params: &RamParams,
    humans: &Matrix,
    trajectories: &Matrix,
) -> Result<(Matrix, Matrix)> {
    let (a, _) = align_streams(
        params,
        (Role::Human, humans),
        (Role::Trajectory, trajectories),
        None,
    )?;
    Ok((a.first, a.second))
}

/// Spatial alignment of humans against their mark features.
/// Returns `(aligned humans, aligned marks)`.
pub fn sram_align_features(
    params: &RamParams,
    humans: &Matrix,
    marks: &Matrix,
) -> Result<(Matrix, Matrix)> {
    let (a, _) = align_streams(params, (Role::Human, humans), (Role::Mark, marks), None)?;
    Ok((a.first, a.second))
}

pub fn tram_align(
    params: &RamParams,
    humans: &[BBox],
    trajectories: &[BBox],
    frame: FrameSize,
) -> Result<(Matrix, Matrix)> {
    tram_align_features(
        params,
        &box_features(humans, frame),
        &box_features(trajectories, frame),
    )
}

pub fn sram_align(
    params: &RamParams,
    humans: &[BBox],
    marks: &[BBox],
    frame: FrameSize,
) -> Result<(Matrix, Matrix)> {
    sram_align_features(params, &box_features(humans, frame), &box_features(marks, frame))
}

/// Mark boxes for a set of humans at the default 60% area.
pub fn marks_for(humans: &[BBox]) -> Vec<BBox> {
    humans
        .iter()
        .map(|h| mark_box(h, DEFAULT_MARK_AREA_FRACTION).expect("constant fraction is valid"))
        .collect()
}

/// `max(0, a_i · b_j)` for unit-or-zero rows.
pub fn clipped_cosine_matrix(a: &Matrix, b: &Matrix) -> AffinityMatrix {
    if a.rows() == 0 || b.rows() == 0 {
        return Matrix::zeros(a.rows(), b.rows());
    }
    assert_eq!(a.cols(), b.cols(), "feature widths differ");
    a.matmul_nt(b).map(|x| x.clamp(0.0, 1.0))
}

fn weighted(raw: &AffinityMatrix, aligned: &AffinityMatrix, alpha: f64, ctx: &'static str) -> Result<AffinityMatrix> {
    raw.ensure_same_shape(aligned, ctx)?;
    let mut out = raw.clone();
    for (o, a) in out.as_mut_slice().iter_mut().zip(aligned.as_slice()) {
        *o = alpha * *o + (1.0 - alpha) * a;
    }
    Ok(out)
}

/// `alpha_t · raw + (1 − alpha_t) · aligned`
pub fn fuse_temporal(raw: &AffinityMatrix, aligned: &AffinityMatrix, alpha_t: f64) -> Result<AffinityMatrix> {
    weighted(raw, aligned, alpha_t, "fuse_temporal")
}

/// `alpha_s · raw + (1 − alpha_s) · aligned`
pub fn fuse_spatial(raw: &AffinityMatrix, aligned: &AffinityMatrix, alpha_s: f64) -> Result<AffinityMatrix> {
    weighted(raw, aligned, alpha_s, "fuse_spatial")
}

/// `lambda · a_s + (1 − lambda) · a_t`.
///
/// Evaluated as `a_t + lambda · (a_s − a_t)` so that equal inputs come back
/// bit-for-bit, and the endpoints return their input exactly.
pub fn fuse_st(a_s: &AffinityMatrix, a_t: &AffinityMatrix, lambda: f64) -> Result<AffinityMatrix> {
    a_s.ensure_same_shape(a_t, "fuse_st")?;
    if lambda == 1.0 {
        return Ok(a_s.clone());
    }
    if lambda == 0.0 {
        return Ok(a_t.clone());
    }
    let mut out = a_t.clone();
    for (o, s) in out.as_mut_slice().iter_mut().zip(a_s.as_slice()) {
        *o += lambda * (s - *o);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::RamDims;
    use proptest::prelude::*;

    fn params() -> RamParams {
        RamParams::init(RamDims { input_dim: 4, model_dim: 16, heads: 2, ffn_dim: 32 }, 11).unwrap()
    }

    fn frame() -> FrameSize {
        FrameSize::new(640, 480).unwrap()
    }

    fn humans() -> Vec<BBox> {
        vec![
            BBox::new(10.0, 20.0, 40.0, 90.0),
            BBox::new(200.0, 50.0, 35.0, 80.0),
            BBox::new(400.0, 300.0, 50.0, 120.0),
        ]
    }

    fn unit_or_zero(m: &Matrix) -> bool {
        m.iter_rows().all(|r| {
            let n = r.iter().map(|x| x * x).sum::<f64>();
            n == 0.0 || (n - 1.0).abs() < 1e-12
        })
    }

    #[test]
    fn tram_empty_trajectories() {
        let (h, c) = tram_align(&params(), &humans(), &[], frame()).unwrap();
        assert_eq!(h.rows(), 3);
        assert_eq!(c.rows(), 0);
        assert!(unit_or_zero(&h));
    }

    #[test]
    fn tram_permutation() {
        let p = params();
        let hs = humans();
        let traj = vec![BBox::new(12.0, 22.0, 40.0, 90.0)];
        let (h, _) = tram_align(&p, &hs, &traj, frame()).unwrap();
        let perm = [2, 0, 1];
        let hp: Vec<BBox> = perm.iter().map(|&i| hs[i]).collect();
        let (h2, _) = tram_align(&p, &hp, &traj, frame()).unwrap();
        assert!(h2.max_abs_diff(&h.select_rows(&perm)) < 1e-12);
    }

    #[test]
    fn single_pair_is_unit_norm() {
        let p = params();
        let (h, c) = tram_align(&p, &humans()[..1], &humans()[1..2], frame()).unwrap();
        assert!(unit_or_zero(&h) && unit_or_zero(&c));
        let (h, m) = sram_align(&p, &humans()[..1], &marks_for(&humans()[..1]), frame()).unwrap();
        assert!(unit_or_zero(&h) && unit_or_zero(&m));
    }

    #[test]
    fn sram_patterns() {
        let p = params();
        let hs = humans();
        let (h, m) = sram_align(&p, &hs, &[], frame()).unwrap();
        assert_eq!((h.rows(), m.rows()), (3, 0));
        let marks = marks_for(&hs);
        let (h, m) = sram_align(&p, &hs, &marks, frame()).unwrap();
        assert_eq!((h.rows(), m.rows()), (3, 3));
        let perm = [1, 2, 0];
        let hp: Vec<BBox> = perm.iter().map(|&i| hs[i]).collect();
        let (h2, _) = sram_align(&p, &hp, &marks, frame()).unwrap();
        assert!(h2.max_abs_diff(&h.select_rows(&perm)) < 1e-12);
    }

    #[test]
    fn padding_does_not_change_alignment() {
        let p = params();
        let a = box_features(&humans(), frame());
        let b = box_features(&marks_for(&humans()), frame());
        let (x, _) = align_streams(&p, (Role::Human, &a), (Role::Mark, &b), None).unwrap();
        let (y, _) = align_streams(&p, (Role::Human, &a), (Role::Mark, &b), Some(10)).unwrap();
        assert_eq!(x, y);
        assert!(align_streams(&p, (Role::Human, &a), (Role::Mark, &b), Some(2)).is_err());
    }

    #[test]
    fn cosine_examples() {
        let u = Matrix::from_rows(&[[1.0, 0.0]], 2).unwrap();
        let neg = Matrix::from_rows(&[[-1.0, 0.0]], 2).unwrap();
        let orth = Matrix::from_rows(&[[0.0, 1.0]], 2).unwrap();
        assert_eq!(clipped_cosine_matrix(&u, &u)[(0, 0)], 1.0);
        assert_eq!(clipped_cosine_matrix(&u, &neg)[(0, 0)], 0.0);
        assert_eq!(clipped_cosine_matrix(&u, &orth)[(0, 0)], 0.0);
        assert_eq!(clipped_cosine_matrix(&Matrix::zeros(0, 2), &u).shape(), (0, 1));
    }

    #[test]
    fn fusion_endpoints() {
        let raw = Matrix::from_rows(&[[1.0]], 1).unwrap();
        let al = Matrix::from_rows(&[[0.0]], 1).unwrap();
        assert_eq!(fuse_temporal(&raw, &al, 1.0).unwrap(), raw);
        assert_eq!(fuse_temporal(&raw, &al, 0.0).unwrap(), al);
        assert!((fuse_temporal(&raw, &al, 0.3).unwrap()[(0, 0)] - 0.3).abs() < 1e-15);
        assert_eq!(fuse_spatial(&raw, &al, 1.0).unwrap(), raw);
        assert_eq!(fuse_spatial(&raw, &al, 0.0).unwrap(), al);
        assert!((fuse_spatial(&raw, &al, 0.3).unwrap()[(0, 0)] - 0.3).abs() < 1e-15);

        let m = Matrix::from_rows(&[[0.25, 0.7], [0.1, 0.9]], 2).unwrap();
        assert_eq!(fuse_st(&m, &m, 0.5).unwrap(), m);
        let s = Matrix::from_rows(&[[0.2]], 1).unwrap();
        let t = Matrix::from_rows(&[[0.8]], 1).unwrap();
        assert_eq!(fuse_st(&s, &t, 1.0).unwrap(), s);
        assert!((fuse_st(&s, &t, 0.5).unwrap()[(0, 0)] - 0.5).abs() < 1e-15);
        assert!(fuse_st(&s, &Matrix::zeros(1, 2), 0.5).is_err());
        assert!(fuse_temporal(&s, &Matrix::zeros(2, 1), 0.5).is_err());
    }

    #[test]
    fn coefficients_validate() {
        assert!(FusionCoefficients::new(0.2, 0.2, 0.5).is_ok());
        assert!(FusionCoefficients::new(0.0, 0.2, 0.5).is_err());
        assert!(FusionCoefficients::new(0.2, 1.2, 0.5).is_err());
        assert!(FusionCoefficients::new(0.2, 0.2, -0.1).is_err());
    }

    #[test]
    fn model_shapes() {
        let dims = RamDims::with_model_dim(4, 16);
        let m = RamModel::init(RamKind::Stram, dims, 1).unwrap();
        assert!(m.temporal.is_some() && m.spatial.is_some());
        assert_ne!(m.temporal, m.spatial);
        assert!(RamModel::new(RamKind::Tram, None, None).is_err());
        assert_eq!("STRAM".parse::<RamKind>().unwrap(), RamKind::Stram);
        assert!("none".parse::<RamKind>().is_err());
    }

    fn unit() -> impl Strategy<Value = f64> {
        0.0..=1.0f64
    }

    proptest! {
        #[test]
        fn fused_stays_in_unit_interval(r in unit(), a in unit(), s in unit(),
                                         at in 0.01..=1.0f64, as_ in 0.01..=1.0f64, l in unit()) {
            let raw = Matrix::from_rows(&[[r]], 1).unwrap();
            let al = Matrix::from_rows(&[[a]], 1).unwrap();
            let sal = Matrix::from_rows(&[[s]], 1).unwrap();
            let t = fuse_temporal(&raw, &al, at).unwrap();
            let sp = fuse_spatial(&raw, &sal, as_).unwrap();
            let st = fuse_st(&sp, &t, l).unwrap();
            for v in [t[(0, 0)], sp[(0, 0)], st[(0, 0)]] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
