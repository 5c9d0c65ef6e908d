//! Rule-based triplet generation, InfoNCE, and alignment-module training.
//!
//! Triplets come from matching raw boxes, never from the features being
//! trained:
//!
//! * temporal rule: boxes of frame `t-1` are matched to frame `t` by IoU;
//! * spatial rule: mark boxes are matched to human boxes of the same frame by
//!   intersection rate.
//!
//! A match above the threshold makes the counterpart the positive and every
//! other box on that side a negative; an anchor without a reliable match is
//! its own positive and every box on the other side is a negative. Both
//! directions (anchors on either side) are generated.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::assignment::{match_by_affinity, Matching};
use crate::error::{Error, Result};
use crate::geometry::{box_features, iou_matrix, ir_matrix, mark_box, BBox, FrameSize};
use crate::matrix::Matrix;
use crate::neural::{adamw_step, AdamWConfig, AdamWState, RamDims, RamParams, Role};
use crate::ram::{align_backward, align_streams, RamKind, RamModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TripletSide {
    /// Anchors in frame `t-1`, candidates in frame `t`.
    TemporalForward,
    /// Anchors in frame `t`, candidates in frame `t-1`.
    TemporalBackward,
    MarkAnchored,
    HumanAnchored,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    /// Equal to `anchor` when no reliable counterpart exists.
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// Triplets indexing rows of a stacked aligned-feature matrix.
///
/// Temporal batches index `[current frame; previous frame]`, spatial batches
/// index `[humans; marks]`, matching the stream order fed to the encoder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TripletBatch {
    pub side: TripletSide,
    pub triplets: Vec<Triplet>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }
}

/// Builds anchor-side triplets from a matching whose rows are anchors.
fn batch_from_matching(
    matching: &Matching,
    n_anchor: usize,
    anchor_offset: usize,
    n_other: usize,
    other_offset: usize,
    rows_are_anchors: bool,
    side: TripletSide,
) -> TripletBatch {
    let mut partner = vec![None; n_anchor];
    for &(r, c) in &matching.pairs {
        let (a, o) = if rows_are_anchors { (r, c) } else { (c, r) };
        partner[a] = Some(o);
    }
    let triplets = (0..n_anchor)
        .map(|a| {
            let anchor = anchor_offset + a;
            match partner[a] {
                Some(p) => Triplet {
                    anchor,
                    positive: other_offset + p,
                    negatives: (0..n_other)
                        .filter(|&o| o != p)
                        .map(|o| other_offset + o)
                        .collect(),
                },
                None => Triplet {
                    anchor,
                    positive: anchor,
                    negatives: (0..n_other).map(|o| other_offset + o).collect(),
                },
            }
        })
        .collect();
    TripletBatch { side, triplets }
}

/// Temporal-rule triplets, `(forward, backward)`.
///
/// Indices refer to the stack `[cur; prev]`: current boxes occupy
/// `0..cur.len()`, previous boxes follow.
pub fn temporal_triplets(prev: &[BBox], cur: &[BBox], eps_iou: f64) -> (TripletBatch, TripletBatch) {
    let matching = match_by_affinity(&iou_matrix(prev, cur), eps_iou);
    let (np, nc) = (prev.len(), cur.len());
    let forward = batch_from_matching(&matching, np, nc, nc, 0, true, TripletSide::TemporalForward);
    let backward = batch_from_matching(&matching, nc, 0, np, nc, false, TripletSide::TemporalBackward);
    (forward, backward)
}

/// Spatial-rule triplets, `(mark-anchored, human-anchored)`.
///
/// Indices refer to the stack `[humans; marks]`.
pub fn spatial_triplets(humans: &[BBox], marks: &[BBox], eps_ir: f64) -> (TripletBatch, TripletBatch) {
    let matching = match_by_affinity(&ir_matrix(marks, humans), eps_ir);
    let (nh, nm) = (humans.len(), marks.len());
    let mark_anchored = batch_from_matching(&matching, nm, nh, nh, 0, true, TripletSide::MarkAnchored);
    let human_anchored = batch_from_matching(&matching, nh, 0, nm, nh, false, TripletSide::HumanAnchored);
    (mark_anchored, human_anchored)
}

/// Summed InfoNCE over the batch and its gradient with respect to `aligned`.
///
/// Per anchor `a` with positive `p` and negatives `N`:
/// `−log(exp(a·p/τ) / (exp(a·p/τ) + Σ_n exp(a·n/τ)))`. Anchors without
/// negatives contribute nothing.
pub fn infonce(aligned: &Matrix, batch: &TripletBatch, tau: f64) -> (f64, Matrix) {
    let mut grad = Matrix::zeros(aligned.rows(), aligned.cols());
    let loss = infonce_accumulate(aligned, batch, tau, &mut grad);
    (loss, grad)
}

/// Adds the gradient into `grad` and returns the loss.
pub fn infonce_accumulate(aligned: &Matrix, batch: &TripletBatch, tau: f64, grad: &mut Matrix) -> f64 {
    let dot = |i: usize, j: usize| -> f64 {
        aligned.row(i).iter().zip(aligned.row(j)).map(|(a, b)| a * b).sum()
    };
    let mut total = 0.0;
    let mut logits = Vec::new();
    for t in &batch.triplets {
        if t.negatives.is_empty() {
            continue;
        }
        logits.clear();
        logits.push(dot(t.anchor, t.positive) / tau);
        logits.extend(t.negatives.iter().map(|&n| dot(t.anchor, n) / tau));
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - logits[0];

        // dL/dlogit_k = softmax_k − [k == positive]
        let others = std::iter::once(t.positive).chain(t.negatives.iter().copied());
        for (k, other) in others.enumerate() {
            let w = (logits[k] - lse).exp() - if k == 0 { 1.0 } else { 0.0 };
            if w == 0.0 {
                continue;
            }
            let c = w / tau;
            for j in 0..aligned.cols() {
                let a = aligned[(t.anchor, j)];
                let o = aligned[(other, j)];
                grad[(t.anchor, j)] += c * o;
                grad[(other, j)] += c * a;
            }
        }
    }
    total
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Samples (frame pairs) per optimizer step.
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub temperature: f64,
    pub eps_iou: f64,
    pub eps_ir: f64,
    /// Slots per stream; frames with more boxes are rejected.
    pub pad_length: usize,
    pub seed: u64,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub weight_decay: f64,
    pub mark_fraction: f64,
    /// Probability of swapping a triplet's positive with one of its
    /// negatives. Zero for normal training.
    pub positive_noise: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 5,
            lr: 2e-3,
            lr_decay_factor: 0.1,
            lr_decay_every: 10,
            temperature: 0.1,
            eps_iou: 0.9,
            eps_ir: 0.0,
            pad_length: 110,
            seed: 0,
            model_dim: 128,
            heads: 8,
            ffn_dim: 512,
            weight_decay: 1e-2,
            mark_fraction: 0.6,
            positive_noise: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn dims(&self) -> RamDims {
        RamDims {
            input_dim: 4,
            model_dim: self.model_dim,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(Error::invalid("temperature", format!("{} must be > 0", self.temperature)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size", "must be positive"));
        }
        if self.lr.is_nan() || self.lr < 0.0 || self.lr_decay_factor.is_nan() || self.lr_decay_factor <= 0.0 || self.lr_decay_every == 0 {
            return Err(Error::invalid(
                "learning rate schedule",
                format!(
                    "lr={} decay={} every={}",
                    self.lr, self.lr_decay_factor, self.lr_decay_every
                ),
            ));
        }
        if !(0.0..=1.0).contains(&self.eps_iou) || !(0.0..=1.0).contains(&self.eps_ir) {
            return Err(Error::invalid(
                "triplet thresholds",
                format!("eps_iou={} eps_ir={}", self.eps_iou, self.eps_ir),
            ));
        }
        if !(0.0..=1.0).contains(&self.positive_noise) {
            return Err(Error::invalid("positive noise", self.positive_noise.to_string()));
        }
        if self.pad_length == 0 {
            return Err(Error::invalid("pad length", "must be positive"));
        }
        if !(self.mark_fraction > 0.0 && self.mark_fraction <= 1.0) {
            return Err(Error::invalid("mark fraction", self.mark_fraction.to_string()));
        }
        self.dims().validate()
    }

    /// Step size for a zero-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }
}

/// Mean per-sample losses of one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: usize,
    pub l_t: f64,
    pub l_s: f64,
    pub l_st: f64,
}

#[derive(Clone, Debug)]
pub struct TemporalSample {
    pub prev: Vec<BBox>,
    pub cur: Vec<BBox>,
    pub forward: TripletBatch,
    pub backward: TripletBatch,
}

#[derive(Clone, Debug)]
pub struct SpatialSample {
    pub humans: Vec<BBox>,
    pub marks: Vec<BBox>,
    pub mark_anchored: TripletBatch,
    pub human_anchored: TripletBatch,
}

/// One training unit: a frame pair and/or a single frame, with triplets
/// precomputed from raw boxes.
#[derive(Clone, Debug)]
pub struct TrainingSample {
    pub temporal: Option<TemporalSample>,
    pub spatial: Option<SpatialSample>,
}

impl TrainingSample {
    pub fn temporal(prev: &[BBox], cur: &[BBox], eps_iou: f64) -> Self {
        let (forward, backward) = temporal_triplets(prev, cur, eps_iou);
        TrainingSample {
            temporal: Some(TemporalSample {
                prev: prev.to_vec(),
                cur: cur.to_vec(),
                forward,
                backward,
            }),
            spatial: None,
        }
    }

    pub fn spatial(humans: &[BBox], mark_fraction: f64, eps_ir: f64) -> Result<Self> {
        let marks = humans
            .iter()
            .map(|h| mark_box(h, mark_fraction))
            .collect::<Result<Vec<_>>>()?;
        let (mark_anchored, human_anchored) = spatial_triplets(humans, &marks, eps_ir);
        Ok(TrainingSample {
            temporal: None,
            spatial: Some(SpatialSample {
                humans: humans.to_vec(),
                marks,
                mark_anchored,
                human_anchored,
            }),
        })
    }

    fn with_spatial(mut self, other: TrainingSample) -> Self {
        self.spatial = other.spatial;
        self
    }
}

/// Loss values of one sample.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub l_t: f64,
    pub l_s: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.l_t + self.l_s
    }
}

fn stack(a: &Matrix, b: &Matrix) -> Matrix {
    let cols = a.cols().max(b.cols());
    let mut data = Vec::with_capacity((a.rows() + b.rows()) * cols);
    data.extend_from_slice(a.as_slice());
    data.extend_from_slice(b.as_slice());
    Matrix::from_vec(a.rows() + b.rows(), cols, data).expect("equal widths")
}

fn split(m: &Matrix, first: usize) -> (Matrix, Matrix) {
    let a: Vec<usize> = (0..first).collect();
    let b: Vec<usize> = (first..m.rows()).collect();
    (m.select_rows(&a), m.select_rows(&b))
}

/// Loss of two InfoNCE batches over one aligned stream pair, with gradients
/// accumulated into `grads` when given.
#[allow(clippy::too_many_arguments)]
fn pair_loss(
    params: &RamParams,
    first: (Role, &[BBox]),
    second: (Role, &[BBox]),
    batches: [&TripletBatch; 2],
    tau: f64,
    frame: FrameSize,
    pad: Option<usize>,
    grads: Option<&mut RamParams>,
) -> Result<f64> {
    let f1 = box_features(first.1, frame);
    let f2 = box_features(second.1, frame);
    let (aligned, tape) = align_streams(params, (first.0, &f1), (second.0, &f2), pad)?;
    let stacked = stack(&aligned.first, &aligned.second);
    let mut g = Matrix::zeros(stacked.rows(), stacked.cols());
    let mut loss = 0.0;
    for b in batches {
        loss += infonce_accumulate(&stacked, b, tau, &mut g);
    }
    if let Some(grads) = grads {
        let (g1, g2) = split(&g, aligned.first.rows());
        align_backward(params, tape, &g1, &g2, grads)?;
    }
    Ok(loss)
}

/// Temporal loss `L_T` of one sample (current boxes as humans, previous boxes
/// as trajectories).
pub fn temporal_loss(
    params: &RamParams,
    sample: &TemporalSample,
    tau: f64,
    frame: FrameSize,
    pad: Option<usize>,
    grads: Option<&mut RamParams>,
) -> Result<f64> {
    pair_loss(
        params,
        (Role::Human, &sample.cur),
        (Role::Trajectory, &sample.prev),
        [&sample.forward, &sample.backward],
        tau,
        frame,
        pad,
        grads,
    )
}

/// Spatial loss `L_S` of one sample.
pub fn spatial_loss(
    params: &RamParams,
    sample: &SpatialSample,
    tau: f64,
    frame: FrameSize,
    pad: Option<usize>,
    grads: Option<&mut RamParams>,
) -> Result<f64> {
    pair_loss(
        params,
        (Role::Human, &sample.humans),
        (Role::Mark, &sample.marks),
        [&sample.mark_anchored, &sample.human_anchored],
        tau,
        frame,
        pad,
        grads,
    )
}

/// Gradients for the encoders present in a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub temporal: Option<RamParams>,
    pub spatial: Option<RamParams>,
}

impl ModelGrads {
    pub fn zeros_for(model: &RamModel) -> Self {
        ModelGrads {
            temporal: model.temporal.as_ref().map(RamParams::zeros_like),
            spatial: model.spatial.as_ref().map(RamParams::zeros_like),
        }
    }
}

/// `L_ST = L_S + L_T` for one sample, restricted to the branches the model
/// has. Gradients are accumulated into `grads` when given.
pub fn sample_loss(
    model: &RamModel,
    sample: &TrainingSample,
    tau: f64,
    frame: FrameSize,
    pad: Option<usize>,
    mut grads: Option<&mut ModelGrads>,
) -> Result<LossParts> {
    let mut parts = LossParts::default();
    if let (Some(p), Some(s)) = (&model.temporal, &sample.temporal) {
        let g = grads.as_deref_mut().and_then(|g| g.temporal.as_mut());
        parts.l_t = temporal_loss(p, s, tau, frame, pad, g)?;
    }
    if let (Some(p), Some(s)) = (&model.spatial, &sample.spatial) {
        let g = grads.and_then(|g| g.spatial.as_mut());
        parts.l_s = spatial_loss(p, s, tau, frame, pad, g)?;
    }
    Ok(parts)
}

/// Training samples for a kind: frame pairs for TRAM and STRAM (STRAM's
/// spatial term uses the pair's current frame), single frames for SRAM.
pub fn build_samples(frames: &[Vec<BBox>], kind: RamKind, cfg: &TrainConfig) -> Result<Vec<TrainingSample>> {
    if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| f.len() > cfg.pad_length) {
        return Err(Error::invalid(
            "training frame",
            format!(
                "frame #{i} has {} boxes, more than pad length {}",
                f.len(),
                cfg.pad_length
            ),
        ));
    }
    let mut samples = Vec::new();
    match kind {
        RamKind::Sram => {
            for f in frames {
                samples.push(TrainingSample::spatial(f, cfg.mark_fraction, cfg.eps_ir)?);
            }
        }
        RamKind::Tram | RamKind::Stram => {
            for w in frames.windows(2) {
                let mut s = TrainingSample::temporal(&w[0], &w[1], cfg.eps_iou);
                if kind == RamKind::Stram {
                    s = s.with_spatial(TrainingSample::spatial(&w[1], cfg.mark_fraction, cfg.eps_ir)?);
                }
                samples.push(s);
            }
        }
    }
    if cfg.positive_noise > 0.0 {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed ^ 0x006e_6f69_7365);
        for s in &mut samples {
            if let Some(t) = &mut s.temporal {
                corrupt(&mut t.forward, cfg.positive_noise, &mut rng);
                corrupt(&mut t.backward, cfg.positive_noise, &mut rng);
            }
            if let Some(sp) = &mut s.spatial {
                corrupt(&mut sp.mark_anchored, cfg.positive_noise, &mut rng);
                corrupt(&mut sp.human_anchored, cfg.positive_noise, &mut rng);
            }
        }
    }
    Ok(samples)
}

/// Swaps the positive with a random negative with probability `p`.
fn corrupt(batch: &mut TripletBatch, p: f64, rng: &mut impl Rng) {
    for t in &mut batch.triplets {
        if t.negatives.is_empty() || !rng.random_bool(p) {
            continue;
        }
        let k = rng.random_range(0..t.negatives.len());
        let old = t.positive;
        t.positive = t.negatives[k];
        if old == t.anchor {
            t.negatives.remove(k);
        } else {
            t.negatives[k] = old;
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: RamModel,
    pub history: Vec<LossReport>,
}

/// Trains an alignment model on per-frame boxes.
///
/// Each epoch visits every sample once in a seeded random order; every
/// `batch_size` samples the summed gradients take one AdamW step per encoder.
pub fn train_ram(
    frames: &[Vec<BBox>],
    kind: RamKind,
    cfg: &TrainConfig,
    frame: FrameSize,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = RamModel::init(kind, cfg.dims(), cfg.seed)?;
    train_from(model, frames, cfg, frame)
}

/// Continues training an existing model.
pub fn train_from(
    mut model: RamModel,
    frames: &[Vec<BBox>],
    cfg: &TrainConfig,
    frame: FrameSize,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let needed = if model.kind == RamKind::Sram { 1 } else { 2 };
    if frames.len() < needed.max(2) {
        return Err(Error::invalid(
            "training data",
            format!("{} frames, need at least 2", frames.len()),
        ));
    }
    let samples = build_samples(frames, model.kind, cfg)?;
    let adam = AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let mut state_t = model.temporal.as_ref().map(AdamWState::new);
    let mut state_s = model.spatial.as_ref().map(AdamWState::new);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);
    let pad = Some(cfg.pad_length);

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut sum_t, mut sum_s) = (0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let mut grads = ModelGrads::zeros_for(&model);
            for &i in chunk {
                let parts = sample_loss(&model, &samples[i], cfg.temperature, frame, pad, Some(&mut grads))?;
                sum_t += parts.l_t;
                sum_s += parts.l_s;
            }
            if let (Some(p), Some(g), Some(s)) = (&mut model.temporal, &grads.temporal, &mut state_t) {
                adamw_step(p, g, s, lr, &adam)?;
            }
            if let (Some(p), Some(g), Some(s)) = (&mut model.spatial, &grads.spatial, &mut state_s) {
                adamw_step(p, g, s, lr, &adam)?;
            }
        }
        let n = samples.len().max(1) as f64;
        let (l_t, l_s) = (sum_t / n, sum_s / n);
        if !(l_t.is_finite() && l_s.is_finite()) {
            return Err(Error::Invariant(format!("non-finite loss in epoch {epoch}")));
        }
        history.push(LossReport {
            epoch: epoch + 1,
            l_t,
            l_s,
            l_st: l_t + l_s,
        });
    }
    Ok(TrainOutcome { model, history })
}
