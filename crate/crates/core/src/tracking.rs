//! Constant-velocity Kalman motion model and two-stage association.

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::assignment::match_by_affinity;
use crate::error::{Error, Result};
use crate::geometry::{box_features, iou_matrix, BBox, FrameSize};
use crate::matrix::{AffinityMatrix, Matrix};
use crate::ram::{
    clipped_cosine_matrix, fuse_spatial, fuse_st, fuse_temporal, marks_for, sram_align_features,
    tram_align_features, FusionCoefficients, RamKind, RamModel,
};

type State = SVector<f64, 8>;
type Cov = SMatrix<f64, 8, 8>;
type Obs = SVector<f64, 4>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// 1-based frame index.
    pub frame: usize,
    pub bbox: BBox,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub appearance: Option<Vec<f64>>,
}

impl Detection {
    pub fn new(frame: usize, bbox: BBox, score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::invalid("detection score", format!("{score} outside [0, 1]")));
        }
        Ok(Detection { frame, bbox, score, appearance: None })
    }
}

/// Detections of one frame. Empty frames still advance the tracker.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameDetections {
    pub frame: usize,
    pub detections: Vec<Detection>,
}

/// Noise weights, relative to the box width or height.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KalmanNoise {
    pub position: f64,
    pub velocity: f64,
    pub measurement: f64,
}

impl Default for KalmanNoise {
    fn default() -> Self {
        KalmanNoise {
            position: 1.0 / 20.0,
            velocity: 1.0 / 160.0,
            measurement: 1.0 / 20.0,
        }
    }
}

impl KalmanNoise {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("position", self.position),
            ("velocity", self.velocity),
            ("measurement", self.measurement),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid("kalman noise", format!("{name} weight {v}")));
            }
        }
        Ok(())
    }
}

/// State `(cx, cy, w, h, vcx, vcy, vw, vh)` with covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct KalmanState {
    pub mean: State,
    pub covariance: Cov,
}

fn transition() -> Cov {
    let mut f = Cov::identity();
    for i in 0..4 {
        f[(i, i + 4)] = 1.0;
    }
    f
}

fn diag_sq(v: [f64; 8]) -> Cov {
    Cov::from_diagonal(&State::from_iterator(v.iter().map(|x| x * x)))
}

impl KalmanState {
    pub fn initiate(b: &BBox, noise: &KalmanNoise) -> Self {
        let (cx, cy) = b.center();
        let (w, h) = (b.w, b.h);
        let (p, v) = (2.0 * noise.position, 10.0 * noise.velocity);
        KalmanState {
            mean: State::from_column_slice(&[cx, cy, w, h, 0.0, 0.0, 0.0, 0.0]),
            covariance: diag_sq([p * w, p * h, p * w, p * h, v * w, v * h, v * w, v * h]),
        }
    }

    pub fn bbox(&self) -> BBox {
        BBox::from_center(self.mean[0], self.mean[1], self.mean[2], self.mean[3])
    }

    pub fn predict(&mut self, noise: &KalmanNoise) {
        let (w, h) = (self.mean[2].abs(), self.mean[3].abs());
        let (p, v) = (noise.position, noise.velocity);
        let q = diag_sq([p * w, p * h, p * w, p * h, v * w, v * h, v * w, v * h]);
        let f = transition();
        self.mean = f * self.mean;
        self.covariance = f * self.covariance * f.transpose() + q;
    }

    pub fn update(&mut self, observed: &BBox, noise: &KalmanNoise) {
        let (cx, cy) = observed.center();
        let z = Obs::new(cx, cy, observed.w, observed.h);
        let (w, h) = (self.mean[2].abs(), self.mean[3].abs());
        let m = noise.measurement;
        let r = SMatrix::<f64, 4, 4>::from_diagonal(&Obs::new(
            (m * w).powi(2),
            (m * h).powi(2),
            (m * w).powi(2),
            (m * h).powi(2),
        ));
        let hm = SMatrix::<f64, 4, 8>::identity();
        let s = hm * self.covariance * hm.transpose() + r;
        let Some(s_inv) = s.try_inverse() else {
            // No uncertainty anywhere: take the observation as is.
            self.mean.fixed_rows_mut::<4>(0).copy_from(&z);
            return;
        };
        let k = self.covariance * hm.transpose() * s_inv;
        self.mean += k * (z - hm * self.mean);
        self.covariance = (Cov::identity() - k * hm) * self.covariance;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub id: u64,
    pub kalman: KalmanState,
    pub last_box: BBox,
    /// Kalman prediction for the frame being processed.
    pub predicted: BBox,
    pub age_since_update: usize,
    pub history: Vec<(usize, BBox)>,
    /// Spatially aligned feature of the detection this track last matched.
    pub cached_aligned_human: Option<Vec<f64>>,
}

impl Track {
    pub fn new(id: u64, frame: usize, b: BBox, noise: &KalmanNoise) -> Self {
        Track {
            id,
            kalman: KalmanState::initiate(&b, noise),
            last_box: b,
            predicted: b,
            age_since_update: 0,
            history: vec![(frame, b)],
            cached_aligned_human: None,
        }
    }
}

/// Advances the track one frame and returns the predicted box.
pub fn kalman_predict(track: &mut Track, noise: &KalmanNoise) -> BBox {
    track.kalman.predict(noise);
    track.predicted = track.kalman.bbox();
    track.predicted
}

pub fn kalman_update(track: &mut Track, observed: &BBox, noise: &KalmanNoise) {
    track.kalman.update(observed, noise);
    track.last_box = *observed;
}

/// Output trajectory: the detection boxes a track was matched to.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: u64,
    pub points: Vec<(usize, BBox)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub fusion: FusionCoefficients,
    /// Pairs with fused affinity below this are never matched.
    pub min_affinity: f64,
    pub use_ram: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    pub tau_high: f64,
    pub tau_low: f64,
    /// Two-stage (high then low score) association; otherwise one stage over
    /// high-score detections with `single_stage`.
    pub two_stage: bool,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub single_stage: StageConfig,
    pub max_age: usize,
    pub min_score_new_track: f64,
    pub noise: KalmanNoise,
    /// Normalizes box features; set from the run configuration.
    #[serde(skip)]
    pub frame: FrameSize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        let stage = |alpha: f64, gate: f64| StageConfig {
            fusion: FusionCoefficients { alpha_t: alpha, alpha_s: alpha, lambda: 0.5 },
            min_affinity: gate,
            use_ram: true,
        };
        TrackerConfig {
            tau_high: 0.6,
            tau_low: 0.1,
            two_stage: true,
            stage1: stage(0.2, 0.9),
            stage2: stage(0.3, 0.5),
            single_stage: stage(0.3, 0.9),
            max_age: 30,
            min_score_new_track: 0.6,
            noise: KalmanNoise::default(),
            frame: FrameSize::default(),
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.tau_low && self.tau_low < self.tau_high && self.tau_high <= 1.0) {
            return Err(Error::invalid(
                "score thresholds",
                format!("need 0 <= tau_low < tau_high <= 1, got {} and {}", self.tau_low, self.tau_high),
            ));
        }
        for s in [&self.stage1, &self.stage2, &self.single_stage] {
            s.fusion.validate()?;
            if !(0.0..=1.0).contains(&s.min_affinity) {
                return Err(Error::invalid("match gate", s.min_affinity.to_string()));
            }
        }
        if !(0.0..=1.0).contains(&self.min_score_new_track) {
            return Err(Error::invalid("min_score_new_track", self.min_score_new_track.to_string()));
        }
        FrameSize::new(self.frame.width, self.frame.height)?;
        self.noise.validate()
    }

    /// Sets both alpha coefficients of every stage.
    pub fn set_alpha(&mut self, alpha: f64) {
        for s in [&mut self.stage1, &mut self.stage2, &mut self.single_stage] {
            s.fusion.alpha_t = alpha;
            s.fusion.alpha_s = alpha;
        }
    }
}

/// Tracker state folded over a sequence.
#[derive(Clone, Debug)]
pub struct TrackerState {
    pub tracks: Vec<Track>,
    pub retired: Vec<Trajectory>,
    next_id: u64,
    last_frame: Option<usize>,
}

impl Default for TrackerState {
    fn default() -> Self {
        TrackerState {
            tracks: Vec::new(),
            retired: Vec::new(),
            next_id: 1,
            last_frame: None,
        }
    }
}

impl TrackerState {
    pub fn new() -> Self {
        Self::default()
    }

    /// All trajectories so far, retired and active, sorted by id.
    pub fn trajectories(&self) -> Vec<Trajectory> {
        let mut out: Vec<Trajectory> = self
            .retired
            .iter()
            .cloned()
            .chain(self.tracks.iter().map(|t| Trajectory { id: t.id, points: t.history.clone() }))
            .collect();
        out.sort_by_key(|t| t.id);
        out
    }

    pub fn into_trajectories(self) -> Vec<Trajectory> {
        self.trajectories()
    }
}

/// `(track id, detection index)` pairs decided for one frame.
pub type FrameAssignment = Vec<(u64, usize)>;

/// Affinity between the given tracks (rows) and detections (columns).
#[allow(clippy::too_many_arguments)]
fn stage_affinity(
    tracks: &[&Track],
    dets: &[usize],
    all: &[Detection],
    stage: &StageConfig,
    model: Option<&RamModel>,
    spatial: Option<&Matrix>,
    frame: FrameSize,
) -> Result<AffinityMatrix> {
    let pred: Vec<BBox> = tracks.iter().map(|t| t.predicted).collect();
    let boxes: Vec<BBox> = dets.iter().map(|&d| all[d].bbox).collect();
    let raw = iou_matrix(&pred, &boxes);
    let model = match model {
        Some(m) if stage.use_ram && !tracks.is_empty() && !dets.is_empty() => m,
        _ => return Ok(raw),
    };
    let c = &stage.fusion;
    let a_t = match &model.temporal {
        Some(p) => {
            let (h, traj) = tram_align_features(p, &box_features(&boxes, frame), &box_features(&pred, frame))?;
            Some(fuse_temporal(&raw, &clipped_cosine_matrix(&traj, &h), c.alpha_t)?)
        }
        None => None,
    };
    let a_s = match spatial {
        Some(hs) => {
            let width = hs.cols();
            let cached = Matrix::from_fn(tracks.len(), width, |i, j| {
                tracks[i].cached_aligned_human.as_ref().map_or(0.0, |v| v[j])
            });
            let cur = hs.select_rows(dets);
            Some(fuse_spatial(&raw, &clipped_cosine_matrix(&cached, &cur), c.alpha_s)?)
        }
        None => None,
    };
    match (model.kind, a_s, a_t) {
        (RamKind::Stram, Some(s), Some(t)) => fuse_st(&s, &t, c.lambda),
        (RamKind::Tram, _, Some(t)) => Ok(t),
        (RamKind::Sram, Some(s), _) => Ok(s),
        _ => Err(Error::Invariant("alignment model is missing an encoder".into())),
    }
}

/// Processes one frame of detections.
pub fn track_step(
    state: &mut TrackerState,
    frame: usize,
    detections: &[Detection],
    cfg: &TrackerConfig,
    model: Option<&RamModel>,
) -> Result<FrameAssignment> {
    if let Some(d) = detections.iter().find(|d| d.frame != frame) {
        return Err(Error::invalid(
            "detections",
            format!("frame {} detection passed with frame {frame}", d.frame),
        ));
    }
    if let Some(last) = state.last_frame {
        if frame <= last {
            return Err(Error::invalid("frame order", format!("frame {frame} after {last}")));
        }
    }
    state.last_frame = Some(frame);
    let noise = &cfg.noise;

    for t in &mut state.tracks {
        kalman_predict(t, noise);
    }

    let high: Vec<usize> = (0..detections.len()).filter(|&i| detections[i].score >= cfg.tau_high).collect();
    let low: Vec<usize> = (0..detections.len())
        .filter(|&i| detections[i].score >= cfg.tau_low && detections[i].score < cfg.tau_high)
        .collect();

    // Spatially aligned features of every kept detection, computed once per
    // frame so that all stages and caches see the same context.
    let spatial = match model.and_then(|m| m.spatial.as_ref()) {
        Some(p) => {
            let kept: Vec<usize> = (0..detections.len()).filter(|&i| detections[i].score >= cfg.tau_low).collect();
            let boxes: Vec<BBox> = kept.iter().map(|&i| detections[i].bbox).collect();
            let (h, _) = sram_align_features(
                p,
                &box_features(&boxes, cfg.frame),
                &box_features(&marks_for(&boxes), cfg.frame),
            )?;
            let width = h.cols();
            let mut full = Matrix::zeros(detections.len(), width);
            for (r, &i) in kept.iter().enumerate() {
                full.row_mut(i).copy_from_slice(h.row(r));
            }
            Some(full)
        }
        None => None,
    };

    let mut assignment: FrameAssignment = Vec::new();
    let mut track_taken = vec![false; state.tracks.len()];
    let mut det_taken = vec![false; detections.len()];

    let stages: Vec<(&StageConfig, &[usize])> = if cfg.two_stage {
        vec![(&cfg.stage1, &high), (&cfg.stage2, &low)]
    } else {
        vec![(&cfg.single_stage, &high)]
    };
    for (stage, dets) in stages {
        let rows: Vec<usize> = (0..state.tracks.len()).filter(|&i| !track_taken[i]).collect();
        let refs: Vec<&Track> = rows.iter().map(|&i| &state.tracks[i]).collect();
        let aff = stage_affinity(&refs, dets, detections, stage, model, spatial.as_ref(), cfg.frame)?;
        for (r, c) in match_by_affinity(&aff, stage.min_affinity).pairs {
            let (ti, di) = (rows[r], dets[c]);
            track_taken[ti] = true;
            det_taken[di] = true;
            assignment.push((state.tracks[ti].id, di));
        }
    }

    for &(id, di) in &assignment {
        let t = state.tracks.iter_mut().find(|t| t.id == id).expect("assigned track exists");
        let b = detections[di].bbox;
        kalman_update(t, &b, noise);
        t.age_since_update = 0;
        t.history.push((frame, b));
        if let Some(s) = &spatial {
            t.cached_aligned_human = Some(s.row(di).to_vec());
        }
    }

    let mut survivors = Vec::with_capacity(state.tracks.len());
    for (i, mut t) in std::mem::take(&mut state.tracks).into_iter().enumerate() {
        if !track_taken[i] {
            t.age_since_update += 1;
            if t.age_since_update > cfg.max_age {
                state.retired.push(Trajectory { id: t.id, points: t.history });
                continue;
            }
        }
        survivors.push(t);
    }
    state.tracks = survivors;

    for &di in &high {
        let d = &detections[di];
        if det_taken[di] || d.score < cfg.min_score_new_track {
            continue;
        }
        let mut t = Track::new(state.next_id, frame, d.bbox, noise);
        state.next_id += 1;
        if let Some(s) = &spatial {
            t.cached_aligned_human = Some(s.row(di).to_vec());
        }
        assignment.push((t.id, di));
        state.tracks.push(t);
    }
    Ok(assignment)
}

/// Folds [`track_step`] over the frames and returns every trajectory.
pub fn track_sequence(
    frames: &[FrameDetections],
    cfg: &TrackerConfig,
    model: Option<&RamModel>,
) -> Result<Vec<Trajectory>> {
    cfg.validate()?;
    let mut state = TrackerState::new();
    for f in frames {
        track_step(&mut state, f.frame, &f.detections, cfg, model)?;
    }
    Ok(state.into_trajectories())
}
