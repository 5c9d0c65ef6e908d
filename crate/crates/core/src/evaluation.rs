//! CLEAR MOT, identity F1, and the Davies–Bouldin index.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::assignment::{match_by_affinity, solve_min_cost};
use crate::error::{Error, Result};
use crate::geometry::{iou, iou_matrix, BBox};
use crate::matrix::Matrix;
use crate::tracking::Trajectory;

pub const DEFAULT_IOU_GATE: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mota: f64,
    pub idf1: f64,
    pub idp: f64,
    pub idr: f64,
    pub fp: usize,
    pub fn_: usize,
    pub ids: usize,
    pub gt_count: usize,
    /// Ground-truth objects matched in at least 80% of their frames.
    pub mt: usize,
    /// Ground-truth objects matched in at most 20% of their frames.
    pub ml: usize,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "mota,idf1,idp,idr,fp,fn,ids,gt_count,mt,ml";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.mota, self.idf1, self.idp, self.idr, self.fp, self.fn_, self.ids, self.gt_count, self.mt, self.ml
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let rows: [(&str, String); 10] = [
            ("MOTA", format!("{:.4}", self.mota)),
            ("IDF1", format!("{:.4}", self.idf1)),
            ("IDP", format!("{:.4}", self.idp)),
            ("IDR", format!("{:.4}", self.idr)),
            ("FP", self.fp.to_string()),
            ("FN", self.fn_.to_string()),
            ("IDS", self.ids.to_string()),
            ("GT", self.gt_count.to_string()),
            ("MT", self.mt.to_string()),
            ("ML", self.ml.to_string()),
        ];
        for (k, v) in rows {
            writeln!(s, "{k:<5} {v:>10}").unwrap();
        }
        s
    }
}

type FrameIndex = BTreeMap<usize, Vec<(u64, BBox)>>;

fn by_frame(trajectories: &[Trajectory]) -> FrameIndex {
    let mut idx: FrameIndex = BTreeMap::new();
    for t in trajectories {
        for &(f, b) in &t.points {
            idx.entry(f).or_default().push((t.id, b));
        }
    }
    for v in idx.values_mut() {
        v.sort_by_key(|p| p.0);
    }
    idx
}

/// CLEAR MOT counts with identity scores attached.
///
/// Per frame, a ground-truth object keeps last frame's hypothesis while their
/// IoU stays at or above the gate; the rest are matched by Hungarian on IoU.
/// An identity switch is counted whenever an object is matched to a
/// hypothesis other than the one it was last matched to.
pub fn clear_mot(gt: &[Trajectory], hyp: &[Trajectory], iou_gate: f64) -> MetricsReport {
    let g_idx = by_frame(gt);
    let h_idx = by_frame(hyp);
    let mut frames: Vec<usize> = g_idx.keys().chain(h_idx.keys()).copied().collect();
    frames.sort_unstable();
    frames.dedup();

    let empty = Vec::new();
    let mut current: HashMap<u64, u64> = HashMap::new();
    let mut last_matched: HashMap<u64, u64> = HashMap::new();
    let mut matched_frames: HashMap<u64, usize> = HashMap::new();
    let (mut fp, mut fn_, mut ids, mut gt_count) = (0, 0, 0, 0);

    for f in frames {
        let g = g_idx.get(&f).unwrap_or(&empty);
        let h = h_idx.get(&f).unwrap_or(&empty);
        gt_count += g.len();
        let mut g_used = vec![false; g.len()];
        let mut h_used = vec![false; h.len()];
        let mut pairs: Vec<(usize, usize)> = Vec::new();

        for (gi, (gid, gb)) in g.iter().enumerate() {
            let Some(&hid) = current.get(gid) else { continue };
            if let Some(hi) = h.iter().position(|(id, _)| *id == hid) {
                if !h_used[hi] && iou(gb, &h[hi].1) >= iou_gate {
                    g_used[gi] = true;
                    h_used[hi] = true;
                    pairs.push((gi, hi));
                }
            }
        }

        let g_rest: Vec<usize> = (0..g.len()).filter(|&i| !g_used[i]).collect();
        let h_rest: Vec<usize> = (0..h.len()).filter(|&i| !h_used[i]).collect();
        let gb: Vec<BBox> = g_rest.iter().map(|&i| g[i].1).collect();
        let hb: Vec<BBox> = h_rest.iter().map(|&i| h[i].1).collect();
        for (r, c) in match_by_affinity(&iou_matrix(&gb, &hb), iou_gate).pairs {
            pairs.push((g_rest[r], h_rest[c]));
        }

        current.clear();
        for &(gi, hi) in &pairs {
            let (gid, hid) = (g[gi].0, h[hi].0);
            if last_matched.get(&gid).is_some_and(|&prev| prev != hid) {
                ids += 1;
            }
            last_matched.insert(gid, hid);
            current.insert(gid, hid);
            *matched_frames.entry(gid).or_default() += 1;
        }
        fn_ += g.len() - pairs.len();
        fp += h.len() - pairs.len();
    }

    let (mut mt, mut ml) = (0, 0);
    for t in gt {
        if t.points.is_empty() {
            continue;
        }
        let ratio = *matched_frames.get(&t.id).unwrap_or(&0) as f64 / t.points.len() as f64;
        if ratio >= 0.8 {
            mt += 1;
        }
        if ratio <= 0.2 {
            ml += 1;
        }
    }

    let errors = fp + fn_ + ids;
    let mota = if gt_count > 0 {
        1.0 - errors as f64 / gt_count as f64
    } else if errors == 0 {
        1.0
    } else {
        f64::NEG_INFINITY
    };
    let (idf1, idp, idr) = idf1(gt, hyp, iou_gate);
    MetricsReport { mota, idf1, idp, idr, fp, fn_, ids, gt_count, mt, ml }
}

/// `(IDF1, IDP, IDR)` under the identity bijection maximizing true positives.
pub fn idf1(gt: &[Trajectory], hyp: &[Trajectory], iou_gate: f64) -> (f64, f64, f64) {
    let total_gt: usize = gt.iter().map(|t| t.points.len()).sum();
    let total_hyp: usize = hyp.iter().map(|t| t.points.len()).sum();
    if total_gt == 0 && total_hyp == 0 {
        return (1.0, 1.0, 1.0);
    }
    let g_ids: Vec<u64> = gt.iter().map(|t| t.id).collect();
    let h_ids: Vec<u64> = hyp.iter().map(|t| t.id).collect();
    let g_pos: HashMap<u64, usize> = g_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let h_pos: HashMap<u64, usize> = h_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();

    let mut overlap = Matrix::zeros(g_ids.len(), h_ids.len());
    let g_idx = by_frame(gt);
    let h_idx = by_frame(hyp);
    for (f, g) in &g_idx {
        let Some(h) = h_idx.get(f) else { continue };
        for (gid, gb) in g {
            for (hid, hb) in h {
                if iou(gb, hb) >= iou_gate {
                    overlap[(g_pos[gid], h_pos[hid])] += 1.0;
                }
            }
        }
    }
    let idtp = if overlap.is_empty() {
        0.0
    } else {
        let m = solve_min_cost(&overlap.map(|x| -x)).expect("finite counts");
        m.pairs.iter().map(|&(r, c)| overlap[(r, c)]).sum::<f64>()
    };
    let ratio = |num: f64, den: usize| if den == 0 { 0.0 } else { num / den as f64 };
    (
        ratio(2.0 * idtp, total_gt + total_hyp),
        ratio(idtp, total_hyp),
        ratio(idtp, total_gt),
    )
}

/// Davies–Bouldin index of the rows of `features` grouped by `labels`.
pub fn dbi(features: &Matrix, labels: &[u64]) -> Result<f64> {
    if features.rows() != labels.len() {
        return Err(Error::dims("dbi", format!("{} labels", features.rows()), labels.len()));
    }
    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    if groups.len() < 2 {
        return Err(Error::invalid("dbi", format!("need at least 2 clusters, got {}", groups.len())));
    }
    let d = features.cols();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let (centroids, spreads): (Vec<Vec<f64>>, Vec<f64>) = groups
        .values()
        .map(|rows| {
            let mut c = vec![0.0; d];
            for &r in rows {
                for (cj, x) in c.iter_mut().zip(features.row(r)) {
                    *cj += x;
                }
            }
            c.iter_mut().for_each(|x| *x /= rows.len() as f64);
            let s = rows.iter().map(|&r| dist(features.row(r), &c)).sum::<f64>() / rows.len() as f64;
            (c, s)
        })
        .unzip();
    let k = centroids.len();
    let mut total = 0.0;
    for i in 0..k {
        let mut worst = f64::NEG_INFINITY;
        for j in (0..k).filter(|&j| j != i) {
            let dij = dist(&centroids[i], &centroids[j]);
            if dij == 0.0 {
                return Err(Error::invalid("dbi", "two clusters share a centroid"));
            }
            worst = worst.max((spreads[i] + spreads[j]) / dij);
        }
        total += worst;
    }
    Ok(total / k as f64)
}

/// Hand-traced evaluation fixtures: `(name, gt, hyp, expected)`.
pub mod micro_scenes {
    use super::*;

    pub struct MicroScene {
        pub name: &'static str,
        pub gt: Vec<Trajectory>,
        pub hyp: Vec<Trajectory>,
        pub expected: MetricsReport,
    }

    fn sq(x: f64) -> BBox {
        BBox::new(x, 0.0, 10.0, 10.0)
    }

    fn traj(id: u64, pts: &[(usize, f64)]) -> Trajectory {
        Trajectory { id, points: pts.iter().map(|&(f, x)| (f, sq(x))).collect() }
    }

    #[allow(clippy::too_many_arguments)]
    fn report(mota: f64, idf1: f64, idp: f64, idr: f64, fp: usize, fn_: usize, ids: usize, gt: usize, mt: usize, ml: usize) -> MetricsReport {
        MetricsReport { mota, idf1, idp, idr, fp, fn_, ids, gt_count: gt, mt, ml }
    }

    pub fn all() -> Vec<MicroScene> {
        vec![
            // Two static objects; the hypothesis ids swap at frame 2 and
            // swap back at frame 3.
            MicroScene {
                name: "swap",
                gt: vec![traj(1, &[(1, 0.0), (2, 0.0), (3, 0.0)]), traj(2, &[(1, 100.0), (2, 100.0), (3, 100.0)])],
                hyp: vec![traj(1, &[(1, 0.0), (2, 100.0), (3, 0.0)]), traj(2, &[(1, 100.0), (2, 0.0), (3, 100.0)])],
                expected: report(1.0 - 4.0 / 6.0, 2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0, 0, 0, 4, 6, 2, 0),
            },
            // One miss at frame 3 and one spurious box at frame 2.
            MicroScene {
                name: "miss_and_clutter",
                gt: vec![traj(1, &[(1, 0.0), (2, 0.0), (3, 0.0), (4, 0.0)])],
                hyp: vec![traj(1, &[(1, 0.0), (2, 0.0), (4, 0.0)]), traj(2, &[(2, 500.0)])],
                expected: report(0.5, 0.75, 0.75, 0.75, 1, 1, 0, 4, 0, 0),
            },
            // Track lost and re-acquired under a new id.
            MicroScene {
                name: "fragment",
                gt: vec![traj(1, &[(1, 0.0), (2, 0.0), (3, 0.0), (4, 0.0)])],
                hyp: vec![traj(1, &[(1, 0.0), (2, 0.0)]), traj(2, &[(3, 0.0), (4, 0.0)])],
                expected: report(0.75, 0.5, 0.5, 0.5, 0, 0, 1, 4, 1, 0),
            },
            // A second object appears next to the first; the hypothesis
            // drifts toward it but stays above the gate, so the old
            // correspondence persists and no switch is counted at frame 3.
            MicroScene {
                name: "persistence",
                gt: vec![traj(1, &[(1, 0.0), (2, 0.0), (3, 0.0)]), traj(2, &[(2, 2.0), (3, 2.0)])],
                hyp: vec![traj(1, &[(1, 0.0), (2, 1.5), (3, 0.0)]), traj(2, &[(3, 2.0)])],
                expected: report(0.8, 8.0 / 9.0, 1.0, 0.8, 0, 1, 0, 5, 1, 0),
            },
            // Three objects tracked under other ids; the third one's last box
            // falls below the gate (IoU 60/140).
            MicroScene {
                name: "relabeled_with_drift",
                gt: vec![
                    traj(1, &[(1, 0.0), (2, 0.0), (3, 0.0), (4, 0.0), (5, 0.0)]),
                    traj(2, &[(1, 100.0), (2, 100.0), (3, 100.0), (4, 100.0), (5, 100.0)]),
                    traj(3, &[(1, 200.0), (2, 200.0), (3, 200.0), (4, 200.0), (5, 200.0)]),
                ],
                hyp: vec![
                    traj(10, &[(1, 0.0), (2, 0.0), (3, 0.0), (4, 0.0), (5, 0.0)]),
                    traj(20, &[(1, 100.0), (2, 100.0), (3, 100.0), (4, 100.0), (5, 100.0)]),
                    traj(30, &[(1, 200.0), (2, 200.0), (3, 200.0), (4, 200.0), (5, 204.0)]),
                ],
                expected: report(13.0 / 15.0, 14.0 / 15.0, 14.0 / 15.0, 14.0 / 15.0, 1, 1, 0, 15, 3, 0),
            },
        ]
    }
}
