//! MOT Challenge text files:
//! `frame,id,bb_left,bb_top,bb_width,bb_height,conf,x,y,z`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::contrastive::LossReport;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tracking::{Detection, FrameDetections, Trajectory};

/// Parsed contents of a MOT file. Rows with id `-1` are detections, rows with
/// a positive id are trajectory points.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MotData {
    pub detections: BTreeMap<usize, Vec<Detection>>,
    pub trajectories: Vec<Trajectory>,
}

impl MotData {
    /// Smallest and largest frame present in either kind of row.
    pub fn frame_range(&self) -> Option<(usize, usize)> {
        let det = self.detections.keys().copied();
        let traj = self.trajectories.iter().flat_map(|t| t.points.iter().map(|p| p.0));
        let all: Vec<usize> = det.chain(traj).collect();
        Some((*all.iter().min()?, *all.iter().max()?))
    }

    /// One entry per frame in `first..=last`, empty where nothing was detected.
    pub fn detection_frames(&self, first: usize, last: usize) -> Vec<FrameDetections> {
        (first..=last)
            .map(|f| FrameDetections {
                frame: f,
                detections: self.detections.get(&f).cloned().unwrap_or_default(),
            })
            .collect()
    }
}

fn parse_err(path: &Path, line: usize, reason: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        reason: reason.into(),
    }
}

pub fn read_mot(path: impl AsRef<Path>) -> Result<MotData> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_mot(&text, path)
}

pub(crate) fn parse_mot(text: &str, path: &Path) -> Result<MotData> {
    let mut detections: BTreeMap<usize, Vec<Detection>> = BTreeMap::new();
    let mut points: BTreeMap<u64, BTreeMap<usize, BBox>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 7 {
            return Err(parse_err(path, n, format!("expected at least 7 fields, found {}", fields.len())));
        }
        let num = |k: usize, name: &str| -> Result<f64> {
            fields[k]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(path, n, format!("{name} {:?} is not a number", fields[k])))
        };
        let frame = num(0, "frame")?;
        if frame < 1.0 || frame.fract() != 0.0 {
            return Err(parse_err(path, n, format!("frame {frame} is not a positive integer")));
        }
        let frame = frame as usize;
        let id = num(1, "id")?;
        let (x, y, w, h) = (num(2, "bb_left")?, num(3, "bb_top")?, num(4, "bb_width")?, num(5, "bb_height")?);
        if w < 0.0 || h < 0.0 {
            return Err(parse_err(path, n, "negative box extent"));
        }
        let conf = num(6, "conf")?;
        let b = BBox::new(x, y, w, h);
        if id == -1.0 {
            let d = Detection::new(frame, b, conf).map_err(|e| parse_err(path, n, e.to_string()))?;
            detections.entry(frame).or_default().push(d);
        } else if id >= 1.0 && id.fract() == 0.0 {
            let track = points.entry(id as u64).or_default();
            if track.insert(frame, b).is_some() {
                return Err(parse_err(path, n, format!("id {id} appears twice in frame {frame}")));
            }
        } else {
            return Err(parse_err(path, n, format!("id {id} is neither -1 nor a positive integer")));
        }
    }
    let trajectories = points
        .into_iter()
        .map(|(id, pts)| Trajectory { id, points: pts.into_iter().collect() })
        .collect();
    Ok(MotData { detections, trajectories })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trajectory rows ordered by frame, then id. Confidence is written as 1.
pub fn write_mot(trajectories: &[Trajectory], path: impl AsRef<Path>) -> Result<()> {
    write_text(path.as_ref(), &format_mot(trajectories))
}

pub(crate) fn format_mot(trajectories: &[Trajectory]) -> String {
    let mut rows: Vec<(usize, u64, BBox)> = trajectories
        .iter()
        .flat_map(|t| t.points.iter().map(move |&(f, b)| (f, t.id, b)))
        .collect();
    rows.sort_by_key(|r| (r.0, r.1));
    let mut out = String::new();
    for (f, id, b) in rows {
        writeln!(out, "{f},{id},{},{},{},{},1,-1,-1,-1", b.x, b.y, b.w, b.h).unwrap();
    }
    out
}

/// Detection rows (id `-1`) in frame order.
pub fn write_detections(frames: &[FrameDetections], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    for f in frames {
        for d in &f.detections {
            let b = d.bbox;
            writeln!(out, "{},-1,{},{},{},{},{},-1,-1,-1", d.frame, b.x, b.y, b.w, b.h, d.score).unwrap();
        }
    }
    write_text(path.as_ref(), &out)
}

pub fn write_loss_csv(history: &[LossReport], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("epoch,l_t,l_s,l_st\n");
    for r in history {
        writeln!(out, "{},{},{},{}", r.epoch, r.l_t, r.l_s, r.l_st).unwrap();
    }
    write_text(path.as_ref(), &out)
}

/// Per-frame boxes for `first..=last`, ordered by trajectory id.
pub fn boxes_by_frame(trajectories: &[Trajectory], first: usize, last: usize) -> Vec<Vec<BBox>> {
    let mut sorted: Vec<&Trajectory> = trajectories.iter().collect();
    sorted.sort_by_key(|t| t.id);
    let mut frames = vec![Vec::new(); (last + 1).saturating_sub(first)];
    for t in sorted {
        for &(f, b) in &t.points {
            if (first..=last).contains(&f) {
                frames[f - first].push(b);
            }
        }
    }
    frames
}

/// Trajectories cut to `first..=last`; those left empty are dropped.
pub fn restrict_frames(trajectories: &[Trajectory], first: usize, last: usize) -> Vec<Trajectory> {
    trajectories
        .iter()
        .filter_map(|t| {
            let points: Vec<(usize, BBox)> =
                t.points.iter().copied().filter(|p| (first..=last).contains(&p.0)).collect();
            (!points.is_empty()).then_some(Trajectory { id: t.id, points })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(text: &str) -> Result<MotData> {
        parse_mot(text, Path::new("test.txt"))
    }

    #[test]
    fn detection_row() {
        let d = parse("1,-1,10,20,30,40,0.9,-1,-1,-1\n").unwrap();
        assert!(d.trajectories.is_empty());
        let dets = &d.detections[&1];
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].bbox, BBox::new(10.0, 20.0, 30.0, 40.0));
        assert_eq!(dets[0].score, 0.9);
        assert_eq!(dets[0].frame, 1);
    }

    #[test]
    fn empty_and_identity_rows() {
        assert_eq!(parse("").unwrap(), MotData::default());
        assert_eq!(parse("").unwrap().frame_range(), None);
        let d = parse("4,7,1,2,3,4,1,-1,-1,-1\n").unwrap();
        assert_eq!(d.trajectories, vec![Trajectory { id: 7, points: vec![(4, BBox::new(1.0, 2.0, 3.0, 4.0))] }]);
    }

    #[test]
    fn unsorted_rows_are_ordered() {
        let d = parse("3,1,0,0,1,1,1\n1,1,5,5,1,1,1\n2,-1,0,0,1,1,0.5\n").unwrap();
        let frames: Vec<usize> = d.trajectories[0].points.iter().map(|p| p.0).collect();
        assert_eq!(frames, vec![1, 3]);
        assert_eq!(d.frame_range(), Some((1, 3)));
        let df = d.detection_frames(1, 3);
        assert_eq!(df.iter().map(|f| f.detections.len()).collect::<Vec<_>>(), vec![0, 1, 0]);
    }

    #[test]
    fn malformed_rows_report_line() {
        for (text, line) in [
            ("1,-1,0,0,1,1,0.5\n1,x,0,0,1,1,1\n", 2),
            ("\n1,2,3\n", 2),
            ("0,1,0,0,1,1,1\n", 1),
            ("1,-1,0,0,1,1,1.5\n", 1),
            ("1,0,0,0,1,1,1\n", 1),
            ("1,2,0,0,1,1,1\n1,2,0,0,1,1,1\n", 2),
        ] {
            match parse(text) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn single_point_row() {
        let t = vec![Trajectory { id: 3, points: vec![(2, BBox::new(1.5, 2.0, 3.0, 4.25))] }];
        let text = format_mot(&t);
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("2,3,"));
        assert_eq!(text, "2,3,1.5,2,3,4.25,1,-1,-1,-1\n");
        assert_eq!(format_mot(&[]), "");
    }

    #[test]
    fn helpers_slice_frames() {
        let t = vec![
            Trajectory { id: 2, points: vec![(1, BBox::new(2.0, 0.0, 1.0, 1.0)), (3, BBox::new(2.0, 1.0, 1.0, 1.0))] },
            Trajectory { id: 1, points: vec![(1, BBox::new(1.0, 0.0, 1.0, 1.0))] },
        ];
        let f = boxes_by_frame(&t, 1, 3);
        assert_eq!(f[0], vec![BBox::new(1.0, 0.0, 1.0, 1.0), BBox::new(2.0, 0.0, 1.0, 1.0)]);
        assert!(f[1].is_empty());
        let r = restrict_frames(&t, 2, 3);
        assert_eq!(r, vec![Trajectory { id: 2, points: vec![(3, BBox::new(2.0, 1.0, 1.0, 1.0))] }]);
    }

    fn trajectories() -> impl Strategy<Value = Vec<Trajectory>> {
        prop::collection::btree_map(
            1u64..50,
            prop::collection::btree_map(1usize..40, (-50.0..2000.0f64, -50.0..1100.0f64, 0.0..300.0f64, 0.0..300.0f64), 1..6),
            0..6,
        )
        .prop_map(|m| {
            m.into_iter()
                .map(|(id, pts)| Trajectory {
                    id,
                    points: pts.into_iter().map(|(f, (x, y, w, h))| (f, BBox::new(x, y, w, h))).collect(),
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn mot_round_trip(t in trajectories()) {
            let back = parse(&format_mot(&t)).unwrap();
            prop_assert_eq!(back.trajectories, t);
        }
    }
}
