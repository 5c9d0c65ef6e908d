//! Axis-aligned boxes and the overlap measures used for association.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{AffinityMatrix, Matrix};

/// Fraction of a detection's area kept by its mark box.
pub const DEFAULT_MARK_AREA_FRACTION: f64 = 0.6;

/// Axis-aligned rectangle in pixels: left, top, width, height.
///
/// Zero-area boxes are legal and act as sequence padding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    /// Negative extents are clamped to zero.
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox {
            x,
            y,
            w: w.max(0.0),
            h: h.max(0.0),
        }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = self.right().min(other.right()) - self.x.max(other.x);
        let ih = self.bottom().min(other.bottom()) - self.y.max(other.y);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }
}

/// Frame extent in pixels; both sides positive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameSize {
    pub width: u32,
    pub height: u32,
}

impl FrameSize {
    pub fn new(width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(
                "frame size",
                format!("{width}x{height} must be positive"),
            ));
        }
        Ok(FrameSize { width, height })
    }
}

impl Default for FrameSize {
    fn default() -> Self {
        FrameSize {
            width: 1920,
            height: 1080,
        }
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Intersection area relative to the mark's own area.
///
/// Unlike IoU this does not depend on how much of the human box lies outside
/// the mark, so partially occluded humans keep their score. A zero-area mark
/// scores 0 against everything.
pub fn intersection_rate(mark: &BBox, human: &BBox) -> f64 {
    let area = mark.area();
    if area <= 0.0 {
        return 0.0;
    }
    (mark.intersection_area(human) / area).clamp(0.0, 1.0)
}

/// Centered sub-box covering `area_fraction` of `b`'s area.
pub fn mark_box(b: &BBox, area_fraction: f64) -> Result<BBox> {
    if !(area_fraction > 0.0 && area_fraction <= 1.0) {
        return Err(Error::invalid(
            "mark area fraction",
            format!("{area_fraction} is outside (0, 1]"),
        ));
    }
    if area_fraction == 1.0 {
        return Ok(*b);
    }
    if b.area() == 0.0 {
        return Ok(BBox::new(b.x, b.y, 0.0, 0.0));
    }
    let s = area_fraction.sqrt();
    let (cx, cy) = b.center();
    Ok(BBox::from_center(cx, cy, b.w * s, b.h * s))
}

pub fn iou_matrix(rows: &[BBox], cols: &[BBox]) -> AffinityMatrix {
    Matrix::from_fn(rows.len(), cols.len(), |i, j| iou(&rows[i], &cols[j]))
}

/// Rows are marks, columns humans.
pub fn ir_matrix(marks: &[BBox], humans: &[BBox]) -> AffinityMatrix {
    Matrix::from_fn(marks.len(), humans.len(), |i, j| {
        intersection_rate(&marks[i], &humans[j])
    })
}

/// Frame-normalized `(x, y, w, h)`; the all-zero box maps to the zero vector.
pub fn box_feature(b: &BBox, frame: FrameSize) -> [f64; 4] {
    let fw = frame.width as f64;
    let fh = frame.height as f64;
    [b.x / fw, b.y / fh, b.w / fw, b.h / fh]
}

/// Stacks [`box_feature`] rows into an `n x 4` matrix.
pub fn box_features(boxes: &[BBox], frame: FrameSize) -> Matrix {
    let rows: Vec<[f64; 4]> = boxes.iter().map(|b| box_feature(b, frame)).collect();
    Matrix::from_rows(&rows, 4).expect("fixed width rows")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h)
    }

    /// Counts unit pixels covered by integer boxes on a 64x64 grid.
    fn raster(a: &BBox, bx: &BBox) -> (u32, u32, u32) {
        let (mut ia, mut ib, mut both) = (0, 0, 0);
        for px in 0..64 {
            for py in 0..64 {
                let (fx, fy) = (px as f64 + 0.5, py as f64 + 0.5);
                let in_a = fx > a.x && fx < a.right() && fy > a.y && fy < a.bottom();
                let in_b = fx > bx.x && fx < bx.right() && fy > bx.y && fy < bx.bottom();
                ia += in_a as u32;
                ib += in_b as u32;
                both += (in_a && in_b) as u32;
            }
        }
        (ia, ib, both)
    }

    #[test]
    fn iou_examples() {
        let a = b(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(5.0, 5.0, 1.0, 1.0)), 0.0);
        assert!((iou(&a, &b(1.0, 1.0, 2.0, 2.0)) - 1.0 / 7.0).abs() < 1e-12);
        let z = BBox::default();
        assert_eq!(iou(&z, &z), 0.0);
        assert_eq!(iou(&z, &a), 0.0);
    }

    #[test]
    fn ir_examples() {
        let human = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(intersection_rate(&b(2.0, 2.0, 3.0, 3.0), &human), 1.0);
        assert_eq!(intersection_rate(&b(20.0, 2.0, 3.0, 3.0), &human), 0.0);
        let r = intersection_rate(&b(0.0, 0.0, 2.0, 2.0), &b(1.0, 0.0, 4.0, 4.0));
        assert!((r - 0.5).abs() < 1e-12);
        assert_eq!(intersection_rate(&BBox::default(), &human), 0.0);
    }

    #[test]
    fn mark_box_examples() {
        let m = mark_box(&b(0.0, 0.0, 10.0, 10.0), 0.6).unwrap();
        let side = 10.0 * 0.6f64.sqrt();
        assert!((m.w - 7.745966692414834).abs() < 1e-9 && (m.w - side).abs() < 1e-12);
        assert!((m.x - 1.1270166537925831).abs() < 1e-9);
        assert!((m.y - 1.1270166537925831).abs() < 1e-9);
        let (cx, cy) = m.center();
        assert!((cx - 5.0).abs() < 1e-12 && (cy - 5.0).abs() < 1e-12);

        let orig = b(3.0, 4.0, 5.0, 6.0);
        assert_eq!(mark_box(&orig, 1.0).unwrap(), orig);
        let z = mark_box(&b(7.0, 8.0, 0.0, 0.0), 0.6).unwrap();
        assert_eq!(z, b(7.0, 8.0, 0.0, 0.0));

        for bad in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(mark_box(&orig, bad).is_err());
        }
    }

    #[test]
    fn matrices() {
        let a = b(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou_matrix(&[a], &[a]).as_slice(), &[1.0]);
        assert_eq!(iou_matrix(&[], &[a, a]).shape(), (0, 2));
        let m = iou_matrix(&[a], &[b(1.0, 1.0, 2.0, 2.0), b(10.0, 10.0, 1.0, 1.0)]);
        assert!((m[(0, 0)] - 1.0 / 7.0).abs() < 1e-12);
        assert_eq!(m[(0, 1)], 0.0);

        let h = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(ir_matrix(&[b(1.0, 1.0, 2.0, 2.0)], &[h]).as_slice(), &[1.0]);
        let ir = ir_matrix(&[a], &[b(1.0, 0.0, 4.0, 4.0)]);
        assert!((ir[(0, 0)] - 0.5).abs() < 1e-12);
        let zero_row = ir_matrix(&[BBox::default()], &[h, a]);
        assert_eq!(zero_row.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn box_feature_examples() {
        let f = FrameSize::new(1920, 1080).unwrap();
        assert_eq!(box_feature(&BBox::default(), f), [0.0; 4]);
        let v = box_feature(&b(192.0, 108.0, 192.0, 108.0), f);
        for x in v {
            assert!((x - 0.1).abs() < 1e-15);
        }
        assert_eq!(box_feature(&b(0.0, 0.0, 1920.0, 1080.0), f), [0.0, 0.0, 1.0, 1.0]);
        assert!(FrameSize::new(0, 10).is_err());
    }

    #[test]
    fn ir_ignores_growth_away_from_mark() {
        let mark = b(10.0, 10.0, 4.0, 4.0);
        let human = b(12.0, 8.0, 10.0, 10.0);
        let base = intersection_rate(&mark, &human);
        assert!((base - 0.5).abs() < 1e-12);
        // grow right and down only: those sides never touch the mark's extent
        let grown = b(12.0, 8.0, 40.0, 30.0);
        assert_eq!(intersection_rate(&mark, &grown), base);
        assert!(iou(&mark, &grown) < iou(&mark, &human));
    }

    fn int_box() -> impl Strategy<Value = BBox> {
        (0u32..64, 0u32..64, 0u32..64, 0u32..64).prop_map(|(x, y, w, h)| {
            let w = w.min(64 - x);
            let h = h.min(64 - y);
            BBox::new(x as f64, y as f64, w as f64, h as f64)
        })
    }

    proptest! {
        #[test]
        fn iou_symmetric(a in int_box(), c in int_box()) {
            prop_assert_eq!(iou(&a, &c), iou(&c, &a));
        }

        #[test]
        fn raster_oracle(a in int_box(), c in int_box()) {
            let (na, nc, both) = raster(&a, &c);
            let union = na + nc - both;
            let want_iou = if union == 0 { 0.0 } else { both as f64 / union as f64 };
            let want_ir = if na == 0 { 0.0 } else { both as f64 / na as f64 };
            prop_assert!((iou(&a, &c) - want_iou).abs() <= 1e-9);
            prop_assert!((intersection_rate(&a, &c) - want_ir).abs() <= 1e-9);
        }

        #[test]
        fn ir_dominates_iou(a in int_box(), c in int_box()) {
            prop_assume!(a.area() > 0.0);
            prop_assert!(intersection_rate(&a, &c) + 1e-15 >= iou(&a, &c));
        }

        #[test]
        fn mark_area(x in -100.0..100.0f64, y in -100.0..100.0f64,
                     w in 0.0..500.0f64, h in 0.0..500.0f64, f in 0.01..=1.0f64) {
            let bx = BBox::new(x, y, w, h);
            let m = mark_box(&bx, f).unwrap();
            prop_assert!((m.area() - f * bx.area()).abs() <= 1e-9 * bx.area().max(1e-300));
        }
    }
}
