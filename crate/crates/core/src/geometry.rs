//! Boxes, overlap, point-to-box label assignment and box coding.
//!
//! Label assignment is anchor-free: every head-grid point maps to one pixel
//! position in the search image and is labelled by where that point falls
//! relative to the ground-truth box.

use crate::error::{Error, Result};
use crate::numerics::{Graph, Var};

/// Axis-aligned box in pixel coordinates, `x2 >= x1`, `y2 >= y1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        if !finite || x2 < x1 || y2 < y1 {
            return Err(Error::Invalid(format!(
                "invalid box ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }

    /// Box scaled by `factor` about its own center.
    pub fn scaled(&self, factor: f64) -> Self {
        let (cx, cy) = self.center();
        let (hw, hh) = (self.width() * factor / 2.0, self.height() * factor / 2.0);
        Self {
            x1: cx - hw,
            y1: cy - hh,
            x2: cx + hw,
            y2: cy + hh,
        }
    }

    /// Closed-interval containment.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    pub fn clamp_to(&self, width: f64, height: f64) -> Self {
        let cx = |v: f64| v.clamp(0.0, width);
        let cy = |v: f64| v.clamp(0.0, height);
        Self {
            x1: cx(self.x1),
            y1: cy(self.y1),
            x2: cx(self.x2),
            y2: cy(self.y2),
        }
    }

    pub fn intersects(&self, other: &BBox) -> bool {
        self.x1 < other.x2 && other.x1 < self.x2 && self.y1 < other.y2 && other.y1 < self.y2
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn center_distance(a: &BBox, b: &BBox) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
}

/// Head-grid geometry: point `(row, col)` sits at pixel
/// `(origin + stride·col, origin + stride·row)` of a square search image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadGrid {
    pub rows: usize,
    pub cols: usize,
    pub stride: f64,
    pub origin: f64,
    /// Side of the search image in pixels.
    pub extent: f64,
}

impl HeadGrid {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, index: usize) -> (f64, f64) {
        let (r, c) = (index / self.cols, index % self.cols);
        (
            self.origin + self.stride * c as f64,
            self.origin + self.stride * r as f64,
        )
    }

    pub fn points(&self) -> Vec<(f64, f64)> {
        (0..self.len()).map(|i| self.point(i)).collect()
    }

    /// Indices of grid points inside `b`.
    pub fn inside(&self, b: &BBox) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| {
                let (x, y) = self.point(i);
                b.contains(x, y)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Positive,
    Negative,
    Ignore,
}

/// Per-location class plus `(l, t, r, b)` regression targets at positives.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub grid: HeadGrid,
    pub labels: Vec<Label>,
    pub targets: Vec<Option<[f64; 4]>>,
    pub gt: BBox,
}

impl LabelMap {
    pub fn positives(&self) -> Vec<usize> {
        self.indices(Label::Positive)
    }

    pub fn negatives(&self) -> Vec<usize> {
        self.indices(Label::Negative)
    }

    fn indices(&self, which: Label) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| (*l == which).then_some(i))
            .collect()
    }

    pub fn n_pos(&self) -> usize {
        self.labels.iter().filter(|l| **l == Label::Positive).count()
    }

    pub fn n_neg(&self) -> usize {
        self.labels.iter().filter(|l| **l == Label::Negative).count()
    }
}

/// Fraction of the ground-truth extent that counts as positive.
pub const POSITIVE_SHRINK: f64 = 0.5;

/// Positive inside the gt shrunk by [`POSITIVE_SHRINK`] about its center,
/// negative outside the gt, ignored in between. A gt that misses the search
/// image entirely yields an all-negative map.
pub fn assign_labels(grid: &HeadGrid, gt: &BBox) -> LabelMap {
    let search = BBox {
        x1: 0.0,
        y1: 0.0,
        x2: grid.extent,
        y2: grid.extent,
    };
    let visible = gt.intersects(&search);
    let core = gt.scaled(POSITIVE_SHRINK);
    let mut labels = Vec::with_capacity(grid.len());
    let mut targets = Vec::with_capacity(grid.len());
    for i in 0..grid.len() {
        let (x, y) = grid.point(i);
        if visible && core.contains(x, y) {
            labels.push(Label::Positive);
            targets.push(Some(encode((x, y), gt)));
        } else if !visible || !gt.contains(x, y) {
            labels.push(Label::Negative);
            targets.push(None);
        } else {
            labels.push(Label::Ignore);
            targets.push(None);
        }
    }
    LabelMap {
        grid: *grid,
        labels,
        targets,
        gt: *gt,
    }
}

/// Distances from `point` to the four sides of `b`.
pub fn encode(point: (f64, f64), b: &BBox) -> [f64; 4] {
    let (px, py) = point;
    [px - b.x1, py - b.y1, b.x2 - px, b.y2 - py]
}

/// Box from a point and `(l, t, r, b)` offsets; negative offsets clamp to 0.
pub fn decode(point: (f64, f64), offsets: [f64; 4]) -> BBox {
    let (px, py) = point;
    let [l, t, r, b] = offsets.map(|v| v.max(0.0));
    BBox {
        x1: px - l,
        y1: py - t,
        x2: px + r,
        y2: py + b,
    }
}

/// Differentiable boxes: four coordinate vectors of equal length.
#[derive(Debug, Clone, Copy)]
pub struct BoxVars {
    pub x1: Var,
    pub y1: Var,
    pub x2: Var,
    pub y2: Var,
}

impl BoxVars {
    /// Boxes around fixed `points` from non-negative offset vectors `(l, t, r, b)`.
    pub fn from_offsets(g: &mut Graph, points: &[(f64, f64)], offsets: [Var; 4]) -> Result<Self> {
        let px = g.vector(points.iter().map(|p| p.0).collect())?;
        let py = g.vector(points.iter().map(|p| p.1).collect())?;
        let [l, t, r, b] = offsets;
        Ok(Self {
            x1: g.sub(px, l)?,
            y1: g.sub(py, t)?,
            x2: g.add(px, r)?,
            y2: g.add(py, b)?,
        })
    }

    pub fn to_boxes(&self, g: &Graph) -> Vec<BBox> {
        let (x1, y1, x2, y2) = (
            g.value(self.x1),
            g.value(self.y1),
            g.value(self.x2),
            g.value(self.y2),
        );
        (0..x1.len())
            .map(|i| BBox {
                x1: x1[i],
                y1: y1[i],
                x2: x2[i],
                y2: y2[i],
            })
            .collect()
    }
}

/// Elementwise IoU of `pred` against fixed `gt` boxes, recorded on `g`.
pub fn iou_vars(g: &mut Graph, pred: &BoxVars, gt: &[BBox]) -> Result<Var> {
    let n = g.value(pred.x1).len();
    if gt.len() != n {
        return Err(Error::shape("iou", format!("{n} predictions vs {} targets", gt.len())));
    }
    let coord = |f: fn(&BBox) -> f64| gt.iter().map(f).collect::<Vec<_>>();
    let gx1 = g.vector(coord(|b| b.x1))?;
    let gy1 = g.vector(coord(|b| b.y1))?;
    let gx2 = g.vector(coord(|b| b.x2))?;
    let gy2 = g.vector(coord(|b| b.y2))?;
    let garea = g.vector(coord(BBox::area))?;

    let ix2 = g.minimum(pred.x2, gx2)?;
    let ix1 = g.maximum(pred.x1, gx1)?;
    let iw = g.sub(ix2, ix1)?;
    let iw = g.relu(iw)?;
    let iy2 = g.minimum(pred.y2, gy2)?;
    let iy1 = g.maximum(pred.y1, gy1)?;
    let ih = g.sub(iy2, iy1)?;
    let ih = g.relu(ih)?;
    let inter = g.mul(iw, ih)?;

    let pw = g.sub(pred.x2, pred.x1)?;
    let ph = g.sub(pred.y2, pred.y1)?;
    let parea = g.mul(pw, ph)?;
    let union = g.add(parea, garea)?;
    let union = g.sub(union, inter)?;
    if g.value(union).iter().any(|u| *u <= 0.0) {
        return Err(Error::Invalid("iou with empty union".into()));
    }
    g.div(inter, union)
}

/// Mean of `1 - IoU` over the boxes. A zero-area prediction sits on a flat
/// region: loss 1, zero gradient.
pub fn iou_loss(g: &mut Graph, pred: &BoxVars, gt: &[BBox]) -> Result<Var> {
    let overlap = iou_vars(g, pred, gt)?;
    let m = g.mean(overlap)?;
    let nm = g.neg(m)?;
    g.offset(nm, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, Tensor};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn grid() -> HeadGrid {
        HeadGrid {
            rows: 9,
            cols: 9,
            stride: 8.0,
            origin: 31.5,
            extent: 128.0,
        }
    }

    #[test]
    fn iou_examples() {
        let a = bb(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bb(20.0, 20.0, 30.0, 30.0)), 0.0);
        assert_abs_diff_eq!(iou(&a, &bb(5.0, 0.0, 15.0, 10.0)), 50.0 / 150.0, epsilon = 1e-15);
        let p = bb(3.0, 3.0, 3.0, 3.0);
        assert_eq!(iou(&p, &p), 0.0);
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(BBox::new(2.0, 0.0, 1.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 1.0).is_err());
    }

    #[test]
    fn label_rule() {
        let g = grid();
        // gt centred on the grid point at index 40 (pixel 63.5, 63.5)
        let gt = BBox::from_center(63.5, 63.5, 40.0, 40.0).unwrap();
        let map = assign_labels(&g, &gt);
        assert_eq!(map.labels[40], Label::Positive);
        assert_eq!(map.labels[0], Label::Negative);
        // neighbour at 8 px: inside shrunk box (half-width 10)
        assert_eq!(map.labels[41], Label::Positive);
        // 16 px = 0.8 of the half-width: inside gt, outside the core
        assert_eq!(map.labels[42], Label::Ignore);
        assert_eq!(map.n_pos(), map.positives().len());
        let t = map.targets[40].unwrap();
        assert_eq!(t, [20.0, 20.0, 20.0, 20.0]);
    }

    #[test]
    fn point_at_three_quarters_half_width_is_ignored() {
        let g = HeadGrid {
            rows: 1,
            cols: 2,
            stride: 15.0,
            origin: 50.0,
            extent: 128.0,
        };
        let gt = BBox::from_center(50.0, 50.0, 40.0, 40.0).unwrap();
        let map = assign_labels(&g, &gt);
        assert_eq!(map.labels, vec![Label::Positive, Label::Ignore]);
    }

    #[test]
    fn gt_outside_search_is_all_negative() {
        let g = grid();
        let gt = bb(200.0, 200.0, 240.0, 240.0);
        let map = assign_labels(&g, &gt);
        assert_eq!(map.n_pos(), 0);
        assert_eq!(map.n_neg(), g.len());
    }

    #[test]
    fn decode_examples() {
        assert_eq!(decode((50.0, 50.0), [10.0; 4]), bb(40.0, 40.0, 60.0, 60.0));
        let z = decode((7.0, 9.0), [0.0; 4]);
        assert_eq!(z.area(), 0.0);
        assert_eq!(z.center(), (7.0, 9.0));
        assert_eq!(decode((5.0, 5.0), [-3.0, 1.0, 1.0, 1.0]).x1, 5.0);
    }

    #[test]
    fn iou_loss_values() {
        let mut g = Graph::new();
        let gt = bb(0.0, 0.0, 10.0, 10.0);
        let make = |g: &mut Graph, b: BBox| BoxVars {
            x1: g.param(&Tensor::from_vec(vec![b.x1]).unwrap()),
            y1: g.param(&Tensor::from_vec(vec![b.y1]).unwrap()),
            x2: g.param(&Tensor::from_vec(vec![b.x2]).unwrap()),
            y2: g.param(&Tensor::from_vec(vec![b.y2]).unwrap()),
        };
        let p = make(&mut g, gt);
        let l = iou_loss(&mut g, &p, &[gt]).unwrap();
        assert_eq!(g.item(l), 0.0);
        let p = make(&mut g, bb(20.0, 20.0, 30.0, 30.0));
        let l = iou_loss(&mut g, &p, &[gt]).unwrap();
        assert_eq!(g.item(l), 1.0);
        let p = make(&mut g, bb(5.0, 0.0, 15.0, 10.0));
        let l = iou_loss(&mut g, &p, &[gt]).unwrap();
        assert_abs_diff_eq!(g.item(l), 1.0 - 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn zero_area_prediction_is_flat() {
        let mut g = Graph::new();
        let gt = bb(0.0, 0.0, 10.0, 10.0);
        let x1 = g.param(&Tensor::from_vec(vec![4.0]).unwrap());
        let y1 = g.param(&Tensor::from_vec(vec![4.0]).unwrap());
        let x2 = g.param(&Tensor::from_vec(vec![4.0]).unwrap());
        let y2 = g.param(&Tensor::from_vec(vec![4.0]).unwrap());
        let p = BoxVars { x1, y1, x2, y2 };
        let l = iou_loss(&mut g, &p, &[gt]).unwrap();
        assert_eq!(g.item(l), 1.0);
        g.backward(l).unwrap();
        for v in [x1, y1, x2, y2] {
            assert_eq!(g.grad(v).unwrap_or(&[0.0]), &[0.0]);
        }
    }

    #[test]
    fn iou_loss_gradient_matches_finite_differences() {
        let gts = [bb(10.0, 12.0, 40.0, 35.0), bb(0.0, 0.0, 20.0, 30.0)];
        // two overlapping predictions with no coordinate ties against gt
        let point = Tensor::from_vec(vec![
            14.0, 2.0, 9.0, 3.0, 45.0, 25.0, 33.0, 26.0,
        ])
        .unwrap();
        let err = finite_diff_check(
            |g, x| {
                let x1 = g.gather(x, &[0, 1])?;
                let y1 = g.gather(x, &[2, 3])?;
                let x2 = g.gather(x, &[4, 5])?;
                let y2 = g.gather(x, &[6, 7])?;
                iou_loss(g, &BoxVars { x1, y1, x2, y2 }, &gts)
            },
            &point,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-50.0..50.0f64, -50.0..50.0f64, 0.0..40.0f64, 0.0..40.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let v = iou(&a, &b);
            prop_assert_eq!(v, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&v));
        }

        #[test]
        fn iou_translation_invariant(a in arb_box(), b in arb_box(), dx in -100.0..100.0f64, dy in -100.0..100.0f64) {
            let v = iou(&a, &b);
            let w = iou(&a.translate(dx, dy), &b.translate(dx, dy));
            prop_assert!((v - w).abs() < 1e-12);
        }

        #[test]
        fn encode_decode_round_trip(b in arb_box(), fx in 0.0..1.0f64, fy in 0.0..1.0f64) {
            let p = (b.x1 + fx * b.width(), b.y1 + fy * b.height());
            let d = decode(p, encode(p, &b));
            prop_assert!((d.x1 - b.x1).abs() < 1e-12);
            prop_assert!((d.y1 - b.y1).abs() < 1e-12);
            prop_assert!((d.x2 - b.x2).abs() < 1e-12);
            prop_assert!((d.y2 - b.y2).abs() < 1e-12);
        }

        #[test]
        fn labels_partition_grid(cx in 0.0..128.0f64, cy in 0.0..128.0f64, w in 1.0..80.0f64, h in 1.0..80.0f64) {
            let g = grid();
            let gt = BBox::from_center(cx, cy, w, h).unwrap();
            let map = assign_labels(&g, &gt);
            let ignore = map.labels.iter().filter(|l| **l == Label::Ignore).count();
            prop_assert_eq!(map.n_pos() + map.n_neg() + ignore, g.len());
            for (l, t) in map.labels.iter().zip(&map.targets) {
                match l {
                    Label::Positive => prop_assert!(t.unwrap().iter().all(|v| *v >= 0.0)),
                    _ => prop_assert!(t.is_none()),
                }
            }
        }
    }
}
