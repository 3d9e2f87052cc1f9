//! Box representations, overlap measures and class-wise NMS.
//!
//! Boxes live in normalized `(cx, cy, w, h)` image units. Corner form is
//! derived on demand for overlap computations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of interpolation points used by InterpIoU when the caller does not
/// choose one.
pub const DEFAULT_INTERP_POINTS: usize = 8;

/// Slack accepted by [`clip_to_unit`] before it rewrites a box. Corner
/// arithmetic can land a few ulps outside the unit square.
const CLIP_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn is_finite(&self) -> bool {
        self.cx.is_finite() && self.cy.is_finite() && self.w.is_finite() && self.h.is_finite()
    }

    pub fn area(&self) -> f64 {
        self.w.abs() * self.h.abs()
    }

    /// Corner form without the finiteness check.
    pub fn corners(&self) -> Corners {
        Corners {
            x0: self.cx - 0.5 * self.w,
            y0: self.cy - 0.5 * self.h,
            x1: self.cx + 0.5 * self.w,
            y1: self.cy + 0.5 * self.h,
        }
        .canonical()
    }

    /// Linear interpolation `(1 - t) * self + t * other`, componentwise.
    pub fn lerp(&self, other: &BoundingBox, t: f64) -> BoundingBox {
        BoundingBox::new(
            (1.0 - t) * self.cx + t * other.cx,
            (1.0 - t) * self.cy + t * other.cy,
            (1.0 - t) * self.w + t * other.w,
            (1.0 - t) * self.h + t * other.h,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Corners {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Corners {
    pub const fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn canonical(self) -> Self {
        Self {
            x0: self.x0.min(self.x1),
            y0: self.y0.min(self.y1),
            x1: self.x0.max(self.x1),
            y1: self.y0.max(self.y1),
        }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn to_box(self) -> BoundingBox {
        BoundingBox::new(
            0.5 * (self.x0 + self.x1),
            0.5 * (self.y0 + self.y1),
            self.x1 - self.x0,
            self.y1 - self.y0,
        )
    }

    fn lerp(&self, other: &Corners, t: f64) -> Corners {
        Corners::new(
            (1.0 - t) * self.x0 + t * other.x0,
            (1.0 - t) * self.y0 + t * other.y0,
            (1.0 - t) * self.x1 + t * other.x1,
            (1.0 - t) * self.y1 + t * other.y1,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub class_id: usize,
    pub score: f64,
}

pub fn to_corners(b: &BoundingBox) -> Result<Corners> {
    if !b.is_finite() {
        return Err(Error::InvalidBox(format!("{b:?}")));
    }
    Ok(b.corners())
}

fn intersection(a: &Corners, b: &Corners) -> f64 {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    iw * ih
}

/// Intersection over union. Zero whenever the union has no area, so two
/// degenerate boxes never overlap, even when identical.
pub fn iou(a: &Corners, b: &Corners) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Generalized IoU: `iou - (|C| - |A ∪ B|) / |C|` with `C` the smallest
/// enclosing box. Returns 0 when the enclosing box itself has no area.
pub fn giou(a: &Corners, b: &Corners) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    let enclose = (a.x1.max(b.x1) - a.x0.min(b.x0)) * (a.y1.max(b.y1) - a.y0.min(b.y0));
    if enclose <= 0.0 {
        return 0.0;
    }
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    iou - (enclose - union) / enclose
}

/// Generalized IoU of `pred` against a fixed `target`, together with its
/// gradient with respect to `pred`'s `(cx, cy, w, h)`.
///
/// `pred` is expected to have non-negative extent; at kinks of the min/max
/// terms the gradient picks the branch that moves `pred`.
pub fn giou_with_grad(pred: &BoundingBox, target: &BoundingBox) -> (f64, [f64; 4]) {
    let (px0, px1) = (pred.cx - 0.5 * pred.w, pred.cx + 0.5 * pred.w);
    let (py0, py1) = (pred.cy - 0.5 * pred.h, pred.cy + 0.5 * pred.h);
    let t = target.corners();

    let iw_raw = px1.min(t.x1) - px0.max(t.x0);
    let ih_raw = py1.min(t.y1) - py0.max(t.y0);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    let (pw, ph) = (px1 - px0, py1 - py0);
    let union = pw * ph + t.area() - inter;
    let cw = px1.max(t.x1) - px0.min(t.x0);
    let ch = py1.max(t.y1) - py0.min(t.y0);
    let enclose = cw * ch;
    if enclose <= 0.0 {
        return (0.0, [0.0; 4]);
    }

    // d/d(px0, py0, px1, py1) of each area term.
    let d_inter = [
        if iw_raw > 0.0 && px0 >= t.x0 { -ih } else { 0.0 },
        if ih_raw > 0.0 && py0 >= t.y0 { -iw } else { 0.0 },
        if iw_raw > 0.0 && px1 <= t.x1 { ih } else { 0.0 },
        if ih_raw > 0.0 && py1 <= t.y1 { iw } else { 0.0 },
    ];
    let d_area = [-ph, -pw, ph, pw];
    let d_enclose = [
        if px0 <= t.x0 { -ch } else { 0.0 },
        if py0 <= t.y0 { -cw } else { 0.0 },
        if px1 >= t.x1 { ch } else { 0.0 },
        if py1 >= t.y1 { cw } else { 0.0 },
    ];

    let iou = if union > 0.0 { inter / union } else { 0.0 };
    let value = iou - (enclose - union) / enclose;

    let mut d_corner = [0.0; 4];
    for k in 0..4 {
        let d_union = d_area[k] - d_inter[k];
        let d_iou = if union > 0.0 {
            (d_inter[k] * union - inter * d_union) / (union * union)
        } else {
            0.0
        };
        let d_ratio = (d_union * enclose - union * d_enclose[k]) / (enclose * enclose);
        d_corner[k] = d_iou + d_ratio;
    }
    let grad = [
        d_corner[0] + d_corner[2],
        d_corner[1] + d_corner[3],
        0.5 * (d_corner[2] - d_corner[0]),
        0.5 * (d_corner[3] - d_corner[1]),
    ];
    (value, grad)
}

/// Mean IoU between `b` and `n_interp` boxes interpolated linearly from `a`
/// towards `b`. The interpolation points are inclusive of both endpoints
/// (`t = k / (n_interp - 1)`); a single point degenerates to `iou(a, b)`.
pub fn interp_iou(a: &Corners, b: &Corners, n_interp: usize) -> Result<f64> {
    if n_interp == 0 {
        return Err(Error::InvalidParameter("n_interp must be at least 1".into()));
    }
    if n_interp == 1 {
        return Ok(iou(a, b));
    }
    let denom = (n_interp - 1) as f64;
    let total: f64 = (0..n_interp)
        .map(|k| iou(&a.lerp(b, k as f64 / denom), b))
        .sum();
    Ok(total / n_interp as f64)
}

/// Greedy per-class non-maximum suppression.
///
/// Candidates are visited in descending score, then ascending class id, then
/// ascending input index; the output keeps that order.
pub fn class_wise_nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        dets[j]
            .score
            .total_cmp(&dets[i].score)
            .then(dets[i].class_id.cmp(&dets[j].class_id))
            .then(i.cmp(&j))
    });

    let corners: Vec<Corners> = dets.iter().map(|d| d.bbox.corners()).collect();
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let suppressed = kept.iter().any(|&k| {
            dets[k].class_id == dets[i].class_id && iou(&corners[k], &corners[i]) > iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i]).collect()
}

/// Clamp a box to the unit square in corner form.
///
/// Boxes already inside the square (up to a few ulps) are returned untouched,
/// which makes the operation exactly idempotent.
pub fn clip_to_unit(b: &BoundingBox) -> BoundingBox {
    let c = b.corners();
    let inside = |v: f64| (-CLIP_SLACK..=1.0 + CLIP_SLACK).contains(&v);
    if b.w >= 0.0 && b.h >= 0.0 && inside(c.x0) && inside(c.x1) && inside(c.y0) && inside(c.y1)
    {
        return *b;
    }
    Corners::new(
        c.x0.clamp(0.0, 1.0),
        c.y0.clamp(0.0, 1.0),
        c.x1.clamp(0.0, 1.0),
        c.y1.clamp(0.0, 1.0),
    )
    .to_box()
}

/// [`clip_to_unit`] together with its Jacobian-vector product: given the
/// gradient with respect to the clipped box, returns the gradient with
/// respect to the input box. Clamped corners pass no gradient.
pub fn clip_to_unit_backward(b: &BoundingBox, grad_out: [f64; 4]) -> [f64; 4] {
    let c = b.corners();
    let inside = |v: f64| (-CLIP_SLACK..=1.0 + CLIP_SLACK).contains(&v);
    if b.w >= 0.0 && b.h >= 0.0 && inside(c.x0) && inside(c.x1) && inside(c.y0) && inside(c.y1)
    {
        return grad_out;
    }
    let pass = |v: f64| if (0.0..=1.0).contains(&v) { 1.0 } else { 0.0 };
    // Output box from clamped corners (x0c, x1c): cx = (x0c + x1c) / 2, w = x1c - x0c.
    let axis = |lo: f64, hi: f64, d_center: f64, d_size: f64, flipped: bool| -> (f64, f64) {
        let d_lo = (0.5 * d_center - d_size) * pass(lo);
        let d_hi = (0.5 * d_center + d_size) * pass(hi);
        // Corners were canonicalised; when the input extent is negative the
        // low corner came from `center + size / 2`.
        if flipped {
            (d_lo + d_hi, 0.5 * (d_lo - d_hi))
        } else {
            (d_lo + d_hi, 0.5 * (d_hi - d_lo))
        }
    };
    let (dcx, dw) = axis(c.x0, c.x1, grad_out[0], grad_out[2], b.w < 0.0);
    let (dcy, dh) = axis(c.y0, c.y1, grad_out[1], grad_out[3], b.h < 0.0);
    [dcx, dcy, dw, dh]
}
