//! Axis-aligned box arithmetic.
//!
//! [`BBox`] (absolute corner form) is the representation every geometric
//! routine works in. [`NormBox`] only appears where boxes enter or leave the
//! system: label files and head decoding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute, corner-form rectangle in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::InvalidInput(format!("non-finite box {self:?}")));
        }
        if self.x1 > self.x2 || self.y1 > self.y2 {
            return Err(Error::InvalidInput(format!("inverted box {self:?}")));
        }
        Ok(())
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox {
            x1: cx - w / 2.0,
            y1: cy - h / 2.0,
            x2: cx + w / 2.0,
            y2: cy + h / 2.0,
        }
    }

    #[inline]
    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    #[inline]
    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn scaled(&self, s: f64) -> Self {
        BBox {
            x1: self.x1 * s,
            y1: self.y1 * s,
            x2: self.x2 * s,
            y2: self.y2 * s,
        }
    }

    pub fn clamped(&self, w: f64, h: f64) -> Self {
        BBox {
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
            x2: self.x2.clamp(0.0, w),
            y2: self.y2.clamp(0.0, h),
        }
    }
}

/// Center-form box normalized by the image dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl NormBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let nb = NormBox { cx, cy, w, h };
        nb.validate()?;
        Ok(nb)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v.is_finite() && (0.0..=1.0).contains(&v);
        if !unit(self.cx) || !unit(self.cy) {
            return Err(Error::InvalidInput(format!(
                "center ({}, {}) outside [0,1]",
                self.cx, self.cy
            )));
        }
        let extent = |v: f64| v.is_finite() && v > 0.0 && v <= 1.0;
        if !extent(self.w) || !extent(self.h) {
            return Err(Error::InvalidInput(format!(
                "extent ({}, {}) outside (0,1]",
                self.w, self.h
            )));
        }
        Ok(())
    }
}

/// Generalized IoU together with the areas it was computed from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GiouResult {
    pub giou: f64,
    pub iou: f64,
    pub intersection: f64,
    pub union_area: f64,
    pub hull_area: f64,
}

#[inline]
fn overlap(a1: f64, a2: f64, b1: f64, b2: f64) -> f64 {
    (a2.min(b2) - a1.max(b1)).max(0.0)
}

/// IoU without input validation; zero when the union is empty.
#[inline]
pub(crate) fn iou_raw(a: &BBox, b: &BBox) -> f64 {
    let inter = overlap(a.x1, a.x2, b.x1, b.x2) * overlap(a.y1, a.y2, b.y1, b.y2);
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(iou_raw(a, b))
}

pub fn giou(a: &BBox, b: &BBox) -> Result<GiouResult> {
    a.validate()?;
    b.validate()?;
    let intersection = overlap(a.x1, a.x2, b.x1, b.x2) * overlap(a.y1, a.y2, b.y1, b.y2);
    let union_area = a.area() + b.area() - intersection;
    let hull_area = (a.x2.max(b.x2) - a.x1.min(b.x1)) * (a.y2.max(b.y2) - a.y1.min(b.y1));
    if hull_area <= 0.0 {
        return Err(Error::DegenerateGeometry(
            "enclosing hull has zero area".into(),
        ));
    }
    let iou = if union_area > 0.0 {
        intersection / union_area
    } else {
        0.0
    };
    // Rounding can push the union a few ulps past a hull that equals it.
    let penalty = ((hull_area - union_area) / hull_area).max(0.0);
    Ok(GiouResult {
        giou: iou - penalty,
        iou,
        intersection,
        union_area: union_area.min(hull_area),
        hull_area,
    })
}

/// Derivative of `max(p, t)` / `min(p, t)` w.r.t. `p`; ties split evenly.
#[inline]
fn select_grad(p: f64, t: f64, p_wins: bool) -> f64 {
    if p == t {
        0.5
    } else if p_wins {
        1.0
    } else {
        0.0
    }
}

struct AxisTerms {
    overlap: f64,
    d_overlap: [f64; 2],
    hull: f64,
    d_hull: [f64; 2],
}

fn axis_terms(p1: f64, p2: f64, t1: f64, t2: f64) -> AxisTerms {
    let raw = p2.min(t2) - p1.max(t1);
    // Touching edges (raw == 0) differentiate from the overlapping side.
    let d_overlap = if raw >= 0.0 {
        [-select_grad(p1, t1, p1 > t1), select_grad(p2, t2, p2 < t2)]
    } else {
        [0.0, 0.0]
    };
    AxisTerms {
        overlap: raw.max(0.0),
        d_overlap,
        hull: p2.max(t2) - p1.min(t1),
        d_hull: [-select_grad(p1, t1, p1 < t1), select_grad(p2, t2, p2 > t2)],
    }
}

/// Partial derivatives of `giou(pred, target).giou` with respect to
/// `pred`'s `[x1, y1, x2, y2]`, target held fixed.
///
/// Where a pred coordinate coincides with the matching target coordinate the
/// two one-sided derivatives are averaged, which makes the gradient vanish at
/// `pred == target`. Boxes that merely touch are differentiated from the
/// overlapping side.
pub fn giou_gradient(pred: &BBox, target: &BBox) -> Result<[f64; 4]> {
    pred.validate()?;
    target.validate()?;
    if pred.area() <= 0.0 {
        return Err(Error::DegenerateGeometry(format!(
            "prediction {pred:?} has zero area"
        )));
    }
    let x = axis_terms(pred.x1, pred.x2, target.x1, target.x2);
    let y = axis_terms(pred.y1, pred.y2, target.y1, target.y2);

    let (pw, ph) = (pred.width(), pred.height());
    let inter = x.overlap * y.overlap;
    let union = pred.area() + target.area() - inter;
    let hull = x.hull * y.hull;

    // Order: x1, y1, x2, y2.
    let d_inter = [
        x.d_overlap[0] * y.overlap,
        x.overlap * y.d_overlap[0],
        x.d_overlap[1] * y.overlap,
        x.overlap * y.d_overlap[1],
    ];
    let d_pred_area = [-ph, -pw, ph, pw];
    let d_hull = [
        x.d_hull[0] * y.hull,
        x.hull * y.d_hull[0],
        x.d_hull[1] * y.hull,
        x.hull * y.d_hull[1],
    ];

    let mut grad = [0.0; 4];
    for i in 0..4 {
        let d_union = d_pred_area[i] - d_inter[i];
        let d_iou = (d_inter[i] * union - inter * d_union) / (union * union);
        let d_ratio = (d_union * hull - union * d_hull[i]) / (hull * hull);
        grad[i] = d_iou + d_ratio;
    }
    Ok(grad)
}

fn check_dims(img_w: u32, img_h: u32) -> Result<()> {
    if img_w == 0 || img_h == 0 {
        return Err(Error::InvalidInput(format!(
            "image dimensions {img_w}x{img_h} must be positive"
        )));
    }
    Ok(())
}

/// Normalized center box to absolute corners, clamped to the image.
pub fn norm_to_abs(nb: &NormBox, img_w: u32, img_h: u32) -> Result<BBox> {
    nb.validate()?;
    check_dims(img_w, img_h)?;
    let (w, h) = (img_w as f64, img_h as f64);
    Ok(BBox {
        x1: (nb.cx - nb.w / 2.0) * w,
        y1: (nb.cy - nb.h / 2.0) * h,
        x2: (nb.cx + nb.w / 2.0) * w,
        y2: (nb.cy + nb.h / 2.0) * h,
    }
    .clamped(w, h))
}

pub fn abs_to_norm(b: &BBox, img_w: u32, img_h: u32) -> Result<NormBox> {
    b.validate()?;
    check_dims(img_w, img_h)?;
    let (w, h) = (img_w as f64, img_h as f64);
    NormBox::new(
        (b.x1 + b.x2) / 2.0 / w,
        (b.y1 + b.y2) / 2.0 / h,
        b.width() / w,
        b.height() / h,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    /// Counts unit cells covered by integer-cornered boxes.
    fn raster_area(boxes: &[BBox], pred: impl Fn(&[bool]) -> bool) -> f64 {
        let mut n = 0usize;
        for gy in -5..10 {
            for gx in -5..10 {
                let (px, py) = (gx as f64 + 0.5, gy as f64 + 0.5);
                let inside: Vec<bool> = boxes
                    .iter()
                    .map(|b| px > b.x1 && px < b.x2 && py > b.y1 && py < b.y2)
                    .collect();
                if pred(&inside) {
                    n += 1;
                }
            }
        }
        n as f64
    }

    #[test]
    fn raster_oracle_values() {
        let (a, b) = (bx(0.0, 0.0, 2.0, 2.0), bx(1.0, 1.0, 3.0, 3.0));
        let inter = raster_area(&[a, b], |s| s[0] && s[1]);
        let union = raster_area(&[a, b], |s| s[0] || s[1]);
        assert_eq!((inter, union), (1.0, 7.0));
        let r = giou(&a, &b).unwrap();
        assert!((r.iou - 1.0 / 7.0).abs() < 1e-15);
        assert!((r.giou - (-5.0 / 63.0)).abs() < 1e-15);
        assert_eq!(r.hull_area, 9.0);
    }

    #[test]
    fn identity_and_disjoint() {
        let a = bx(0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(giou(&a, &a).unwrap().giou, 1.0);
        let b = bx(2.0, 2.0, 3.0, 3.0);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        assert!((giou(&a, &b).unwrap().giou + 7.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn invalid_and_degenerate() {
        let bad = BBox {
            x1: f64::NAN,
            y1: 0.0,
            x2: 1.0,
            y2: 1.0,
        };
        let a = bx(0.0, 0.0, 1.0, 1.0);
        assert!(matches!(iou(&bad, &a), Err(Error::InvalidInput(_))));
        assert!(BBox::new(2.0, 0.0, 1.0, 1.0).is_err());
        let p = bx(1.0, 1.0, 1.0, 1.0);
        assert!(matches!(giou(&p, &p), Err(Error::DegenerateGeometry(_))));
        assert_eq!(iou(&p, &p).unwrap(), 0.0);
        assert!(matches!(
            giou_gradient(&p, &a),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn gradient_zero_at_perfect_overlap() {
        let a = bx(0.0, 0.0, 1.0, 1.0);
        assert_eq!(giou_gradient(&a, &a).unwrap(), [0.0; 4]);
    }

    fn fd_grad(p: &BBox, t: &BBox) -> [f64; 4] {
        let h = 1e-6;
        let mut out = [0.0; 4];
        for i in 0..4 {
            let mut c = [p.x1, p.y1, p.x2, p.y2];
            c[i] += h;
            let up = giou(&BBox { x1: c[0], y1: c[1], x2: c[2], y2: c[3] }, t).unwrap().giou;
            c[i] -= 2.0 * h;
            let dn = giou(&BBox { x1: c[0], y1: c[1], x2: c[2], y2: c[3] }, t).unwrap().giou;
            out[i] = (up - dn) / (2.0 * h);
        }
        out
    }

    #[test]
    fn gradient_matches_finite_differences_on_examples() {
        for (p, t) in [
            (bx(0.0, 0.0, 1.0, 1.0), bx(2.0, 2.0, 3.0, 3.0)),
            (bx(0.0, 0.0, 2.0, 2.0), bx(1.0, 1.0, 3.0, 3.0)),
        ] {
            let g = giou_gradient(&p, &t).unwrap();
            let n = fd_grad(&p, &t);
            for i in 0..4 {
                let rel = (g[i] - n[i]).abs() / g[i].abs().max(n[i].abs()).max(1e-4);
                assert!(rel <= 1e-4, "component {i}: {} vs {}", g[i], n[i]);
            }
        }
    }

    #[test]
    fn touching_boxes_use_overlapping_side() {
        // pred's right edge sits on target's left edge.
        let p = bx(0.0, 0.0, 1.0, 1.0);
        let t = bx(1.0, 0.0, 2.0, 1.0);
        let g = giou_gradient(&p, &t).unwrap();
        let h = 1e-7;
        let up = giou(&bx(0.0, 0.0, 1.0 + h, 1.0), &t).unwrap().giou;
        let base = giou(&p, &t).unwrap().giou;
        let right = (up - base) / h;
        assert!((g[2] - right).abs() < 1e-5, "{} vs {}", g[2], right);
    }

    #[test]
    fn conversions() {
        let nb = NormBox::new(0.5, 0.5, 1.0, 1.0).unwrap();
        assert_eq!(norm_to_abs(&nb, 100, 200).unwrap(), bx(0.0, 0.0, 100.0, 200.0));
        let nb = NormBox::new(0.25, 0.25, 0.5, 0.5).unwrap();
        assert_eq!(norm_to_abs(&nb, 100, 100).unwrap(), bx(0.0, 0.0, 50.0, 50.0));
        let nb = NormBox::new(0.9, 0.1, 0.4, 0.4).unwrap();
        let b = norm_to_abs(&nb, 10, 10).unwrap();
        assert_eq!((b.x2, b.y1), (10.0, 0.0));
        assert!(norm_to_abs(&nb, 0, 10).is_err());
        assert!(NormBox::new(0.5, 0.5, 0.0, 0.1).is_err());
        assert!(NormBox::new(1.5, 0.5, 0.1, 0.1).is_err());
    }

    proptest::proptest! {
        #[test]
        fn roundtrip_unclamped(cx in 0.3f64..0.7, cy in 0.3f64..0.7, w in 0.01f64..0.5, h in 0.01f64..0.5,
                               iw in 1u32..4000, ih in 1u32..4000) {
            let nb = NormBox::new(cx, cy, w, h).unwrap();
            let back = abs_to_norm(&norm_to_abs(&nb, iw, ih).unwrap(), iw, ih).unwrap();
            proptest::prop_assert!((back.cx - cx).abs() <= 1e-12);
            proptest::prop_assert!((back.cy - cy).abs() <= 1e-12);
            proptest::prop_assert!((back.w - w).abs() <= 1e-12);
            proptest::prop_assert!((back.h - h).abs() <= 1e-12);
        }

        #[test]
        fn giou_bounds_and_symmetry(a in proptest::array::uniform4(0.0f64..50.0),
                                    b in proptest::array::uniform4(0.0f64..50.0)) {
            let mk = |c: [f64; 4]| BBox::new(c[0].min(c[2]), c[1].min(c[3]), c[0].max(c[2]) + 0.1, c[1].max(c[3]) + 0.1).unwrap();
            let (a, b) = (mk(a), mk(b));
            let ab = giou(&a, &b).unwrap();
            let ba = giou(&b, &a).unwrap();
            proptest::prop_assert!(-1.0 < ab.giou && ab.giou <= ab.iou && ab.iou <= 1.0);
            proptest::prop_assert!((ab.giou - ba.giou).abs() <= 1e-12);
            proptest::prop_assert!(ab.hull_area >= ab.union_area && ab.union_area >= ab.intersection);
        }
    }
}
