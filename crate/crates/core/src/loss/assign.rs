use crate::data::Annotation;
use crate::geometry::{iou_raw, BBox};
use crate::postprocess::{sigmoid, GridSpec};

/// Fractional cell offsets are kept this far inside (0, 1) before the
/// logit so that a centre on a cell boundary still encodes finitely.
const OFFSET_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Positive {
    pub head: usize,
    pub i: usize,
    pub j: usize,
    pub k: usize,
    /// Index into the ground-truth list.
    pub gt: usize,
    pub class_id: usize,
    /// Ground truth in network-input pixels.
    pub target: BBox,
    /// Raw head values `(tx, ty, tw, th)` that decode exactly to `target`.
    pub encoded: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetAssignment {
    pub positives: Vec<Positive>,
    /// Per head, indexed `(i * S + j) * B + k`; true where the no-object
    /// term is skipped. Every positive slot is ignored.
    pub ignore: Vec<Vec<bool>>,
    /// Ground truths that lost a slot collision to a larger box.
    pub dropped: Vec<usize>,
}

impl TargetAssignment {
    /// Number of slots contributing to the no-object term.
    pub fn negatives(&self) -> usize {
        self.ignore
            .iter()
            .map(|m| m.iter().filter(|&&x| !x).count())
            .sum()
    }
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(OFFSET_EPS, 1.0 - OFFSET_EPS);
    (p / (1.0 - p)).ln()
}

fn shape_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    iou_raw(
        &BBox::from_center(0.0, 0.0, a.0, a.1),
        &BBox::from_center(0.0, 0.0, b.0, b.1),
    )
}

/// Raw `(tx, ty, tw, th)` that decode to `target` at cell `(i, j)`, anchor `k`.
pub fn encode_box(grid: &GridSpec, i: usize, j: usize, k: usize, target: &BBox) -> [f64; 4] {
    let (cx, cy) = target.center();
    let s = grid.s as f64;
    let (aw, ah) = grid.anchors[k];
    [
        logit(cx / grid.input_w as f64 * s - j as f64),
        logit(cy / grid.input_h as f64 * s - i as f64),
        (target.width() / aw).ln(),
        (target.height() / ah).ln(),
    ]
}

/// Box in network-input pixels decoded from raw `(tx, ty, tw, th)`.
pub fn decode_box(grid: &GridSpec, i: usize, j: usize, k: usize, raw: [f64; 4]) -> BBox {
    let s = grid.s as f64;
    let (aw, ah) = grid.anchors[k];
    BBox::from_center(
        (j as f64 + sigmoid(raw[0])) / s * grid.input_w as f64,
        (i as f64 + sigmoid(raw[1])) / s * grid.input_h as f64,
        aw * raw[2].exp(),
        ah * raw[3].exp(),
    )
}

/// Assigns each ground truth to the anchor (over all heads) whose shape best
/// matches it, at the cell containing its centre.
pub fn assign_targets(gts: &[Annotation], grids: &[GridSpec], ignore_iou: f64) -> TargetAssignment {
    let mut slots: Vec<Option<Positive>> = Vec::new();
    let mut slot_key: Vec<(usize, usize, usize, usize)> = Vec::new();
    let mut dropped = Vec::new();

    let targets: Vec<BBox> = gts
        .iter()
        .map(|a| {
            let g = &grids[0];
            let (w, h) = (g.input_w as f64, g.input_h as f64);
            BBox::from_center(a.bbox.cx * w, a.bbox.cy * h, a.bbox.w * w, a.bbox.h * h)
        })
        .collect();

    for (gi, (ann, target)) in gts.iter().zip(&targets).enumerate() {
        let shape = (target.width(), target.height());
        let mut best: Option<(usize, usize, f64)> = None;
        for (h, g) in grids.iter().enumerate() {
            for (k, &a) in g.anchors.iter().enumerate() {
                let v = shape_iou(shape, a);
                if best.map_or(true, |(_, _, b)| v > b) {
                    best = Some((h, k, v));
                }
            }
        }
        let Some((h, k, _)) = best else { continue };
        let g = &grids[h];
        let cell = |c: f64| ((c * g.s as f64).floor() as usize).min(g.s - 1);
        let (i, j) = (cell(ann.bbox.cy), cell(ann.bbox.cx));
        let pos = Positive {
            head: h,
            i,
            j,
            k,
            gt: gi,
            class_id: ann.class_id,
            target: *target,
            encoded: encode_box(g, i, j, k, target),
        };
        let key = (h, i, j, k);
        match slot_key.iter().position(|&s| s == key) {
            Some(existing) => {
                let incumbent = slots[existing].as_ref().expect("occupied");
                if target.area() > incumbent.target.area() {
                    log::warn!("ground truth {} displaced by larger box {gi}", incumbent.gt);
                    dropped.push(incumbent.gt);
                    slots[existing] = Some(pos);
                } else {
                    log::warn!("ground truth {gi} dropped: slot taken by {}", incumbent.gt);
                    dropped.push(gi);
                }
            }
            None => {
                slot_key.push(key);
                slots.push(Some(pos));
            }
        }
    }
    dropped.sort_unstable();

    let mut ignore: Vec<Vec<bool>> = grids
        .iter()
        .map(|g| {
            let mut mask = vec![false; g.s * g.s * g.b()];
            for i in 0..g.s {
                for j in 0..g.s {
                    for k in 0..g.b() {
                        let prior = g.prior_box(i, j, k);
                        if targets.iter().any(|t| iou_raw(&prior, t) > ignore_iou) {
                            mask[(i * g.s + j) * g.b() + k] = true;
                        }
                    }
                }
            }
            mask
        })
        .collect();
    let positives: Vec<Positive> = slots.into_iter().flatten().collect();
    for p in &positives {
        let g = &grids[p.head];
        ignore[p.head][(p.i * g.s + p.j) * g.b() + p.k] = true;
    }
    TargetAssignment {
        positives,
        ignore,
        dropped,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::NormBox;

    fn grids() -> Vec<GridSpec> {
        vec![
            GridSpec {
                s: 13,
                anchors: vec![(116.0, 90.0), (156.0, 198.0), (373.0, 326.0)],
                classes: 4,
                input_w: 416,
                input_h: 416,
            },
            GridSpec {
                s: 26,
                anchors: vec![(30.0, 61.0), (62.0, 45.0), (59.0, 119.0)],
                classes: 4,
                input_w: 416,
                input_h: 416,
            },
        ]
    }

    fn ann(class_id: usize, cx: f64, cy: f64, w: f64, h: f64) -> Annotation {
        Annotation {
            class_id,
            bbox: NormBox::new(cx, cy, w, h).unwrap(),
        }
    }

    #[test]
    fn exact_anchor_shape_wins() {
        // second head, anchor index 2 overall "anchor 5"
        let a = ann(1, 0.5, 0.5, 59.0 / 416.0, 119.0 / 416.0);
        let t = assign_targets(&[a], &grids(), 0.5);
        assert_eq!(t.positives.len(), 1);
        let p = &t.positives[0];
        assert_eq!((p.head, p.k, p.i, p.j), (1, 2, 13, 13));
        assert!(p.encoded[2].abs() < 1e-12 && p.encoded[3].abs() < 1e-12);
    }

    #[test]
    fn image_centre_on_13_grid() {
        let a = ann(0, 0.5, 0.5, 116.0 / 416.0, 90.0 / 416.0);
        let t = assign_targets(&[a], &grids(), 0.5);
        let p = &t.positives[0];
        assert_eq!((p.head, p.i, p.j), (0, 6, 6));
        assert!(t.ignore[0][(6 * 13 + 6) * 3]);
    }

    #[test]
    fn encode_decode_roundtrip() {
        let g = grids();
        let gts = [ann(2, 0.31, 0.77, 0.2, 0.15), ann(3, 0.9, 0.05, 0.1, 0.08)];
        let t = assign_targets(&gts, &g, 0.5);
        for p in &t.positives {
            let back = decode_box(&g[p.head], p.i, p.j, p.k, p.encoded);
            for (a, b) in [(back.x1, p.target.x1), (back.y1, p.target.y1), (back.x2, p.target.x2), (back.y2, p.target.y2)] {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn collision_keeps_larger_box() {
        let small = ann(0, 0.5, 0.5, 100.0 / 416.0, 80.0 / 416.0);
        let large = ann(1, 0.505, 0.505, 116.0 / 416.0, 90.0 / 416.0);
        let t = assign_targets(&[small, large], &grids(), 0.5);
        assert_eq!(t.dropped, vec![0]);
        assert_eq!(t.positives.len(), 1);
        assert_eq!(t.positives[0].gt, 1);
    }

    #[test]
    fn ignore_covers_positives_and_is_deterministic() {
        let g = grids();
        let gts = [ann(0, 0.2, 0.3, 0.25, 0.2), ann(2, 0.7, 0.6, 0.1, 0.3)];
        let a = assign_targets(&gts, &g, 0.5);
        assert_eq!(a, assign_targets(&gts, &g, 0.5));
        for p in &a.positives {
            assert!(a.ignore[p.head][(p.i * g[p.head].s + p.j) * 3 + p.k]);
        }
        let total: usize = g.iter().map(|g| g.s * g.s * 3).sum();
        assert!(a.negatives() < total);
        assert_eq!(a.positives.len() + a.dropped.len(), gts.len());
    }
}
