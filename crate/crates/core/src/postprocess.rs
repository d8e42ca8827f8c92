//! Head decoding, confidence filtering and class-wise NMS.
//!
//! Heads use the per-anchor layout: for each of the `B` anchors a block of
//! `5 + C` channels `(tx, ty, tw, th, to, tc_0 .. tc_{C-1})`, each an
//! `S x S` plane.

use std::fmt::Write as _;

use crate::engine::{Network, Tensor};
use crate::error::{Error, Result};
use crate::fmtnum::fmt_sig;
use crate::geometry::{iou_raw, BBox};
use crate::model::{LayerSpec, NetworkConfig};

pub const DEFAULT_CONF_THRESHOLD: f64 = 0.5;
pub const DEFAULT_NMS_THRESHOLD: f64 = 0.45;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    /// Grid side length.
    pub s: usize,
    /// Anchor (w, h) pairs in network-input pixels; one per predicted box.
    pub anchors: Vec<(f64, f64)>,
    pub classes: usize,
    pub input_w: usize,
    pub input_h: usize,
}

impl GridSpec {
    pub fn b(&self) -> usize {
        self.anchors.len()
    }

    pub fn channels(&self) -> usize {
        self.b() * (5 + self.classes)
    }

    /// Flat index of `field` for anchor `k` at row `i`, column `j`.
    #[inline]
    pub fn index(&self, k: usize, field: usize, i: usize, j: usize) -> usize {
        ((k * (5 + self.classes) + field) * self.s + i) * self.s + j
    }

    pub fn check_head(&self, head: &Tensor) -> Result<()> {
        if head.shape != (self.channels(), self.s, self.s) {
            return Err(Error::Shape(format!(
                "head {:?} does not match grid {}x{} with {} anchors and {} classes",
                head.shape,
                self.s,
                self.s,
                self.b(),
                self.classes
            )));
        }
        Ok(())
    }

    /// Anchor prior box for cell (i, j), anchor k, in network-input pixels.
    pub fn prior_box(&self, i: usize, j: usize, k: usize) -> BBox {
        let (aw, ah) = self.anchors[k];
        BBox::from_center(
            (j as f64 + 0.5) / self.s as f64 * self.input_w as f64,
            (i as f64 + 0.5) / self.s as f64 * self.input_h as f64,
            aw,
            ah,
        )
    }
}

/// One grid spec per yolo layer, in cfg order.
pub fn grids_for(config: &NetworkConfig) -> Result<Vec<GridSpec>> {
    config
        .layers
        .iter()
        .filter_map(|l| match &l.spec {
            LayerSpec::Yolo(y) => Some((l, y)),
            _ => None,
        })
        .map(|(l, y)| {
            let (_, h, w) = l.out_shape;
            if h != w {
                return Err(Error::Shape(format!("non-square head {h}x{w}")));
            }
            Ok(GridSpec {
                s: h,
                anchors: y.masked_anchors(),
                classes: y.classes,
                input_w: config.net.width,
                input_h: config.net.height,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub objectness: f64,
    pub class_prob: f64,
    pub score: f64,
}

impl Detection {
    pub fn scored(&self) -> ScoredBox {
        ScoredBox {
            class_id: self.class_id,
            score: self.score,
            bbox: self.bbox,
        }
    }
}

/// What survives serialization: class, score and box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
}

/// Emits one candidate per (cell, anchor, class), `S*S*B*C` in total.
pub fn decode(head: &Tensor, grid: &GridSpec, img_w: u32, img_h: u32) -> Result<Vec<Detection>> {
    grid.check_head(head)?;
    if !head.all_finite() {
        return Err(Error::numeric("decode", "non-finite head value"));
    }
    let s = grid.s as f64;
    let (iw, ih) = (img_w as f64, img_h as f64);
    let (sx, sy) = (iw / grid.input_w as f64, ih / grid.input_h as f64);
    let mut out = Vec::with_capacity(grid.s * grid.s * grid.b() * grid.classes);
    for i in 0..grid.s {
        for j in 0..grid.s {
            for (k, &(aw, ah)) in grid.anchors.iter().enumerate() {
                let v = |f| head.data[grid.index(k, f, i, j)];
                let cx = (j as f64 + sigmoid(v(0))) / s * iw;
                let cy = (i as f64 + sigmoid(v(1))) / s * ih;
                let w = aw * v(2).exp() * sx;
                let h = ah * v(3).exp() * sy;
                let bbox = BBox::from_center(cx, cy, w, h);
                if bbox.validate().is_err() {
                    return Err(Error::numeric("decode", format!("box overflow at cell ({i},{j}) anchor {k}")));
                }
                let objectness = sigmoid(v(4));
                for c in 0..grid.classes {
                    let class_prob = sigmoid(v(5 + c));
                    out.push(Detection {
                        bbox,
                        class_id: c,
                        objectness,
                        class_prob,
                        score: objectness * class_prob,
                    });
                }
            }
        }
    }
    Ok(out)
}

pub fn filter_confidence(dets: Vec<Detection>, threshold: f64) -> Vec<Detection> {
    dets.into_iter().filter(|d| d.score >= threshold).collect()
}

/// Greedy class-wise suppression; output is in descending score order.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    // Stable sort keeps input order among equal scores.
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut kept: Vec<Detection> = Vec::new();
    for idx in order {
        let d = &dets[idx];
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou_raw(&k.bbox, &d.bbox) > iou_threshold);
        if !suppressed {
            kept.push(*d);
        }
    }
    kept
}

/// Forward, decode, filter and suppress for one image.
pub fn detect(
    network: &Network,
    grids: &[GridSpec],
    image: &Tensor,
    conf: f64,
    nms_iou: f64,
) -> Result<Vec<Detection>> {
    let heads = network.forward(image)?;
    let (w, h) = (image.width() as u32, image.height() as u32);
    let mut candidates = Vec::new();
    for (head, grid) in heads.iter().zip(grids) {
        candidates.extend(filter_confidence(decode(head, grid, w, h)?, conf));
    }
    Ok(nms(&candidates, nms_iou))
}

/// `class_id score x1 y1 x2 y2` per line, 6 significant digits.
pub fn write_detections<'a>(dets: impl IntoIterator<Item = &'a ScoredBox>) -> String {
    let mut s = String::new();
    for d in dets {
        let b = &d.bbox;
        let _ = writeln!(
            s,
            "{} {} {} {} {} {}",
            d.class_id,
            fmt_sig(d.score, 6),
            fmt_sig(b.x1, 6),
            fmt_sig(b.y1, 6),
            fmt_sig(b.x2, 6),
            fmt_sig(b.y2, 6)
        );
    }
    s
}

pub fn read_detections(text: &str) -> Result<Vec<ScoredBox>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let err = |msg: String| Error::Detections { line: i + 1, msg };
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        if toks.len() != 6 {
            return Err(err(format!("expected 6 fields, got {}", toks.len())));
        }
        let class_id: usize = toks[0]
            .parse()
            .map_err(|_| err(format!("bad class id '{}'", toks[0])))?;
        let nums = toks[1..]
            .iter()
            .map(|t| t.parse::<f64>().map_err(|_| err(format!("bad number '{t}'"))))
            .collect::<Result<Vec<_>>>()?;
        let bbox = BBox::new(nums[1], nums[2], nums[3], nums[4]).map_err(|e| err(e.to_string()))?;
        if !(0.0..=1.0).contains(&nums[0]) {
            return Err(err(format!("score {} outside [0,1]", nums[0])));
        }
        out.push(ScoredBox {
            class_id,
            score: nums[0],
            bbox,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(class_id: usize, score: f64, b: [f64; 4]) -> Detection {
        Detection {
            bbox: BBox::new(b[0], b[1], b[2], b[3]).unwrap(),
            class_id,
            objectness: score,
            class_prob: 1.0,
            score,
        }
    }

    fn grid13() -> GridSpec {
        GridSpec {
            s: 13,
            anchors: vec![(10.0, 10.0)],
            classes: 4,
            input_w: 416,
            input_h: 416,
        }
    }

    #[test]
    fn decode_zero_head() {
        let g = grid13();
        let head = Tensor::zeros((g.channels(), 13, 13));
        let dets = decode(&head, &g, 416, 416).unwrap();
        assert_eq!(dets.len(), 13 * 13 * 4);
        let d = &dets[0];
        let (cx, cy) = d.bbox.center();
        assert!((cx - 16.0).abs() < 1e-12 && (cy - 16.0).abs() < 1e-12);
        assert!((d.bbox.width() - 10.0).abs() < 1e-12);
        assert_eq!((d.objectness, d.class_prob), (0.5, 0.5));
        assert!(dets.iter().all(|d| d.score > 0.0 && d.score < 1.0));
    }

    #[test]
    fn decoded_centers_stay_in_cell() {
        let g = GridSpec {
            s: 4,
            anchors: vec![(3.0, 5.0), (8.0, 2.0)],
            classes: 4,
            input_w: 64,
            input_h: 64,
        };
        let data: Vec<f64> = (0..g.channels() * 16)
            .map(|i| ((i * 37 % 101) as f64 - 50.0) / 5.0)
            .collect();
        let head = Tensor::new((g.channels(), 4, 4), data).unwrap();
        let dets = decode(&head, &g, 64, 64).unwrap();
        for (n, d) in dets.iter().enumerate() {
            let cell = n / (g.b() * g.classes);
            let (i, j) = (cell / 4, cell % 4);
            let (cx, cy) = d.bbox.center();
            assert!(cx > j as f64 * 16.0 && cx < (j + 1) as f64 * 16.0);
            assert!(cy > i as f64 * 16.0 && cy < (i + 1) as f64 * 16.0);
        }
        let bad = Tensor::zeros((g.channels(), 3, 3));
        assert!(decode(&bad, &g, 64, 64).is_err());
    }

    #[test]
    fn confidence_filter() {
        let dets = vec![det(0, 0.2, [0.0, 0.0, 1.0, 1.0]), det(1, 0.7, [0.0, 0.0, 1.0, 1.0])];
        assert_eq!(filter_confidence(dets.clone(), 0.0).len(), 2);
        assert_eq!(filter_confidence(dets.clone(), 0.5).len(), 1);
        assert!(filter_confidence(dets, 1.0).is_empty());
    }

    #[test]
    fn nms_examples() {
        let a = det(0, 0.9, [0.0, 0.0, 10.0, 10.0]);
        assert_eq!(nms(&[a], 0.45), vec![a]);
        // 10x8 inside 10x10: IoU 0.8
        let b = det(0, 0.7, [0.0, 0.0, 10.0, 8.0]);
        assert!((iou_raw(&a.bbox, &b.bbox) - 0.8).abs() < 1e-12);
        assert_eq!(nms(&[b, a], 0.45), vec![a]);
        let c = det(1, 0.7, [0.0, 0.0, 10.0, 8.0]);
        assert_eq!(nms(&[a, c], 0.45), vec![a, c]);
    }

    #[test]
    fn detection_text_roundtrip() {
        let dets = [
            det(2, 0.912345678, [1.5, 2.25, 100.123456, 64.0]).scored(),
            det(0, 0.5, [0.0, 0.0, 1.0, 1.0]).scored(),
        ];
        let text = write_detections(&dets);
        assert_eq!(text.lines().next().unwrap(), "2 0.912346 1.5 2.25 100.123 64");
        let back = read_detections(&text).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1], dets[1]);
        assert!(read_detections("1 0.5 1 2 3").is_err());
        assert!(matches!(
            read_detections("0 0.5 0 0 1 1\n0 0.5 5 0 1 1"),
            Err(Error::Detections { line: 2, .. })
        ));
    }
}
