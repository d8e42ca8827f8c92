//! Detection matching and the precision / recall / AP / F1 suite.

use serde_json::{json, Map, Value};

use crate::data::ClassSchema;
use crate::error::{Error, Result};
use crate::geometry::{iou_raw, BBox};
use crate::postprocess::ScoredBox;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub class_id: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedDet {
    pub image: usize,
    /// Index within the image's detection list.
    pub det: usize,
    pub class_id: usize,
    pub score: f64,
    pub tp: bool,
    pub gt: Option<usize>,
    /// IoU with the best candidate GT (0 when there was none).
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// All detections, by descending score; ties keep (image, det) order.
    pub dets: Vec<MatchedDet>,
    /// Ground-truth count per class id.
    pub n_gt: Vec<usize>,
}

impl MatchResult {
    /// TP/FP flags of one class in score order.
    pub fn flags(&self, class_id: usize) -> Vec<bool> {
        self.dets
            .iter()
            .filter(|d| d.class_id == class_id)
            .map(|d| d.tp)
            .collect()
    }
}

/// Greedy matching in descending score order, class-wise and per image.
pub fn match_detections(dets: &[Vec<ScoredBox>], gts: &[Vec<GtBox>], iou_threshold: f64) -> MatchResult {
    let max_class = dets
        .iter()
        .flatten()
        .map(|d| d.class_id)
        .chain(gts.iter().flatten().map(|g| g.class_id))
        .max();
    let mut n_gt = vec![0usize; max_class.map_or(0, |c| c + 1)];
    for g in gts.iter().flatten() {
        n_gt[g.class_id] += 1;
    }

    let mut order: Vec<(usize, usize)> = dets
        .iter()
        .enumerate()
        .flat_map(|(im, ds)| (0..ds.len()).map(move |d| (im, d)))
        .collect();
    order.sort_by(|a, b| dets[b.0][b.1].score.total_cmp(&dets[a.0][a.1].score));

    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let empty: Vec<GtBox> = Vec::new();
    let out = order
        .into_iter()
        .map(|(im, di)| {
            let d = &dets[im][di];
            let image_gts = gts.get(im).unwrap_or(&empty);
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in image_gts.iter().enumerate() {
                if g.class_id != d.class_id || used[im][gi] {
                    continue;
                }
                let v = iou_raw(&d.bbox, &g.bbox);
                if best.map_or(true, |(_, b)| v > b) {
                    best = Some((gi, v));
                }
            }
            let (gt, iou, tp) = match best {
                Some((gi, v)) if v >= iou_threshold => {
                    used[im][gi] = true;
                    (Some(gi), v, true)
                }
                Some((_, v)) => (None, v, false),
                None => (None, 0.0, false),
            };
            MatchedDet {
                image: im,
                det: di,
                class_id: d.class_id,
                score: d.score,
                tp,
                gt,
                iou,
            }
        })
        .collect();
    MatchResult { dets: out, n_gt }
}

/// All-point interpolated area under the precision-recall curve.
pub fn average_precision(flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(flags.len());
    for (i, &f) in flags.iter().enumerate() {
        tp += f as usize;
        points.push((tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64));
    }
    // Envelope: best precision at this recall or beyond.
    for i in (0..points.len().saturating_sub(1)).rev() {
        points[i].1 = points[i].1.max(points[i + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for &(r, p) in &points {
        if r > prev_r {
            ap += (r - prev_r) * p;
            prev_r = r;
        }
    }
    ap
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub ap: f64,
    pub f1: f64,
    pub n_gt: usize,
    pub n_det: usize,
    pub tp: usize,
}

impl ClassMetrics {
    fn from_counts(tp: usize, n_det: usize, n_gt: usize, ap: f64) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, n_det);
        let recall = ratio(tp, n_gt);
        ClassMetrics {
            precision,
            recall,
            ap,
            f1: f1(precision, recall),
            n_gt,
            n_det,
            tp,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverallMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub map: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub per_class: Vec<ClassMetrics>,
    pub overall: OverallMetrics,
    pub mean_matched_iou: f64,
    /// Classes with detections but no ground truth; their AP is 0.
    pub no_ground_truth: Vec<usize>,
}

pub fn evaluate(
    preds: &[Vec<ScoredBox>],
    gts: &[Vec<GtBox>],
    schema: &ClassSchema,
    iou_threshold: f64,
) -> Result<EvalReport> {
    if preds.len() != gts.len() {
        return Err(Error::InvalidInput(format!(
            "{} prediction sets for {} images",
            preds.len(),
            gts.len()
        )));
    }
    let nc = schema.len();
    if let Some(c) = preds
        .iter()
        .flatten()
        .map(|d| d.class_id)
        .chain(gts.iter().flatten().map(|g| g.class_id))
        .find(|&c| c >= nc)
    {
        return Err(Error::UnknownClass(c));
    }
    let m = match_detections(preds, gts, iou_threshold);
    let n_gt = |c: usize| m.n_gt.get(c).copied().unwrap_or(0);

    let per_class: Vec<ClassMetrics> = (0..nc)
        .map(|c| {
            let flags = m.flags(c);
            let tp = flags.iter().filter(|&&f| f).count();
            ClassMetrics::from_counts(tp, flags.len(), n_gt(c), average_precision(&flags, n_gt(c)))
        })
        .collect();
    let no_ground_truth: Vec<usize> = (0..nc)
        .filter(|&c| n_gt(c) == 0 && per_class[c].n_det > 0)
        .collect();

    // Classes with neither ground truth nor detections carry no information.
    let active: Vec<&ClassMetrics> = per_class.iter().filter(|c| c.n_gt > 0 || c.n_det > 0).collect();
    let mean = |f: fn(&ClassMetrics) -> f64| {
        if active.is_empty() {
            0.0
        } else {
            active.iter().map(|c| f(c)).sum::<f64>() / active.len() as f64
        }
    };
    let tp: usize = per_class.iter().map(|c| c.tp).sum();
    let nd: usize = per_class.iter().map(|c| c.n_det).sum();
    let ng: usize = per_class.iter().map(|c| c.n_gt).sum();
    let micro = ClassMetrics::from_counts(tp, nd, ng, 0.0);
    let overall = OverallMetrics {
        precision: micro.precision,
        recall: micro.recall,
        f1: micro.f1,
        map: mean(|c| c.ap),
        macro_precision: mean(|c| c.precision),
        macro_recall: mean(|c| c.recall),
        macro_f1: mean(|c| c.f1),
    };
    let ious: Vec<f64> = m.dets.iter().filter(|d| d.tp).map(|d| d.iou).collect();
    let mean_matched_iou = if ious.is_empty() {
        0.0
    } else {
        ious.iter().sum::<f64>() / ious.len() as f64
    };
    Ok(EvalReport {
        class_names: schema.names().to_vec(),
        per_class,
        overall,
        mean_matched_iou,
        no_ground_truth,
    })
}

fn r3(v: f64) -> Value {
    json!((v * 1000.0).round() / 1000.0)
}

impl EvalReport {
    pub fn to_json(&self) -> Value {
        let mut classes = Map::new();
        for (c, (name, m)) in self.class_names.iter().zip(&self.per_class).enumerate() {
            let mut o = Map::new();
            o.insert("precision".into(), r3(m.precision));
            o.insert("recall".into(), r3(m.recall));
            o.insert("ap".into(), r3(m.ap));
            o.insert("f1".into(), r3(m.f1));
            o.insert("n_gt".into(), json!(m.n_gt));
            o.insert("n_det".into(), json!(m.n_det));
            o.insert("tp".into(), json!(m.tp));
            o.insert("no_ground_truth".into(), json!(self.no_ground_truth.contains(&c)));
            classes.insert(name.clone(), Value::Object(o));
        }
        let o = &self.overall;
        let mut overall = Map::new();
        overall.insert("precision".into(), r3(o.precision));
        overall.insert("recall".into(), r3(o.recall));
        overall.insert("map".into(), r3(o.map));
        overall.insert("f1".into(), r3(o.f1));
        overall.insert("macro_precision".into(), r3(o.macro_precision));
        overall.insert("macro_recall".into(), r3(o.macro_recall));
        overall.insert("macro_f1".into(), r3(o.macro_f1));
        let mut root = Map::new();
        root.insert("classes".into(), Value::Object(classes));
        root.insert("overall".into(), Value::Object(overall));
        root.insert("mean_matched_iou".into(), r3(self.mean_matched_iou));
        Value::Object(root)
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_json()).expect("json values serialize");
        s.push('\n');
        s
    }
}
