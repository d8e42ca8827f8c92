//! Detection loss: GIoU box term plus logistic objectness, no-object and
//! per-class terms, each mean-reduced.

use serde::{Deserialize, Serialize};

use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{giou, giou_gradient};
use crate::loss::assign::{decode_box, TargetAssignment};
use crate::postprocess::{sigmoid, GridSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub giou: f64,
    pub obj: f64,
    pub noobj: f64,
    pub cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            giou: 1.0,
            obj: 1.0,
            noobj: 1.0,
            cls: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub giou_term: f64,
    pub obj_term: f64,
    pub noobj_term: f64,
    pub cls_term: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    pub fn from_terms(giou: f64, obj: f64, noobj: f64, cls: f64, w: LossWeights) -> Self {
        LossBreakdown {
            giou_term: giou,
            obj_term: obj,
            noobj_term: noobj,
            cls_term: cls,
            total: w.giou * giou + w.obj * obj + w.noobj * noobj + w.cls * cls,
            weights: w,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.giou_term, self.obj_term, self.noobj_term, self.cls_term, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// `-ln(1 - sigmoid(z))`, computed without overflow.
#[inline]
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Unreduced term sums and the counts they are averaged over.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossSums {
    pub giou: f64,
    pub obj: f64,
    pub noobj: f64,
    pub cls: f64,
    pub positives: usize,
    pub negatives: usize,
}

impl LossSums {
    pub fn add(&mut self, o: &LossSums) {
        self.giou += o.giou;
        self.obj += o.obj;
        self.noobj += o.noobj;
        self.cls += o.cls;
        self.positives += o.positives;
        self.negatives += o.negatives;
    }

    pub fn breakdown(&self, w: LossWeights) -> LossBreakdown {
        let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
        LossBreakdown::from_terms(
            mean(self.giou, self.positives),
            mean(self.obj, self.positives),
            mean(self.noobj, self.negatives),
            mean(self.cls, self.positives),
            w,
        )
    }
}

fn check_inputs(heads: &[Tensor], grids: &[GridSpec], a: &TargetAssignment) -> Result<()> {
    if heads.len() != grids.len() || a.ignore.len() != grids.len() {
        return Err(Error::Shape(format!(
            "{} heads, {} grids, {} ignore masks",
            heads.len(),
            grids.len(),
            a.ignore.len()
        )));
    }
    for ((h, g), m) in heads.iter().zip(grids).zip(&a.ignore) {
        g.check_head(h)?;
        if m.len() != g.s * g.s * g.b() {
            return Err(Error::Shape("ignore mask does not match grid".into()));
        }
        if !h.all_finite() {
            return Err(Error::numeric("loss", "non-finite head value"));
        }
    }
    for p in &a.positives {
        let g = grids
            .get(p.head)
            .ok_or_else(|| Error::Shape(format!("positive on missing head {}", p.head)))?;
        if p.i >= g.s || p.j >= g.s || p.k >= g.b() || p.class_id >= g.classes {
            return Err(Error::Shape("positive outside its grid".into()));
        }
    }
    Ok(())
}

/// Term sums for one image and, when `grad_scale` is given, the gradient of
/// `sum_t w_t * sum_t / n_t` with respect to the raw heads, where the
/// `n_t` come from `grad_scale` (positive count, negative count).
pub fn loss_sums(
    heads: &[Tensor],
    assignment: &TargetAssignment,
    grids: &[GridSpec],
    weights: LossWeights,
    grad_scale: Option<(usize, usize)>,
) -> Result<(LossSums, Option<Vec<Tensor>>)> {
    check_inputs(heads, grids, assignment)?;
    let mut sums = LossSums {
        positives: assignment.positives.len(),
        negatives: assignment.negatives(),
        ..Default::default()
    };
    let mut grads: Option<Vec<Tensor>> =
        grad_scale.map(|_| heads.iter().map(|h| Tensor::zeros(h.shape)).collect());
    let inv = |n: usize| if n == 0 { 0.0 } else { 1.0 / n as f64 };
    let (pos_scale, neg_scale) = grad_scale
        .map(|(p, n)| (inv(p), inv(n)))
        .unwrap_or((0.0, 0.0));

    for (h, (head, g)) in heads.iter().zip(grids).enumerate() {
        let mask = &assignment.ignore[h];
        for i in 0..g.s {
            for j in 0..g.s {
                for k in 0..g.b() {
                    if mask[(i * g.s + j) * g.b() + k] {
                        continue;
                    }
                    let idx = g.index(k, 4, i, j);
                    let z = head.data[idx];
                    sums.noobj += softplus(z);
                    if let Some(gr) = grads.as_mut() {
                        gr[h].data[idx] += weights.noobj * neg_scale * sigmoid(z);
                    }
                }
            }
        }
    }

    for p in &assignment.positives {
        let g = &grids[p.head];
        let head = &heads[p.head];
        let at = |f: usize| g.index(p.k, f, p.i, p.j);
        let raw = [
            head.data[at(0)],
            head.data[at(1)],
            head.data[at(2)],
            head.data[at(3)],
        ];
        let pred = decode_box(g, p.i, p.j, p.k, raw);
        let r = giou(&pred, &p.target)?;
        sums.giou += 1.0 - r.giou;

        let zo = head.data[at(4)];
        sums.obj += softplus(-zo);
        for c in 0..g.classes {
            let z = head.data[at(5 + c)];
            sums.cls += if c == p.class_id { softplus(-z) } else { softplus(z) };
        }

        if let Some(gr) = grads.as_mut() {
            let gd = &mut gr[p.head].data;
            // d(1 - giou)/d corners, then through the decode.
            let dg = giou_gradient(&pred, &p.target)?;
            let s = g.s as f64;
            let bw = pred.width();
            let bh = pred.height();
            let sx = sigmoid(raw[0]);
            let sy = sigmoid(raw[1]);
            let dcx = sx * (1.0 - sx) * g.input_w as f64 / s;
            let dcy = sy * (1.0 - sy) * g.input_h as f64 / s;
            let c = -weights.giou * pos_scale;
            gd[at(0)] += c * (dg[0] + dg[2]) * dcx;
            gd[at(1)] += c * (dg[1] + dg[3]) * dcy;
            gd[at(2)] += c * (dg[2] - dg[0]) * 0.5 * bw;
            gd[at(3)] += c * (dg[3] - dg[1]) * 0.5 * bh;

            gd[at(4)] += weights.obj * pos_scale * (sigmoid(zo) - 1.0);
            for cl in 0..g.classes {
                let target = if cl == p.class_id { 1.0 } else { 0.0 };
                gd[at(5 + cl)] += weights.cls * pos_scale * (sigmoid(head.data[at(5 + cl)]) - target);
            }
        }
    }
    Ok((sums, grads))
}

pub fn yolo_loss(
    heads: &[Tensor],
    assignment: &TargetAssignment,
    grids: &[GridSpec],
    weights: LossWeights,
) -> Result<LossBreakdown> {
    Ok(loss_sums(heads, assignment, grids, weights, None)?
        .0
        .breakdown(weights))
}

/// Gradient of `yolo_loss(..).total` with respect to each raw head value.
pub fn yolo_loss_gradient(
    heads: &[Tensor],
    assignment: &TargetAssignment,
    grids: &[GridSpec],
    weights: LossWeights,
) -> Result<Vec<Tensor>> {
    let counts = (assignment.positives.len(), assignment.negatives());
    let (_, grads) = loss_sums(heads, assignment, grids, weights, Some(counts))?;
    Ok(grads.expect("requested"))
}
