use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::data::Annotation;
use crate::engine::{Network, Tensor};
use crate::error::{Error, Result};
use crate::fmtnum::fmt_sig;
use crate::loss::adam::{adam_step, AdamConfig, OptimizerState};
use crate::loss::assign::{assign_targets, TargetAssignment};
use crate::loss::backprop::{network_backward, ConvGrad};
use crate::loss::yolo::{loss_sums, LossBreakdown, LossSums, LossWeights};
use crate::model::{Activation, ConvWeights, LayerSpec, Model, NetworkConfig};
use crate::postprocess::{grids_for, GridSpec};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainHyperparams {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub ignore_iou: f64,
}

impl Default for TrainHyperparams {
    fn default() -> Self {
        TrainHyperparams {
            epochs: 48,
            batch_size: 32,
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            ignore_iou: 0.5,
        }
    }
}

impl TrainHyperparams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.epochs > 0
            && self.batch_size > 0
            && self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.ignore_iou > 0.0
            && self.ignore_iou <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("bad hyperparameters: {self:?}")))
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    /// Network-input-sized image tensor.
    pub image: Tensor,
    pub annotations: Vec<Annotation>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: Model,
    pub initial: Model,
    pub history: Vec<LossBreakdown>,
}

/// Weight scale for a conv that feeds a yolo layer directly; an untrained
/// head then predicts the anchor priors.
pub const HEAD_INIT_STD: f64 = 0.01;

/// Seeded fan-in initialisation, zero biases. Values are rounded through f32
/// so that the stored model is exactly what was trained.
pub fn init_model(config: &NetworkConfig, seed: u64) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::zeroed(config.clone());
    let heads = config.yolo_layers();
    for (li, (layer, slot)) in config.layers.iter().zip(model.convs.iter_mut()).enumerate() {
        let LayerSpec::Convolutional(c) = &layer.spec else { continue };
        if c.batch_normalize {
            return Err(Error::InvalidInput(
                "toy training does not support batch_normalize layers".into(),
            ));
        }
        let fan_in = (layer.in_shape.0 * c.size * c.size) as f64;
        let gain = match c.activation {
            Activation::Leaky => 2.0f64.sqrt(),
            Activation::Linear => 1.0,
        };
        let std_dev = if heads.contains(&(li + 1)) {
            HEAD_INIT_STD
        } else {
            gain / fan_in.sqrt()
        };
        let normal = Normal::new(0.0, std_dev)
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        let w = slot.as_mut().expect("conv slot");
        w.kernel.iter_mut().for_each(|v| *v = normal.sample(&mut rng) as f32);
    }
    Ok(model)
}

fn to_model(net: &Network, header_src: &Model) -> Model {
    let mut model = header_src.clone();
    for (slot, k) in model.convs.iter_mut().zip(&net.kernels) {
        if let (Some(w), Some(k)) = (slot.as_mut(), k) {
            *w = ConvWeights {
                biases: k.bias.iter().map(|&v| v as f32).collect(),
                bn: None,
                kernel: k.weights.iter().map(|&v| v as f32).collect(),
            };
        }
    }
    model
}

struct SampleResult {
    sums: LossSums,
    grads: Vec<Option<ConvGrad>>,
}

fn sample_pass(
    net: &Network,
    grids: &[GridSpec],
    sample: &TrainSample,
    assignment: &TargetAssignment,
    weights: LossWeights,
    counts: (usize, usize),
) -> Result<SampleResult> {
    let outputs = net.forward_all(&sample.image)?;
    let heads: Vec<Tensor> = net
        .config
        .yolo_layers()
        .into_iter()
        .map(|i| outputs[i].clone())
        .collect();
    let (sums, head_grads) = loss_sums(&heads, assignment, grids, weights, Some(counts))?;
    let grads = network_backward(net, &sample.image, &outputs, &head_grads.expect("requested"))?;
    Ok(SampleResult { sums, grads })
}

/// Trains a small batchnorm-free network with Adam on the given samples.
///
/// Gradients are reduced over each batch in sample order so results do not
/// depend on thread scheduling. The history holds one epoch-mean breakdown
/// per epoch (mean over that epoch's batches).
pub fn train_toy(
    samples: &[TrainSample],
    config: &NetworkConfig,
    hp: &TrainHyperparams,
    loss_weights: LossWeights,
    seed: u64,
) -> Result<TrainOutput> {
    hp.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidInput("no training samples".into()));
    }
    let grids = grids_for(config)?;
    if grids.is_empty() {
        return Err(Error::InvalidInput("config has no yolo layer".into()));
    }
    for (n, s) in samples.iter().enumerate() {
        if s.image.shape != config.input_shape() {
            return Err(Error::Shape(format!(
                "sample {n}: image {:?}, network expects {:?}",
                s.image.shape,
                config.input_shape()
            )));
        }
        if let Some(a) = s.annotations.iter().find(|a| a.class_id >= grids[0].classes) {
            return Err(Error::UnknownClass(a.class_id));
        }
    }

    let initial = init_model(config, seed)?;
    let mut net = Network::from_model(&initial)?;
    let assignments: Vec<TargetAssignment> = samples
        .iter()
        .map(|s| assign_targets(&s.annotations, &grids, hp.ignore_iou))
        .collect();

    let conv_layers: Vec<usize> = (0..net.kernels.len())
        .filter(|&i| net.kernels[i].is_some())
        .collect();
    let shapes = conv_layers.iter().flat_map(|&i| {
        let k = net.kernels[i].as_ref().expect("conv");
        [k.weights.len(), k.bias.len()]
    });
    let mut opt = OptimizerState::new(shapes.collect::<Vec<_>>());
    let adam = hp.adam();

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_7a11_u64);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(hp.epochs);

    for epoch in 0..hp.epochs {
        order.shuffle(&mut rng);
        let mut epoch_terms = [0.0f64; 5];
        let mut batches = 0usize;
        for (b, batch) in order.chunks(hp.batch_size).enumerate() {
            let counts = batch.iter().fold((0, 0), |(p, n), &s| {
                (p + assignments[s].positives.len(), n + assignments[s].negatives())
            });
            let results: Vec<Result<SampleResult>> = batch
                .par_iter()
                .map(|&s| sample_pass(&net, &grids, &samples[s], &assignments[s], loss_weights, counts))
                .collect();
            let mut sums = LossSums::default();
            let mut acc: Vec<Option<ConvGrad>> = vec![None; net.kernels.len()];
            for r in results {
                let r = r.map_err(|e| {
                    if e.is_numeric_fault() {
                        Error::numeric(format!("epoch {} batch {}", epoch + 1, b + 1), e.to_string())
                    } else {
                        e
                    }
                })?;
                sums.add(&r.sums);
                for (a, g) in acc.iter_mut().zip(r.grads) {
                    match (a.as_mut(), g) {
                        (Some(a), Some(g)) => {
                            a.weights.iter_mut().zip(&g.weights).for_each(|(x, y)| *x += y);
                            a.bias.iter_mut().zip(&g.bias).for_each(|(x, y)| *x += y);
                        }
                        (None, Some(g)) => *a = Some(g),
                        _ => {}
                    }
                }
            }
            let bd = sums.breakdown(loss_weights);
            if !bd.is_finite() {
                return Err(Error::numeric(
                    format!("epoch {} batch {}", epoch + 1, b + 1),
                    format!("non-finite loss {bd:?}"),
                ));
            }
            for (t, v) in epoch_terms
                .iter_mut()
                .zip([bd.giou_term, bd.obj_term, bd.noobj_term, bd.cls_term, bd.total])
            {
                *t += v;
            }
            batches += 1;

            let zero: Vec<ConvGrad> = conv_layers
                .iter()
                .map(|&i| {
                    acc[i].take().unwrap_or_else(|| {
                        let k = net.kernels[i].as_ref().expect("conv");
                        ConvGrad {
                            weights: vec![0.0; k.weights.len()],
                            bias: vec![0.0; k.bias.len()],
                        }
                    })
                })
                .collect();
            let grads: Vec<&[f64]> = zero
                .iter()
                .flat_map(|g| [&g.weights[..], &g.bias[..]])
                .collect();
            let mut params: Vec<&mut [f64]> = net
                .kernels
                .iter_mut()
                .flatten()
                .flat_map(|k| [&mut k.weights[..], &mut k.bias[..]])
                .collect();
            adam_step(&mut params, &grads, &mut opt, &adam)?;
        }
        let n = batches as f64;
        let mean = LossBreakdown {
            giou_term: epoch_terms[0] / n,
            obj_term: epoch_terms[1] / n,
            noobj_term: epoch_terms[2] / n,
            cls_term: epoch_terms[3] / n,
            total: epoch_terms[4] / n,
            weights: loss_weights,
        };
        log::info!("epoch {} loss {:.5}", epoch + 1, mean.total);
        history.push(mean);
    }

    let mut model = to_model(&net, &initial);
    model.header.seen = (hp.epochs * samples.len()) as u64;
    Ok(TrainOutput {
        model,
        initial,
        history,
    })
}

pub const HISTORY_HEADER: &str = "epoch,giou_term,obj_term,noobj_term,cls_term,total";

pub fn history_csv(history: &[LossBreakdown]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for (e, h) in history.iter().enumerate() {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e + 1,
            fmt_sig(h.giou_term, 8),
            fmt_sig(h.obj_term, 8),
            fmt_sig(h.noobj_term, 8),
            fmt_sig(h.cls_term, 8),
            fmt_sig(h.total, 8)
        ));
    }
    s
}
