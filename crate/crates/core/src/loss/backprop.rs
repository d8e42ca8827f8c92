//! Reverse-mode passes for the layer kinds the toy trainer supports.

use rayon::prelude::*;

use crate::engine::{gemm, im2col, ConvKernel, Network, Tensor, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::model::{Activation, LayerSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradient through leaky ReLU, given the activation's output.
pub fn leaky_backward(output: &Tensor, grad: &Tensor) -> Tensor {
    Tensor {
        shape: grad.shape,
        data: output
            .data
            .iter()
            .zip(&grad.data)
            .map(|(&y, &g)| if y > 0.0 { g } else { LEAKY_SLOPE * g })
            .collect(),
    }
}

/// Gradients of a convolution (before activation) with respect to its
/// input, weights and bias.
pub fn conv2d_backward(input: &Tensor, k: &ConvKernel, grad_out: &Tensor) -> Result<(Tensor, ConvGrad)> {
    let (oh, ow) = k.out_hw(input.height(), input.width())?;
    if grad_out.shape != (k.filters, oh, ow) || input.channels() != k.in_channels {
        return Err(Error::Shape(format!(
            "conv backward: grad {:?}, expected {:?}",
            grad_out.shape,
            (k.filters, oh, ow)
        )));
    }
    let plen = k.patch_len();
    let npos = oh * ow;
    let cols = im2col(input, k, oh, ow);

    let mut dw = vec![0.0; k.filters * plen];
    // dw[f][p] = sum_pos g[f][pos] * cols[pos][p]
    gemm(
        (k.filters, npos, plen),
        (&grad_out.data, npos, 1),
        (&cols, plen, 1),
        (&mut dw, plen, 1),
    );
    let db: Vec<f64> = (0..k.filters)
        .map(|f| grad_out.data[f * npos..(f + 1) * npos].iter().sum())
        .collect();
    let mut dcols = vec![0.0; npos * plen];
    // dcols[pos][p] = sum_f g[f][pos] * w[f][p]
    gemm(
        (npos, k.filters, plen),
        (&grad_out.data, 1, npos),
        (&k.weights, plen, 1),
        (&mut dcols, plen, 1),
    );

    let (c, h, w) = input.shape;
    let ksq = k.size * k.size;
    let mut dx = Tensor::zeros(input.shape);
    dx.data.par_chunks_mut(h * w).enumerate().for_each(|(ic, plane)| {
        for oy in 0..oh {
            for ox in 0..ow {
                let pos = oy * ow + ox;
                let base = pos * plen + ic * ksq;
                for ky in 0..k.size {
                    let iy = (oy * k.stride + ky) as isize - k.pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for kx in 0..k.size {
                        let ix = (ox * k.stride + kx) as isize - k.pad as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        plane[iy as usize * w + ix as usize] += dcols[base + ky * k.size + kx];
                    }
                }
            }
        }
    });
    debug_assert_eq!(dx.channels(), c);
    Ok((dx, ConvGrad { weights: dw, bias: db }))
}

pub fn upsample_backward(grad: &Tensor, factor: usize) -> Result<Tensor> {
    let (c, oh, ow) = grad.shape;
    if factor == 0 || oh % factor != 0 || ow % factor != 0 {
        return Err(Error::Shape(format!("cannot downsample {:?} by {factor}", grad.shape)));
    }
    let (h, w) = (oh / factor, ow / factor);
    let mut out = Tensor::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                out.data[(ch * h + y / factor) * w + x / factor] += grad.at(ch, y, x);
            }
        }
    }
    Ok(out)
}

/// Splits a concatenated gradient back into per-input gradients.
pub fn route_backward(grad: &Tensor, channels: &[usize]) -> Result<Vec<Tensor>> {
    if channels.iter().sum::<usize>() != grad.channels() {
        return Err(Error::Shape("route split does not match gradient".into()));
    }
    let plane = grad.height() * grad.width();
    let mut offset = 0;
    Ok(channels
        .iter()
        .map(|&c| {
            let t = Tensor {
                shape: (c, grad.height(), grad.width()),
                data: grad.data[offset * plane..(offset + c) * plane].to_vec(),
            };
            offset += c;
            t
        })
        .collect())
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

/// Backpropagates head gradients through the whole graph.
///
/// `outputs` are the per-layer outputs from [`Network::forward_all`] on
/// `input`. Returns one entry per layer, `Some` for convolutions.
pub fn network_backward(
    net: &Network,
    input: &Tensor,
    outputs: &[Tensor],
    head_grads: &[Tensor],
) -> Result<Vec<Option<ConvGrad>>> {
    let layers = &net.config.layers;
    let yolo = net.config.yolo_layers();
    if head_grads.len() != yolo.len() {
        return Err(Error::Shape(format!(
            "{} head gradients for {} heads",
            head_grads.len(),
            yolo.len()
        )));
    }
    let mut grads: Vec<Option<Tensor>> = vec![None; layers.len()];
    for (&li, g) in yolo.iter().zip(head_grads) {
        accumulate(&mut grads[li], g.clone());
    }
    let mut param_grads: Vec<Option<ConvGrad>> = vec![None; layers.len()];
    for i in (0..layers.len()).rev() {
        let Some(g) = grads[i].take() else { continue };
        let layer = &layers[i];
        match &layer.spec {
            LayerSpec::Convolutional(c) => {
                let k = net.kernels[i].as_ref().expect("conv kernel");
                let gz = if c.activation == Activation::Leaky {
                    leaky_backward(&outputs[i], &g)
                } else {
                    g
                };
                let x = if i == 0 { input } else { &outputs[i - 1] };
                let (dx, pg) = conv2d_backward(x, k, &gz)?;
                param_grads[i] = Some(pg);
                if i > 0 {
                    accumulate(&mut grads[i - 1], dx);
                }
            }
            LayerSpec::Shortcut { activation, .. } => {
                let gz = if *activation == Activation::Leaky {
                    leaky_backward(&outputs[i], &g)
                } else {
                    g
                };
                accumulate(&mut grads[layer.inputs[1]], gz.clone());
                accumulate(&mut grads[layer.inputs[0]], gz);
            }
            LayerSpec::Route { .. } => {
                let chans: Vec<usize> = layer.inputs.iter().map(|&j| layers[j].out_shape.0).collect();
                for (&j, part) in layer.inputs.iter().zip(route_backward(&g, &chans)?) {
                    accumulate(&mut grads[j], part);
                }
            }
            LayerSpec::Upsample { stride } => {
                let dx = upsample_backward(&g, *stride)?;
                if i > 0 {
                    accumulate(&mut grads[i - 1], dx);
                }
            }
            LayerSpec::Yolo(_) => {
                if i > 0 {
                    accumulate(&mut grads[i - 1], g);
                }
            }
        }
    }
    Ok(param_grads)
}
