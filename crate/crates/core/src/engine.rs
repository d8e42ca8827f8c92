//! Deterministic CPU forward pass.
//!
//! Convolutions gather input patches into a column matrix and reduce each
//! output value over (input channel, kernel row, kernel column) in that
//! fixed order, so results do not depend on how work is split across
//! threads.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{Activation, LayerSpec, Model, NetworkConfig, Shape};

pub const LEAKY_SLOPE: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Shape,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.0 * shape.1 * shape.2 {
            return Err(Error::Shape(format!(
                "{} values for shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.0 * shape.1 * shape.2],
        }
    }

    pub fn channels(&self) -> usize {
        self.shape.0
    }

    pub fn height(&self) -> usize {
        self.shape.1
    }

    pub fn width(&self) -> usize {
        self.shape.2
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.shape.1 + y) * self.shape.2 + x]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Convolution parameters in compute precision, batchnorm already folded.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    pub filters: usize,
    pub in_channels: usize,
    pub size: usize,
    pub stride: usize,
    pub pad: usize,
    pub activation: Activation,
    /// Filter-major, then input channel, row, column.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvKernel {
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.size * self.size
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if h + 2 * self.pad < self.size || w + 2 * self.pad < self.size || self.stride == 0 {
            return Err(Error::Shape(format!(
                "kernel {} stride {} does not fit {h}x{w} with pad {}",
                self.size, self.stride, self.pad
            )));
        }
        Ok((
            (h + 2 * self.pad - self.size) / self.stride + 1,
            (w + 2 * self.pad - self.size) / self.stride + 1,
        ))
    }
}

#[inline]
pub fn leaky(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        LEAKY_SLOPE * v
    }
}

pub fn activate(act: Activation, v: f64) -> f64 {
    match act {
        Activation::Linear => v,
        Activation::Leaky => leaky(v),
    }
}

/// Patch matrix: one row of `patch_len` values per output position, zero
/// where the kernel overhangs the input.
pub(crate) fn im2col(input: &Tensor, k: &ConvKernel, oh: usize, ow: usize) -> Vec<f64> {
    let (c, h, w) = input.shape;
    let plen = k.patch_len();
    let mut cols = vec![0.0; oh * ow * plen];
    cols.par_chunks_mut(ow * plen)
        .enumerate()
        .for_each(|(oy, row)| {
            for ox in 0..ow {
                let patch = &mut row[ox * plen..(ox + 1) * plen];
                let mut p = 0;
                for ic in 0..c {
                    for ky in 0..k.size {
                        let iy = (oy * k.stride + ky) as isize - k.pad as isize;
                        for kx in 0..k.size {
                            let ix = (ox * k.stride + kx) as isize - k.pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                patch[p] = input.data[(ic * h + iy as usize) * w + ix as usize];
                            }
                            p += 1;
                        }
                    }
                }
            }
        });
    cols
}

/// Pre-activation convolution output (bias included).
pub(crate) fn conv2d_linear(input: &Tensor, k: &ConvKernel) -> Result<Tensor> {
    if input.channels() != k.in_channels {
        return Err(Error::Shape(format!(
            "conv expects {} input channels, got {}",
            k.in_channels,
            input.channels()
        )));
    }
    if k.weights.len() != k.filters * k.patch_len() || k.bias.len() != k.filters {
        return Err(Error::Shape("conv weight arrays do not match kernel shape".into()));
    }
    let (oh, ow) = k.out_hw(input.height(), input.width())?;
    let cols = im2col(input, k, oh, ow);
    let plen = k.patch_len();
    let npos = oh * ow;
    let mut out = Tensor::zeros((k.filters, oh, ow));
    // out[f][pos] = sum_p w[f][p] * cols[pos][p]
    gemm(
        (k.filters, plen, npos),
        (&k.weights, plen, 1),
        (&cols, 1, plen),
        (&mut out.data, npos, 1),
    );
    for (plane, b) in out.data.chunks_mut(npos).zip(&k.bias) {
        plane.iter_mut().for_each(|v| *v += b);
    }
    Ok(out)
}

/// `c = a * b` for an `m x k` by `k x n` product with explicit row and
/// column strides.
pub(crate) fn gemm(
    (m, k, n): (usize, usize, usize),
    (a, rsa, csa): (&[f64], usize, usize),
    (b, rsb, csb): (&[f64], usize, usize),
    (c, rsc, csc): (&mut [f64], usize, usize),
) {
    let last = |r: usize, cc: usize, rs: usize, cs: usize| {
        if r == 0 || cc == 0 {
            0
        } else {
            (r - 1) * rs + (cc - 1) * cs + 1
        }
    };
    assert!(a.len() >= last(m, k, rsa, csa));
    assert!(b.len() >= last(k, n, rsb, csb));
    assert!(c.len() >= last(m, n, rsc, csc));
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: every index the kernel touches lies within the bounds asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

pub fn conv2d(input: &Tensor, k: &ConvKernel) -> Result<Tensor> {
    let mut out = conv2d_linear(input, k)?;
    if k.activation == Activation::Leaky {
        out.data.iter_mut().for_each(|v| *v = leaky(*v));
    }
    Ok(out)
}

pub fn upsample_nearest(input: &Tensor, factor: usize) -> Result<Tensor> {
    if factor < 1 {
        return Err(Error::InvalidInput("upsample factor must be at least 1".into()));
    }
    let (c, h, w) = input.shape;
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Tensor::zeros((c, oh, ow));
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                out.data[(ch * oh + y) * ow + x] = input.at(ch, y / factor, x / factor);
            }
        }
    }
    Ok(out)
}

pub fn shortcut_add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(Error::Shape(format!(
            "shortcut of {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    Ok(Tensor {
        shape: a.shape,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    })
}

pub fn route_concat(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::InvalidInput("route needs at least one input".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut channels = 0;
    let mut data = Vec::new();
    for t in inputs {
        if (t.height(), t.width()) != (h, w) {
            return Err(Error::Shape(format!(
                "route inputs {h}x{w} and {}x{}",
                t.height(),
                t.width()
            )));
        }
        channels += t.channels();
        data.extend_from_slice(&t.data);
    }
    Ok(Tensor {
        shape: (channels, h, w),
        data,
    })
}

/// Inference-ready network: the parsed graph plus fused conv kernels.
#[derive(Debug, Clone)]
pub struct Network {
    pub config: NetworkConfig,
    pub kernels: Vec<Option<ConvKernel>>,
}

impl Network {
    /// Folds batchnorm into conv weights and widens to compute precision.
    pub fn from_model(model: &Model) -> Result<Self> {
        model.validate()?;
        let kernels = model
            .config
            .layers
            .iter()
            .zip(&model.convs)
            .map(|(layer, w)| {
                let (LayerSpec::Convolutional(c), Some(w)) = (&layer.spec, w) else {
                    return None;
                };
                let plen = layer.in_shape.0 * c.size * c.size;
                let mut weights: Vec<f64> = w.kernel.iter().map(|&v| v as f64).collect();
                let mut bias: Vec<f64> = w.biases.iter().map(|&v| v as f64).collect();
                if let Some(bn) = &w.bn {
                    for f in 0..c.filters {
                        let scale =
                            bn.scales[f] as f64 / (bn.variance[f] as f64 + BN_EPSILON).sqrt();
                        weights[f * plen..(f + 1) * plen]
                            .iter_mut()
                            .for_each(|v| *v *= scale);
                        bias[f] -= bn.mean[f] as f64 * scale;
                    }
                }
                Some(ConvKernel {
                    filters: c.filters,
                    in_channels: layer.in_shape.0,
                    size: c.size,
                    stride: c.stride,
                    pad: c.padding(),
                    activation: c.activation,
                    weights,
                    bias,
                })
            })
            .collect();
        Ok(Network {
            config: model.config.clone(),
            kernels,
        })
    }

    /// Evaluates every layer, returning all layer outputs in order.
    pub fn forward_all(&self, input: &Tensor) -> Result<Vec<Tensor>> {
        if input.shape != self.config.input_shape() {
            return Err(Error::Shape(format!(
                "input {:?} but network expects {:?}",
                input.shape,
                self.config.input_shape()
            )));
        }
        let mut outs: Vec<Tensor> = Vec::with_capacity(self.config.layers.len());
        for (i, layer) in self.config.layers.iter().enumerate() {
            let prev = if i == 0 { input } else { &outs[i - 1] };
            let out = match &layer.spec {
                LayerSpec::Convolutional(_) => {
                    conv2d(prev, self.kernels[i].as_ref().expect("validated"))?
                }
                LayerSpec::Shortcut { activation, .. } => {
                    let mut t = shortcut_add(prev, &outs[layer.inputs[1]])?;
                    if *activation == Activation::Leaky {
                        t.data.iter_mut().for_each(|v| *v = leaky(*v));
                    }
                    t
                }
                LayerSpec::Route { .. } => {
                    let ins: Vec<&Tensor> = layer.inputs.iter().map(|&j| &outs[j]).collect();
                    route_concat(&ins)?
                }
                LayerSpec::Upsample { stride } => upsample_nearest(prev, *stride)?,
                LayerSpec::Yolo(_) => prev.clone(),
            };
            if !out.all_finite() {
                return Err(Error::numeric(
                    format!("layer {i} ({})", layer.spec.kind()),
                    "non-finite activation",
                ));
            }
            outs.push(out);
        }
        Ok(outs)
    }

    /// Raw head tensors, one per yolo layer in cfg order.
    pub fn forward(&self, input: &Tensor) -> Result<Vec<Tensor>> {
        let mut outs = self.forward_all(input)?;
        Ok(self
            .config
            .yolo_layers()
            .into_iter()
            .map(|i| std::mem::replace(&mut outs[i], Tensor::zeros((0, 0, 0))))
            .collect())
    }
}

pub fn forward(model: &Model, input: &Tensor) -> Result<Vec<Tensor>> {
    Network::from_model(model)?.forward(input)
}
