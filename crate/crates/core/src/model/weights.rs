use crate::error::{Error, Result};
use crate::model::cfg::{LayerSpec, NetworkConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub scales: Vec<f32>,
    pub mean: Vec<f32>,
    pub variance: Vec<f32>,
}

/// Raw parameters of one convolutional layer, exactly as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    /// Per-filter bias; the batchnorm shift (beta) when `bn` is present.
    pub biases: Vec<f32>,
    pub bn: Option<BatchNorm>,
    /// Filter-major, then input channel, row, column.
    pub kernel: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WeightsHeader {
    pub major: i32,
    pub minor: i32,
    pub revision: i32,
    pub seen: u64,
}

impl WeightsHeader {
    pub const CURRENT: WeightsHeader = WeightsHeader {
        major: 0,
        minor: 2,
        revision: 0,
        seen: 0,
    };

    fn wide_seen(&self) -> bool {
        self.major * 10 + self.minor >= 2
    }

    fn byte_len(&self) -> usize {
        12 + if self.wide_seen() { 8 } else { 4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: NetworkConfig,
    pub header: WeightsHeader,
    /// One entry per layer; `Some` exactly for convolutional layers.
    pub convs: Vec<Option<ConvWeights>>,
}

impl Model {
    /// Model with every parameter zero except batchnorm scale and variance,
    /// which are one.
    pub fn zeroed(config: NetworkConfig) -> Self {
        let convs = config
            .layers
            .iter()
            .map(|layer| match &layer.spec {
                LayerSpec::Convolutional(c) => {
                    let n = c.filters;
                    Some(ConvWeights {
                        biases: vec![0.0; n],
                        bn: c.batch_normalize.then(|| BatchNorm {
                            scales: vec![1.0; n],
                            mean: vec![0.0; n],
                            variance: vec![1.0; n],
                        }),
                        kernel: vec![0.0; n * layer.in_shape.0 * c.size * c.size],
                    })
                }
                _ => None,
            })
            .collect();
        Model {
            config,
            header: WeightsHeader::CURRENT,
            convs,
        }
    }

    pub fn conv(&self, idx: usize) -> Option<&ConvWeights> {
        self.convs.get(idx).and_then(|c| c.as_ref())
    }

    /// Checks every array length against the shapes derived from the config.
    pub fn validate(&self) -> Result<()> {
        if self.convs.len() != self.config.layers.len() {
            return Err(Error::Shape(format!(
                "{} weight slots for {} layers",
                self.convs.len(),
                self.config.layers.len()
            )));
        }
        for (i, (layer, w)) in self.config.layers.iter().zip(&self.convs).enumerate() {
            match (&layer.spec, w) {
                (LayerSpec::Convolutional(c), Some(w)) => {
                    let k = c.filters * layer.in_shape.0 * c.size * c.size;
                    let bn_ok = match &w.bn {
                        Some(bn) => {
                            c.batch_normalize
                                && bn.scales.len() == c.filters
                                && bn.mean.len() == c.filters
                                && bn.variance.len() == c.filters
                        }
                        None => !c.batch_normalize,
                    };
                    if w.biases.len() != c.filters || w.kernel.len() != k || !bn_ok {
                        return Err(Error::Shape(format!("layer {i}: weight arrays do not match config")));
                    }
                }
                (LayerSpec::Convolutional(_), None) => {
                    return Err(Error::Shape(format!("layer {i}: missing conv weights")))
                }
                (_, Some(_)) => {
                    return Err(Error::Shape(format!("layer {i}: weights on a non-conv layer")))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let rest = self.buf.len() - self.pos;
        if rest < n {
            return Err(Error::WeightsTruncated {
                offset: self.pos,
                needed: n - rest,
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(4 * n)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn load_weights(config: &NetworkConfig, payload: &[u8]) -> Result<Model> {
    let mut r = Reader { buf: payload, pos: 0 };
    let (major, minor, revision) = (r.i32()?, r.i32()?, r.i32()?);
    if !(0..=1).contains(&major) || !(0..1000).contains(&minor) || !(0..1000).contains(&revision) {
        return Err(Error::WeightsVersion {
            major,
            minor,
            revision,
        });
    }
    let mut header = WeightsHeader {
        major,
        minor,
        revision,
        seen: 0,
    };
    header.seen = if header.wide_seen() {
        u64::from_le_bytes(r.take(8)?.try_into().unwrap())
    } else {
        r.i32()? as u32 as u64
    };

    let mut convs = Vec::with_capacity(config.layers.len());
    for layer in &config.layers {
        let LayerSpec::Convolutional(c) = &layer.spec else {
            convs.push(None);
            continue;
        };
        let n = c.filters;
        let biases = r.f32s(n)?;
        let bn = if c.batch_normalize {
            Some(BatchNorm {
                scales: r.f32s(n)?,
                mean: r.f32s(n)?,
                variance: r.f32s(n)?,
            })
        } else {
            None
        };
        let kernel = r.f32s(n * layer.in_shape.0 * c.size * c.size)?;
        convs.push(Some(ConvWeights { biases, bn, kernel }));
    }
    let trailing = payload.len() - r.pos;
    if trailing > 0 {
        return Err(Error::WeightsTrailing(trailing));
    }
    Ok(Model {
        config: config.clone(),
        header,
        convs,
    })
}

pub fn save_weights(model: &Model) -> Vec<u8> {
    let h = &model.header;
    let mut out = Vec::with_capacity(h.byte_len() + 4 * model.config.param_count());
    out.extend_from_slice(&h.major.to_le_bytes());
    out.extend_from_slice(&h.minor.to_le_bytes());
    out.extend_from_slice(&h.revision.to_le_bytes());
    if h.wide_seen() {
        out.extend_from_slice(&h.seen.to_le_bytes());
    } else {
        out.extend_from_slice(&(h.seen as u32).to_le_bytes());
    }
    let mut put = |vals: &[f32]| {
        for v in vals {
            out.extend_from_slice(&v.to_le_bytes());
        }
    };
    for w in model.convs.iter().flatten() {
        put(&w.biases);
        if let Some(bn) = &w.bn {
            put(&bn.scales);
            put(&bn.mean);
            put(&bn.variance);
        }
        put(&w.kernel);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::cfg::parse_cfg;

    fn cfg() -> NetworkConfig {
        parse_cfg(
            "[net]\nwidth=8\nheight=8\nchannels=1\n\
             [convolutional]\nbatch_normalize=1\nfilters=2\nsize=3\npad=1\nactivation=leaky\n\
             [convolutional]\nfilters=9\nsize=1\n\
             [yolo]\nmask=0\nanchors=2,2\nclasses=4\n",
        )
        .unwrap()
    }

    fn payload(cfg: &NetworkConfig, extra_words: usize) -> Vec<u8> {
        let mut out = Vec::new();
        for v in [0i32, 2, 0] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&12345u64.to_le_bytes());
        for i in 0..cfg.param_count() + extra_words {
            out.extend_from_slice(&(i as f32 * 0.25 - 3.0).to_le_bytes());
        }
        out
    }

    #[test]
    fn exact_length_roundtrips() {
        let c = cfg();
        assert_eq!(c.param_count(), 2 * 9 + 8 + 9 * 2 + 9);
        let bytes = payload(&c, 0);
        let m = load_weights(&c, &bytes).unwrap();
        m.validate().unwrap();
        assert_eq!(m.header.seen, 12345);
        assert_eq!(m.conv(0).unwrap().biases, vec![-3.0, -2.75]);
        assert_eq!(save_weights(&m), bytes);
    }

    #[test]
    fn trailing_and_truncated() {
        let c = cfg();
        assert!(matches!(
            load_weights(&c, &payload(&c, 1)),
            Err(Error::WeightsTrailing(4))
        ));
        let mut short = payload(&c, 0);
        short.pop();
        assert!(matches!(
            load_weights(&c, &short),
            Err(Error::WeightsTruncated { needed: 1, .. })
        ));
    }

    #[test]
    fn narrow_seen_and_bad_version() {
        let c = cfg();
        let mut bytes = Vec::new();
        for v in [0i32, 1, 0, 7] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend(std::iter::repeat(0u8).take(4 * c.param_count()));
        let m = load_weights(&c, &bytes).unwrap();
        assert_eq!(m.header.seen, 7);
        assert_eq!(save_weights(&m), bytes);

        bytes[0] = 9;
        assert!(matches!(
            load_weights(&c, &bytes),
            Err(Error::WeightsVersion { major: 9, .. })
        ));
    }
}
