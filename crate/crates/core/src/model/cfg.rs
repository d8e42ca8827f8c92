use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Leaky,
}

impl Activation {
    fn parse(s: &str, line: usize) -> Result<Self> {
        match s {
            "linear" => Ok(Activation::Linear),
            "leaky" => Ok(Activation::Leaky),
            other => Err(cfg_err(line, format!("unsupported activation '{other}'"))),
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Activation::Linear => "linear",
            Activation::Leaky => "leaky",
        }
    }
}

/// (channels, height, width)
pub type Shape = (usize, usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct NetSpec {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Darknet training keys that are accepted and carried through
    /// unchanged but not interpreted.
    pub hints: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    pub batch_normalize: bool,
    pub filters: usize,
    pub size: usize,
    pub stride: usize,
    pub pad: bool,
    pub activation: Activation,
}

impl ConvSpec {
    pub fn padding(&self) -> usize {
        if self.pad {
            self.size / 2
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct YoloSpec {
    pub mask: Vec<usize>,
    pub anchors: Vec<(f64, f64)>,
    pub classes: usize,
    pub hints: Vec<(String, String)>,
}

impl YoloSpec {
    pub fn masked_anchors(&self) -> Vec<(f64, f64)> {
        self.mask.iter().map(|&m| self.anchors[m]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Convolutional(ConvSpec),
    Shortcut { from: i64, activation: Activation },
    Route { layers: Vec<i64> },
    Upsample { stride: usize },
    Yolo(YoloSpec),
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Convolutional(_) => "convolutional",
            LayerSpec::Shortcut { .. } => "shortcut",
            LayerSpec::Route { .. } => "route",
            LayerSpec::Upsample { .. } => "upsample",
            LayerSpec::Yolo(_) => "yolo",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    /// Absolute indices of the layers feeding this one.
    pub inputs: Vec<usize>,
    pub in_shape: Shape,
    pub out_shape: Shape,
}

#[derive(Debug, Clone)]
pub struct NetworkConfig {
    pub net: NetSpec,
    pub layers: Vec<Layer>,
    /// Source line of each layer's section header.
    pub lines: Vec<usize>,
}

impl PartialEq for NetworkConfig {
    fn eq(&self, other: &Self) -> bool {
        self.net == other.net && self.layers == other.layers
    }
}

impl NetworkConfig {
    pub fn input_shape(&self) -> Shape {
        (self.net.channels, self.net.height, self.net.width)
    }

    /// Learnable parameter count of layer `idx` (zero for non-conv layers).
    pub fn layer_param_count(&self, idx: usize) -> usize {
        let layer = &self.layers[idx];
        match &layer.spec {
            LayerSpec::Convolutional(c) => {
                let kernel = c.filters * layer.in_shape.0 * c.size * c.size;
                let extra = if c.batch_normalize { 4 * c.filters } else { c.filters };
                kernel + extra
            }
            _ => 0,
        }
    }

    pub fn param_count(&self) -> usize {
        (0..self.layers.len()).map(|i| self.layer_param_count(i)).sum()
    }

    pub fn yolo_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l.spec, LayerSpec::Yolo(_)))
            .map(|(i, _)| i)
            .collect()
    }

    /// Canonical cfg text; parsing it yields a config equal to `self`.
    pub fn to_cfg_string(&self) -> String {
        let mut s = String::new();
        let n = &self.net;
        let _ = writeln!(
            s,
            "[net]\nwidth={}\nheight={}\nchannels={}",
            n.width, n.height, n.channels
        );
        for (k, v) in &n.hints {
            let _ = writeln!(s, "{k}={v}");
        }
        for layer in &self.layers {
            s.push('\n');
            let _ = writeln!(s, "[{}]", layer.spec.kind());
            match &layer.spec {
                LayerSpec::Convolutional(c) => {
                    let _ = writeln!(
                        s,
                        "batch_normalize={}\nfilters={}\nsize={}\nstride={}\npad={}\nactivation={}",
                        c.batch_normalize as u8,
                        c.filters,
                        c.size,
                        c.stride,
                        c.pad as u8,
                        c.activation.as_str()
                    );
                }
                LayerSpec::Shortcut { from, activation } => {
                    let _ = writeln!(s, "from={from}\nactivation={}", activation.as_str());
                }
                LayerSpec::Route { layers } => {
                    let list: Vec<String> = layers.iter().map(|l| l.to_string()).collect();
                    let _ = writeln!(s, "layers={}", list.join(","));
                }
                LayerSpec::Upsample { stride } => {
                    let _ = writeln!(s, "stride={stride}");
                }
                LayerSpec::Yolo(y) => {
                    let mask: Vec<String> = y.mask.iter().map(|m| m.to_string()).collect();
                    let anchors: Vec<String> = y
                        .anchors
                        .iter()
                        .map(|(w, h)| format!("{w},{h}"))
                        .collect();
                    let _ = writeln!(
                        s,
                        "mask={}\nanchors={}\nclasses={}\nnum={}",
                        mask.join(","),
                        anchors.join(", "),
                        y.classes,
                        y.anchors.len()
                    );
                    for (k, v) in &y.hints {
                        let _ = writeln!(s, "{k}={v}");
                    }
                }
            }
        }
        s
    }
}

fn cfg_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Cfg {
        line,
        msg: msg.into(),
    }
}

const NET_HINT_KEYS: &[&str] = &[
    "batch",
    "subdivisions",
    "momentum",
    "decay",
    "learning_rate",
    "burn_in",
    "max_batches",
    "policy",
    "steps",
    "scales",
    "angle",
    "saturation",
    "exposure",
    "hue",
];

const YOLO_HINT_KEYS: &[&str] = &["jitter", "ignore_thresh", "truth_thresh", "random"];

struct RawSection {
    name: String,
    line: usize,
    entries: Vec<(String, String, usize)>,
}

impl RawSection {
    fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        for (i, (k, _, line)) in self.entries.iter().enumerate() {
            if !allowed.contains(&k.as_str()) {
                return Err(cfg_err(
                    *line,
                    format!("unknown key '{k}' in [{}]", self.name),
                ));
            }
            if self.entries[..i].iter().any(|(prev, _, _)| prev == k) {
                return Err(cfg_err(*line, format!("duplicate key '{k}'")));
            }
        }
        Ok(())
    }

    fn get(&self, key: &str) -> Option<(&str, usize)> {
        self.entries
            .iter()
            .find(|(k, _, _)| k == key)
            .map(|(_, v, l)| (v.as_str(), *l))
    }

    fn usize_or(&self, key: &str, default: Option<usize>) -> Result<usize> {
        match self.get(key) {
            Some((v, line)) => v
                .parse()
                .map_err(|_| cfg_err(line, format!("'{key}' expects a non-negative integer, got '{v}'"))),
            None => default.ok_or_else(|| {
                cfg_err(self.line, format!("[{}] requires '{key}'", self.name))
            }),
        }
    }

    fn flag_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            Some(("0", _)) => Ok(false),
            Some(("1", _)) => Ok(true),
            Some((v, line)) => Err(cfg_err(line, format!("'{key}' expects 0 or 1, got '{v}'"))),
            None => Ok(default),
        }
    }

    fn int_list(&self, key: &str) -> Result<Option<(Vec<i64>, usize)>> {
        let Some((v, line)) = self.get(key) else {
            return Ok(None);
        };
        let list = v
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<i64>()
                    .map_err(|_| cfg_err(line, format!("'{key}' has malformed entry '{}'", t.trim())))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Some((list, line)))
    }

    fn hints(&self, keys: &[&str]) -> Vec<(String, String)> {
        self.entries
            .iter()
            .filter(|(k, _, _)| keys.contains(&k.as_str()))
            .map(|(k, v, _)| (k.clone(), v.clone()))
            .collect()
    }
}

fn split_sections(text: &str) -> Result<Vec<RawSection>> {
    let mut sections: Vec<RawSection> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(rest) = content.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| cfg_err(line, format!("malformed section header '{content}'")))?
                .trim()
                .to_string();
            sections.push(RawSection {
                name,
                line,
                entries: Vec::new(),
            });
            continue;
        }
        let (k, v) = content
            .split_once('=')
            .ok_or_else(|| cfg_err(line, format!("expected key=value, got '{content}'")))?;
        let section = sections
            .last_mut()
            .ok_or_else(|| cfg_err(line, "key outside of any section"))?;
        section
            .entries
            .push((k.trim().to_string(), v.trim().to_string(), line));
    }
    Ok(sections)
}

fn resolve_index(rel: i64, current: usize, line: usize) -> Result<usize> {
    let abs = if rel < 0 { current as i64 + rel } else { rel };
    if abs < 0 || abs >= current as i64 {
        return Err(cfg_err(
            line,
            format!("layer reference {rel} at layer {current} does not name an earlier layer"),
        ));
    }
    Ok(abs as usize)
}

pub fn parse_cfg(text: &str) -> Result<NetworkConfig> {
    let sections = split_sections(text)?;
    let mut iter = sections.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| cfg_err(1, "empty cfg: expected [net]"))?;
    if first.name != "net" {
        return Err(cfg_err(
            first.line,
            format!("section [{}] before [net]; [net] must come first", first.name),
        ));
    }
    let mut allowed = vec!["width", "height", "channels"];
    allowed.extend_from_slice(NET_HINT_KEYS);
    first.check_keys(&allowed)?;
    let net = NetSpec {
        width: first.usize_or("width", None)?,
        height: first.usize_or("height", None)?,
        channels: first.usize_or("channels", Some(3))?,
        hints: first.hints(NET_HINT_KEYS),
    };
    if net.width == 0 || net.height == 0 || net.channels == 0 {
        return Err(cfg_err(first.line, "net dimensions must be positive"));
    }

    let mut layers: Vec<Layer> = Vec::new();
    let mut lines = Vec::new();
    for sec in iter {
        let idx = layers.len();
        let prev_shape = layers
            .last()
            .map(|l| l.out_shape)
            .unwrap_or((net.channels, net.height, net.width));
        let prev_inputs = if idx == 0 { vec![] } else { vec![idx - 1] };
        let layer = match sec.name.as_str() {
            "convolutional" => {
                sec.check_keys(&[
                    "batch_normalize",
                    "filters",
                    "size",
                    "stride",
                    "pad",
                    "activation",
                ])?;
                let spec = ConvSpec {
                    batch_normalize: sec.flag_or("batch_normalize", false)?,
                    filters: sec.usize_or("filters", None)?,
                    size: sec.usize_or("size", Some(1))?,
                    stride: sec.usize_or("stride", Some(1))?,
                    pad: sec.flag_or("pad", false)?,
                    activation: match sec.get("activation") {
                        Some((v, l)) => Activation::parse(v, l)?,
                        None => Activation::Linear,
                    },
                };
                if spec.filters == 0 {
                    return Err(cfg_err(sec.line, "filters must be positive"));
                }
                if spec.size % 2 == 0 {
                    return Err(cfg_err(sec.line, format!("kernel size {} must be odd", spec.size)));
                }
                if spec.stride == 0 {
                    return Err(cfg_err(sec.line, "stride must be at least 1"));
                }
                let (c, h, w) = prev_shape;
                let p = spec.padding();
                if h + 2 * p < spec.size || w + 2 * p < spec.size {
                    return Err(cfg_err(sec.line, format!("kernel {} larger than padded input {h}x{w}", spec.size)));
                }
                let out = (
                    spec.filters,
                    (h + 2 * p - spec.size) / spec.stride + 1,
                    (w + 2 * p - spec.size) / spec.stride + 1,
                );
                Layer {
                    spec: LayerSpec::Convolutional(spec),
                    inputs: prev_inputs,
                    in_shape: (c, h, w),
                    out_shape: out,
                }
            }
            "shortcut" => {
                sec.check_keys(&["from", "activation"])?;
                let (from_list, line) = sec
                    .int_list("from")?
                    .ok_or_else(|| cfg_err(sec.line, "[shortcut] requires 'from'"))?;
                if from_list.len() != 1 {
                    return Err(cfg_err(line, "'from' takes a single index"));
                }
                if idx == 0 {
                    return Err(cfg_err(sec.line, "shortcut cannot be the first layer"));
                }
                let from = from_list[0];
                let src = resolve_index(from, idx, line)?;
                if layers[src].out_shape != prev_shape {
                    return Err(cfg_err(
                        line,
                        format!(
                            "shortcut shapes differ: {:?} vs {:?}",
                            layers[src].out_shape, prev_shape
                        ),
                    ));
                }
                let activation = match sec.get("activation") {
                    Some((v, l)) => Activation::parse(v, l)?,
                    None => Activation::Linear,
                };
                Layer {
                    spec: LayerSpec::Shortcut { from, activation },
                    inputs: vec![idx - 1, src],
                    in_shape: prev_shape,
                    out_shape: prev_shape,
                }
            }
            "route" => {
                sec.check_keys(&["layers"])?;
                let (rel, line) = sec
                    .int_list("layers")?
                    .ok_or_else(|| cfg_err(sec.line, "[route] requires 'layers'"))?;
                if rel.is_empty() {
                    return Err(cfg_err(line, "route needs at least one layer"));
                }
                let inputs = rel
                    .iter()
                    .map(|&r| resolve_index(r, idx, line))
                    .collect::<Result<Vec<_>>>()?;
                let (_, h, w) = layers[inputs[0]].out_shape;
                let mut channels = 0;
                for &i in &inputs {
                    let (c2, h2, w2) = layers[i].out_shape;
                    if (h2, w2) != (h, w) {
                        return Err(cfg_err(
                            line,
                            format!("route inputs differ spatially: {h}x{w} vs {h2}x{w2} (layer {i})"),
                        ));
                    }
                    channels += c2;
                }
                Layer {
                    spec: LayerSpec::Route { layers: rel },
                    inputs,
                    in_shape: prev_shape,
                    out_shape: (channels, h, w),
                }
            }
            "upsample" => {
                sec.check_keys(&["stride"])?;
                let stride = sec.usize_or("stride", Some(2))?;
                if stride == 0 {
                    return Err(cfg_err(sec.line, "upsample stride must be at least 1"));
                }
                let (c, h, w) = prev_shape;
                Layer {
                    spec: LayerSpec::Upsample { stride },
                    inputs: prev_inputs,
                    in_shape: prev_shape,
                    out_shape: (c, h * stride, w * stride),
                }
            }
            "yolo" => {
                let mut allowed = vec!["mask", "anchors", "classes", "num"];
                allowed.extend_from_slice(YOLO_HINT_KEYS);
                sec.check_keys(&allowed)?;
                let (anchor_str, aline) = sec
                    .get("anchors")
                    .ok_or_else(|| cfg_err(sec.line, "[yolo] requires 'anchors'"))?;
                let vals = anchor_str
                    .split(',')
                    .map(|t| {
                        t.trim()
                            .parse::<f64>()
                            .map_err(|_| cfg_err(aline, format!("malformed anchor value '{}'", t.trim())))
                    })
                    .collect::<Result<Vec<_>>>()?;
                if vals.is_empty() || vals.len() % 2 != 0 {
                    return Err(cfg_err(aline, "anchors must be a non-empty list of w,h pairs"));
                }
                if vals.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                    return Err(cfg_err(aline, "anchors must be strictly positive"));
                }
                let anchors: Vec<(f64, f64)> = vals.chunks(2).map(|p| (p[0], p[1])).collect();
                let num = sec.usize_or("num", Some(anchors.len()))?;
                if num != anchors.len() {
                    return Err(cfg_err(
                        sec.line,
                        format!("num={num} but {} anchors listed", anchors.len()),
                    ));
                }
                let mask = match sec.int_list("mask")? {
                    Some((m, line)) => m
                        .into_iter()
                        .map(|v| {
                            if v < 0 || v as usize >= anchors.len() {
                                Err(cfg_err(line, format!("mask index {v} out of range")))
                            } else {
                                Ok(v as usize)
                            }
                        })
                        .collect::<Result<Vec<_>>>()?,
                    None => (0..anchors.len()).collect(),
                };
                let classes = sec.usize_or("classes", None)?;
                let expected = mask.len() * (5 + classes);
                if prev_shape.0 != expected {
                    return Err(cfg_err(
                        sec.line,
                        format!(
                            "yolo layer expects {expected} input channels ({} anchors x (5 + {classes})), got {}",
                            mask.len(),
                            prev_shape.0
                        ),
                    ));
                }
                if idx == 0 {
                    return Err(cfg_err(sec.line, "yolo cannot be the first layer"));
                }
                Layer {
                    spec: LayerSpec::Yolo(YoloSpec {
                        mask,
                        anchors,
                        classes,
                        hints: sec.hints(YOLO_HINT_KEYS),
                    }),
                    inputs: prev_inputs,
                    in_shape: prev_shape,
                    out_shape: prev_shape,
                }
            }
            other => {
                return Err(cfg_err(sec.line, format!("unsupported section [{other}]")));
            }
        };
        lines.push(sec.line);
        layers.push(layer);
    }
    Ok(NetworkConfig { net, layers, lines })
}
