use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::fmtnum::fmt_sig;
use crate::geometry::NormBox;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Annotation {
    pub class_id: usize,
    pub bbox: NormBox,
}

/// Parses `class_id cx cy w h` lines with normalized coordinates.
pub fn read_labels(text: &str, num_classes: usize) -> Result<Vec<Annotation>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let err = |msg: String| Error::Label { line: i + 1, msg };
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        if toks.len() != 5 {
            return Err(err(format!("expected 5 fields, got {}", toks.len())));
        }
        let class_id: usize = toks[0]
            .parse()
            .map_err(|_| err(format!("bad class id '{}'", toks[0])))?;
        if class_id >= num_classes {
            return Err(err(format!(
                "class id {class_id} out of range 0..{}",
                num_classes - 1
            )));
        }
        let v = toks[1..]
            .iter()
            .map(|t| t.parse::<f64>().map_err(|_| err(format!("bad number '{t}'"))))
            .collect::<Result<Vec<_>>>()?;
        if v.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(err("coordinates must lie in [0,1]".into()));
        }
        if v[2] <= 0.0 || v[3] <= 0.0 {
            return Err(err("box width and height must be positive".into()));
        }
        out.push(Annotation {
            class_id,
            bbox: NormBox {
                cx: v[0],
                cy: v[1],
                w: v[2],
                h: v[3],
            },
        });
    }
    Ok(out)
}

pub fn write_labels(annotations: &[Annotation]) -> String {
    let mut s = String::new();
    for a in annotations {
        let b = &a.bbox;
        let _ = writeln!(
            s,
            "{} {} {} {} {}",
            a.class_id,
            fmt_sig(b.cx, 6),
            fmt_sig(b.cy, 6),
            fmt_sig(b.w, 6),
            fmt_sig(b.h, 6)
        );
    }
    s
}
