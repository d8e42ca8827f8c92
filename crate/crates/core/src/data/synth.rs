//! Procedural stand-in corpus: noisy dark frames carrying one or two
//! bright glyphs, one glyph style per class, with exact boxes.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::index::{DatasetIndex, Gender, ImageRecord};
use crate::data::labels::{write_labels, Annotation};
use crate::data::pgm::write_pgm;
use crate::data::schema::CLASS_NAMES;
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{iou_raw, BBox, NormBox};

pub const MIN_IMAGE_SIZE: usize = 64;
const GAP: usize = 4;

/// Pixel rectangle `[x, x + w) x [y, y + h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GlyphRect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl GlyphRect {
    fn separated(&self, other: &GlyphRect) -> bool {
        self.x + self.w + GAP <= other.x
            || other.x + other.w + GAP <= self.x
            || self.y + self.h + GAP <= other.y
            || other.y + other.h + GAP <= self.y
    }

    pub fn to_norm(&self, size: usize) -> NormBox {
        let s = size as f64;
        NormBox {
            cx: (self.x as f64 + self.w as f64 / 2.0) / s,
            cy: (self.y as f64 + self.h as f64 / 2.0) / s,
            w: self.w as f64 / s,
            h: self.h as f64 / s,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthImage {
    pub name: String,
    pub size: usize,
    pub pixels: Vec<u8>,
    pub glyphs: Vec<(usize, GlyphRect)>,
}

impl SynthImage {
    pub fn annotations(&self) -> Vec<Annotation> {
        self.glyphs
            .iter()
            .map(|&(class_id, r)| Annotation {
                class_id,
                bbox: r.to_norm(self.size),
            })
            .collect()
    }

    pub fn pgm(&self) -> Vec<u8> {
        write_pgm(self.size, self.size, &self.pixels)
    }

    /// Pixels scaled to [0, 1], as read back from the written PGM.
    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: (1, self.size, self.size),
            data: self.pixels.iter().map(|&p| p as f64 / 255.0).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub images: Vec<SynthImage>,
    pub index: DatasetIndex,
}

/// Whether glyph pixel (dx, dy) of a `w x h` glyph of `class_id` is lit.
fn lit(class_id: usize, dx: usize, dy: usize, w: usize, h: usize) -> bool {
    match class_id {
        0 => true,
        1 => {
            let t = (w.min(h) / 6).max(3);
            dx < t || dy < t || dx + t >= w || dy + t >= h
        }
        2 => {
            let in_band = |d: usize, n: usize| d >= n / 3 && d < n - n / 3;
            in_band(dx, w) || in_band(dy, h)
        }
        _ => (dx / 4 + dy / 4) % 2 == 0,
    }
}

fn glyph_extent(size: usize) -> (usize, usize) {
    (size * 25 / 100, size * 40 / 100)
}

pub fn render_image(name: String, size: usize, rng: &mut ChaCha8Rng) -> SynthImage {
    let (lo, hi) = glyph_extent(size);
    let count = rng.gen_range(1..=2);
    let mut glyphs: Vec<(usize, GlyphRect)> = Vec::new();
    let mut attempts = 0;
    while glyphs.len() < count && attempts < 200 {
        attempts += 1;
        let class_id = rng.gen_range(0..CLASS_NAMES.len());
        let w = rng.gen_range(lo..=hi);
        let h = rng.gen_range(lo..=hi);
        let rect = GlyphRect {
            x: rng.gen_range(0..=size - w),
            y: rng.gen_range(0..=size - h),
            w,
            h,
        };
        if glyphs.iter().all(|(_, g)| g.separated(&rect)) {
            glyphs.push((class_id, rect));
        }
    }
    let mut pixels: Vec<u8> = (0..size * size).map(|_| rng.gen_range(10..=40)).collect();
    for &(class_id, r) in &glyphs {
        for dy in 0..r.h {
            for dx in 0..r.w {
                if lit(class_id, dx, dy, r.w, r.h) {
                    pixels[(r.y + dy) * size + r.x + dx] = rng.gen_range(190..=250);
                }
            }
        }
    }
    SynthImage {
        name,
        size,
        pixels,
        glyphs,
    }
}

/// `n` images of `size x size` pixels; two images per patient, genders
/// alternating by patient.
pub fn synth_generate(n: usize, size: usize, seed: u64) -> Result<SynthCorpus> {
    if size < MIN_IMAGE_SIZE {
        return Err(Error::InvalidInput(format!(
            "image size {size} too small for glyphs (minimum {MIN_IMAGE_SIZE})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n);
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let name = format!("img_{i:05}");
        let img = render_image(name.clone(), size, &mut rng);
        let patient = i / 2;
        records.push(ImageRecord {
            image_path: format!("images/{name}.pgm"),
            patient_id: format!("P{patient:04}"),
            gender: if patient % 2 == 0 { Gender::F } else { Gender::M },
            label_path: format!("labels/{name}.txt"),
            annotations: img.annotations(),
        });
        images.push(img);
    }
    let index = DatasetIndex::from_records(records, CLASS_NAMES.len(), PathBuf::new())?;
    Ok(SynthCorpus { images, index })
}

impl SynthCorpus {
    /// Writes `index.csv`, `images/*.pgm` and `labels/*.txt` under `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        for sub in ["images", "labels"] {
            let p = dir.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        for (img, rec) in self.images.iter().zip(&self.index.records) {
            let p = dir.join(&rec.image_path);
            std::fs::write(&p, img.pgm()).map_err(|e| Error::io(&p, e))?;
            let p = dir.join(&rec.label_path);
            std::fs::write(&p, write_labels(&img.annotations())).map_err(|e| Error::io(&p, e))?;
        }
        let p = dir.join("index.csv");
        std::fs::write(&p, self.index.to_csv()).map_err(|e| Error::io(&p, e))
    }

    pub fn box_shapes(&self) -> Vec<(f64, f64)> {
        self.images
            .iter()
            .flat_map(|img| img.glyphs.iter().map(|(_, r)| (r.w as f64, r.h as f64)))
            .collect()
    }
}

fn shape_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    iou_raw(
        &BBox::from_center(0.0, 0.0, a.0, a.1),
        &BBox::from_center(0.0, 0.0, b.0, b.1),
    )
}

/// k-means over box shapes with `1 - IoU` distance; anchors sorted by area.
pub fn kmeans_anchors(shapes: &[(f64, f64)], k: usize, seed: u64) -> Result<Vec<(f64, f64)>> {
    if k == 0 || shapes.len() < k {
        return Err(Error::InvalidInput(format!(
            "need at least {k} boxes for {k} anchors, got {}",
            shapes.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, shapes.len(), k);
    let mut centers: Vec<(f64, f64)> = picks.iter().map(|i| shapes[i]).collect();
    let mut assign = vec![usize::MAX; shapes.len()];
    for _ in 0..100 {
        let mut changed = false;
        for (i, &s) in shapes.iter().enumerate() {
            let best = (0..k)
                .max_by(|&a, &b| shape_iou(s, centers[a]).total_cmp(&shape_iou(s, centers[b])).then(b.cmp(&a)))
                .expect("k > 0");
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<&(f64, f64)> = shapes
                .iter()
                .zip(&assign)
                .filter(|(_, &a)| a == c)
                .map(|(s, _)| s)
                .collect();
            if !members.is_empty() {
                let n = members.len() as f64;
                *center = (
                    members.iter().map(|s| s.0).sum::<f64>() / n,
                    members.iter().map(|s| s.1).sum::<f64>() / n,
                );
            }
        }
    }
    centers.sort_by(|a, b| (a.0 * a.1).total_cmp(&(b.0 * b.1)));
    Ok(centers)
}

/// Small single-head network for `size x size` grayscale input: five
/// 3x3 leaky convolutions (four of them stride 2) and a 1x1 linear head.
pub fn toy_cfg(size: usize, anchors: &[(f64, f64)], classes: usize) -> String {
    let head = anchors.len() * (5 + classes);
    let mut s = format!("[net]\nwidth={size}\nheight={size}\nchannels=1\n");
    for (filters, stride) in [(8, 2), (16, 2), (32, 2), (32, 2), (64, 1)] {
        s.push_str(&format!(
            "\n[convolutional]\nfilters={filters}\nsize=3\nstride={stride}\npad=1\nactivation=leaky\n"
        ));
    }
    s.push_str(&format!(
        "\n[convolutional]\nfilters={head}\nsize=1\nstride=1\npad=0\nactivation=linear\n"
    ));
    let mask: Vec<String> = (0..anchors.len()).map(|i| i.to_string()).collect();
    let anchor_list: Vec<String> = anchors
        .iter()
        .map(|(w, h)| format!("{},{}", (w * 100.0).round() / 100.0, (h * 100.0).round() / 100.0))
        .collect();
    s.push_str(&format!(
        "\n[yolo]\nmask={}\nanchors={}\nclasses={classes}\nnum={}\n",
        mask.join(","),
        anchor_list.join(", "),
        anchors.len()
    ));
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::pgm::read_pgm_image;
    use crate::geometry::norm_to_abs;
    use crate::model::parse_cfg;

    #[test]
    fn empty_and_too_small() {
        let c = synth_generate(0, 128, 1).unwrap();
        assert!(c.images.is_empty() && c.index.is_empty());
        assert!(synth_generate(3, 32, 1).is_err());
    }

    #[test]
    fn deterministic() {
        let a = synth_generate(6, 96, 42).unwrap();
        let b = synth_generate(6, 96, 42).unwrap();
        for (x, y) in a.images.iter().zip(&b.images) {
            assert_eq!(x.pgm(), y.pgm());
        }
        assert_eq!(a.index, b.index);
        let c = synth_generate(6, 96, 43).unwrap();
        assert_ne!(a.images[0].pixels, c.images[0].pixels);
    }

    #[test]
    fn patients_and_genders() {
        let c = synth_generate(8, 64, 0).unwrap();
        let r = &c.index.records;
        assert_eq!(r[0].patient_id, r[1].patient_id);
        assert_ne!(r[1].patient_id, r[2].patient_id);
        assert_eq!((r[0].gender, r[2].gender), (Gender::F, Gender::M));
    }

    #[test]
    fn boxes_are_exact_and_in_bounds() {
        let c = synth_generate(40, 128, 7).unwrap();
        for img in &c.images {
            assert!((1..=2).contains(&img.glyphs.len()));
            let decoded = read_pgm_image(&img.pgm()).unwrap();
            for (a, &(_, r)) in img.annotations().iter().zip(&img.glyphs) {
                let b = norm_to_abs(&a.bbox, 128, 128).unwrap();
                assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 128.0 && b.y2 <= 128.0);
                // Bright-pixel extent within a margin around the glyph.
                let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
                for y in r.y.saturating_sub(2)..(r.y + r.h + 2).min(128) {
                    for x in r.x.saturating_sub(2)..(r.x + r.w + 2).min(128) {
                        if decoded.pixels[y * 128 + x] > 120 {
                            x0 = x0.min(x);
                            y0 = y0.min(y);
                            x1 = x1.max(x + 1);
                            y1 = y1.max(y + 1);
                        }
                    }
                }
                assert_eq!((x0 as f64, y0 as f64, x1 as f64, y1 as f64), (b.x1, b.y1, b.x2, b.y2));
            }
        }
    }

    #[test]
    fn anchors_and_cfg() {
        let c = synth_generate(60, 128, 3).unwrap();
        let anchors = kmeans_anchors(&c.box_shapes(), 3, 0).unwrap();
        assert_eq!(anchors.len(), 3);
        assert!(anchors.windows(2).all(|w| w[0].0 * w[0].1 <= w[1].0 * w[1].1));
        assert_eq!(kmeans_anchors(&c.box_shapes(), 3, 0).unwrap(), anchors);
        let cfg = parse_cfg(&toy_cfg(128, &anchors, 4)).unwrap();
        assert_eq!(cfg.layers.last().unwrap().out_shape, (27, 8, 8));
        assert!(kmeans_anchors(&[(1.0, 1.0)], 3, 0).is_err());
    }
}
