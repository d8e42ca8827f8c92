//! Box overlays on grayscale images, written as PPM.

use crate::data::GrayImage;
use crate::geometry::BBox;

pub const CLASS_COLORS: [[u8; 3]; 6] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [255, 225, 25],
];

pub fn class_color(class_id: usize) -> [u8; 3] {
    CLASS_COLORS[class_id % CLASS_COLORS.len()]
}

// 3x5 digit bitmaps, one row per u8 (low three bits, msb left).
const DIGITS: [[u8; 5]; 10] = [
    [0b111, 0b101, 0b101, 0b101, 0b111],
    [0b010, 0b110, 0b010, 0b010, 0b111],
    [0b111, 0b001, 0b111, 0b100, 0b111],
    [0b111, 0b001, 0b111, 0b001, 0b111],
    [0b101, 0b101, 0b111, 0b001, 0b001],
    [0b111, 0b100, 0b111, 0b001, 0b111],
    [0b111, 0b100, 0b111, 0b101, 0b111],
    [0b111, 0b001, 0b010, 0b010, 0b010],
    [0b111, 0b101, 0b111, 0b101, 0b111],
    [0b111, 0b101, 0b111, 0b001, 0b111],
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn from_gray(img: &GrayImage) -> Self {
        let m = img.maxval as u32;
        let pixels = img
            .pixels
            .iter()
            .map(|&p| {
                let v = ((p as u32 * 255 + m / 2) / m) as u8;
                [v, v, v]
            })
            .collect();
        RgbImage {
            width: img.width,
            height: img.height,
            pixels,
        }
    }

    fn put(&mut self, x: usize, y: usize, c: [u8; 3]) {
        if x < self.width && y < self.height {
            self.pixels[y * self.width + x] = c;
        }
    }

    /// Pixel rectangle covered by `b`, clamped to the image, or `None` when
    /// it lies entirely outside.
    pub fn pixel_rect(&self, b: &BBox) -> Option<(usize, usize, usize, usize)> {
        let (w, h) = (self.width as f64, self.height as f64);
        if self.width == 0 || self.height == 0 || b.x2 <= 0.0 || b.y2 <= 0.0 || b.x1 >= w || b.y1 >= h {
            return None;
        }
        let lo = |v: f64, n: f64| v.floor().clamp(0.0, n - 1.0) as usize;
        let hi = |v: f64, n: f64| (v.ceil() - 1.0).clamp(0.0, n - 1.0) as usize;
        let (x0, y0) = (lo(b.x1, w), lo(b.y1, h));
        Some((x0, y0, hi(b.x2, w).max(x0), hi(b.y2, h).max(y0)))
    }

    /// One-pixel outline plus the class index in the top-left corner.
    pub fn draw_box(&mut self, b: &BBox, class_id: usize) {
        let Some((x0, y0, x1, y1)) = self.pixel_rect(b) else { return };
        let c = class_color(class_id);
        for x in x0..=x1 {
            self.put(x, y0, c);
            self.put(x, y1, c);
        }
        for y in y0..=y1 {
            self.put(x0, y, c);
            self.put(x1, y, c);
        }
        let label = class_id.to_string();
        let mut gx = x0 + 2;
        for ch in label.bytes() {
            let glyph = DIGITS[(ch - b'0') as usize];
            for (row, bits) in glyph.iter().enumerate() {
                for col in 0..3 {
                    let (x, y) = (gx + col, y0 + 2 + row);
                    if bits >> (2 - col) & 1 == 1 && x < x1 && y < y1 {
                        self.put(x, y, c);
                    }
                }
            }
            gx += 4;
        }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        crate::data::write_ppm(self.width, self.height, &self.pixels)
    }
}

pub fn render_overlay(img: &GrayImage, boxes: &[(usize, BBox)]) -> RgbImage {
    let mut out = RgbImage::from_gray(img);
    for (class_id, b) in boxes {
        out.draw_box(b, *class_id);
    }
    out
}
