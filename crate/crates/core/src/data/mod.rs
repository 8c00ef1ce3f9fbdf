//! Deterministic synthetic detection data: saturated rectangles, discs and triangles on
//! noisy dark backgrounds, with PPM images and text annotations.
//!
//! Rendering contract relied on by augmentation and tests: every shape pixel has a channel
//! of at least [`SHAPE_MIN`], every background pixel has all channels at most [`BG_MAX`],
//! and bounding boxes of distinct shapes are separated by at least [`GAP`] pixels.

mod augment;
mod io;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::multibox::{GroundTruthBox, Rect};
use crate::rng::rng_for;

pub use augment::{augment, crop_resize, flip_horizontal, CropPlan, MIN_CROP_AREA, MIN_VISIBLE};
pub use io::{
    decode_ppm, encode_ppm, format_annotations, generate_dataset, parse_annotations, read_ppm, write_ppm, Dataset,
    Manifest,
};

pub const CLASS_NAMES: [&str; 3] = ["rectangle", "disc", "triangle"];
pub const SHAPE_MIN: u8 = 170;
pub const BG_MAX: u8 = 150;
pub const GAP: usize = 3;
/// Smallest shape area as a fraction of the image.
pub const MIN_SHAPE_AREA: f64 = 0.04;

/// Interleaved 8-bit RGB.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image { width, height, pixels: vec![0; width * height * 3] }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn is_shape_pixel(&self, x: usize, y: usize) -> bool {
        self.get(x, y).iter().any(|&c| c >= SHAPE_MIN)
    }

    /// Tightest pixel box `[x0, x1) × [y0, y1)` of shape pixels inside the given region.
    pub fn shape_bbox(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> Option<(usize, usize, usize, usize)> {
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for y in y0..y1.min(self.height) {
            for x in x0..x1.min(self.width) {
                if self.is_shape_pixel(x, y) {
                    b = Some(match b {
                        None => (x, y, x + 1, y + 1),
                        Some((a, c, d, e)) => (a.min(x), c.min(y), d.max(x + 1), e.max(y + 1)),
                    });
                }
            }
        }
        b
    }

    /// `[3, H, W]` planes scaled to `[0, 1]`.
    pub fn to_chw(&self) -> Vec<f32> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; 3 * plane];
        for (p, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + p] = px[c] as f32 / 255.0;
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub boxes: Vec<GroundTruthBox>,
}

impl Sample {
    /// Checks the ground-truth invariants against the image.
    pub fn validate(&self) -> Result<()> {
        for (i, b) in self.boxes.iter().enumerate() {
            let r = b.rect;
            let inside = [r.xmin, r.ymin, r.xmax, r.ymax].iter().all(|v| (0.0..=1.0).contains(v));
            if !r.is_valid() || !inside || b.class_id == 0 {
                return Err(Error::data(format!("sample {}: box {i} invalid: {b:?}", self.id)));
            }
        }
        Ok(())
    }
}

/// Pixel box to normalized coordinates.
pub(crate) fn normalize(b: (usize, usize, usize, usize), w: usize, h: usize) -> Rect {
    Rect::new(b.0 as f32 / w as f32, b.1 as f32 / h as f32, b.2 as f32 / w as f32, b.3 as f32 / h as f32)
}

const PALETTES: [[[u8; 3]; 2]; 3] = [
    [[225, 55, 50], [235, 215, 85]],
    [[55, 205, 65], [235, 215, 85]],
    [[65, 95, 235], [235, 215, 85]],
];

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect { x0: i64, y0: i64, x1: i64, y1: i64 },
    /// Center and radius in half-pixel units.
    Disc { cx2: i64, cy2: i64, r2: i64 },
    Triangle { v: [(i64, i64); 3] },
}

impl Shape {
    /// Pixel-center coverage test; coordinates are doubled so everything stays integral.
    fn covers(&self, x: i64, y: i64) -> bool {
        let (px, py) = (2 * x + 1, 2 * y + 1);
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Shape::Disc { cx2, cy2, r2 } => (px - cx2).pow(2) + (py - cy2).pow(2) <= r2 * r2,
            Shape::Triangle { v } => {
                let e = |(ax, ay): (i64, i64), (bx, by): (i64, i64)| (2 * bx - 2 * ax) * (py - 2 * ay) - (2 * by - 2 * ay) * (px - 2 * ax);
                let (a, b, c) = (e(v[0], v[1]), e(v[1], v[2]), e(v[2], v[0]));
                (a >= 0 && b >= 0 && c >= 0) || (a <= 0 && b <= 0 && c <= 0)
            }
        }
    }
}

fn random_shape(rng: &mut ChaCha8Rng, class: usize, size: usize) -> (Shape, (usize, usize, usize, usize)) {
    let s = size as i64;
    let span = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| rng.gen_range((lo * size as f64).ceil() as i64..=(hi * size as f64) as i64);
    match class {
        1 => {
            let (w, h) = (span(rng, 0.22, 0.5), span(rng, 0.22, 0.5));
            let (x0, y0) = (rng.gen_range(0..=s - w), rng.gen_range(0..=s - h));
            (Shape::Rect { x0, y0, x1: x0 + w, y1: y0 + h }, (x0 as usize, y0 as usize, (x0 + w) as usize, (y0 + h) as usize))
        }
        2 => {
            let r = span(rng, 0.13, 0.25);
            let (cx, cy) = (rng.gen_range(r..=s - r), rng.gen_range(r..=s - r));
            let bb = ((cx - r) as usize, (cy - r) as usize, (cx + r) as usize, (cy + r) as usize);
            (Shape::Disc { cx2: 2 * cx, cy2: 2 * cy, r2: 2 * r }, bb)
        }
        _ => {
            let (w, h) = (span(rng, 0.32, 0.55), span(rng, 0.32, 0.55));
            let (x0, y0) = (rng.gen_range(0..=s - w), rng.gen_range(0..=s - h));
            let (x1, y1) = (x0 + w, y0 + h);
            let (ax, ay) = (rng.gen_range(x0..=x1), rng.gen_range(y0..=y1));
            // apex on one side, base along the opposite side
            let v = match rng.gen_range(0..4) {
                0 => [(ax, y0), (x0, y1), (x1, y1)],
                1 => [(ax, y1), (x1, y0), (x0, y0)],
                2 => [(x0, ay), (x1, y1), (x1, y0)],
                _ => [(x1, ay), (x0, y0), (x0, y1)],
            };
            (Shape::Triangle { v }, (x0 as usize, y0 as usize, x1 as usize, y1 as usize))
        }
    }
}

fn separated(a: (usize, usize, usize, usize), b: (usize, usize, usize, usize)) -> bool {
    a.2 + GAP <= b.0 || b.2 + GAP <= a.0 || a.3 + GAP <= b.1 || b.3 + GAP <= a.1
}

/// Renders sample `index`; a pure function of its arguments.
pub fn generate_sample(index: u64, num_classes: usize, size: usize, seed: u64) -> Sample {
    let mut rng = rng_for(seed, &[index]);
    let mut img = Image::new(size, size);
    let base: [i32; 3] = [rng.gen_range(15..90), rng.gen_range(15..90), rng.gen_range(15..90)];
    let tilt: [i32; 3] = [rng.gen_range(-30..=30), rng.gen_range(-30..=30), rng.gen_range(-30..=30)];
    for y in 0..size {
        for x in 0..size {
            let mut px = [0u8; 3];
            for c in 0..3 {
                let grad = tilt[c] * (x + y) as i32 / (2 * size as i32);
                let v = base[c] + grad + rng.gen_range(-25..=25);
                px[c] = v.clamp(0, BG_MAX as i32) as u8;
            }
            img.set(x, y, px);
        }
    }

    let wanted = rng.gen_range(1..=3);
    let mut placed: Vec<(usize, (usize, usize, usize, usize))> = Vec::new();
    let mut attempts = 0;
    while placed.len() < wanted && attempts < 60 {
        attempts += 1;
        let class = rng.gen_range(1..=num_classes);
        let (shape, bb) = random_shape(&mut rng, class, size);
        if placed.iter().any(|&(_, o)| !separated(bb, o)) {
            continue;
        }
        let mut color = PALETTES[class - 1][rng.gen_range(0..2)];
        for c in color.iter_mut() {
            *c = (*c as i32 + rng.gen_range(-12..=12)).clamp(0, 255) as u8;
        }
        let mut mask = Vec::new();
        for y in bb.1..bb.3 {
            for x in bb.0..bb.2 {
                if shape.covers(x as i64, y as i64) {
                    mask.push((x, y));
                }
            }
        }
        if (mask.len() as f64) < MIN_SHAPE_AREA * (size * size) as f64 {
            continue;
        }
        let mut tight = (usize::MAX, usize::MAX, 0, 0);
        for &(x, y) in &mask {
            let mut px = color;
            for c in px.iter_mut() {
                *c = (*c as i32 + rng.gen_range(-8..=8)).clamp(0, 255) as u8;
            }
            img.set(x, y, px);
            tight = (tight.0.min(x), tight.1.min(y), tight.2.max(x + 1), tight.3.max(y + 1));
        }
        placed.push((class, tight));
    }
    let boxes = placed
        .into_iter()
        .map(|(class_id, bb)| GroundTruthBox { rect: normalize(bb, size, size), class_id })
        .collect();
    Sample { id: format!("{index:06}"), image: img, boxes }
}
