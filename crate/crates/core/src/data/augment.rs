use rand::Rng;

use crate::multibox::GroundTruthBox;
use crate::rng::rng_for;

use super::{normalize, Image, Sample};

/// Smallest crop as a fraction of the image area.
pub const MIN_CROP_AREA: f64 = 0.5;
/// Boxes keeping less than this fraction of their area inside a crop are dropped.
pub const MIN_VISIBLE: f64 = 0.5;
const CROP_TRIES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropPlan {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

fn pixel_box(b: &GroundTruthBox, w: usize, h: usize) -> (usize, usize, usize, usize) {
    let px = |v: f32, n: usize| (v as f64 * n as f64).round() as usize;
    (px(b.rect.xmin, w), px(b.rect.ymin, h), px(b.rect.xmax, w), px(b.rect.ymax, h))
}

pub fn flip_horizontal(s: &Sample) -> Sample {
    let (w, h) = (s.image.width, s.image.height);
    let mut img = Image::new(w, h);
    for y in 0..h {
        for x in 0..w {
            img.set(w - 1 - x, y, s.image.get(x, y));
        }
    }
    let boxes = s
        .boxes
        .iter()
        .map(|b| {
            let mut r = b.rect;
            (r.xmin, r.xmax) = (1.0 - b.rect.xmax, 1.0 - b.rect.xmin);
            r.xmin = r.xmin.max(0.0);
            GroundTruthBox { rect: r, class_id: b.class_id }
        })
        .collect();
    Sample { id: s.id.clone(), image: img, boxes }
}

/// First output index whose nearest-neighbour source is at least `src` (`src` relative to the crop).
fn first_out(src: usize, out: usize, crop: usize) -> usize {
    (src * out).div_ceil(crop)
}

/// Crops to `plan` and resizes back to the original extent with nearest-neighbour sampling.
///
/// Each surviving box is re-fit to the shape pixels visible inside its clipped region, so
/// annotations stay pixel-exact for shapes the crop cuts through.
pub fn crop_resize(s: &Sample, plan: CropPlan) -> Sample {
    let (w, h) = (s.image.width, s.image.height);
    let mut img = Image::new(w, h);
    for oy in 0..h {
        let sy = plan.y0 + oy * plan.h / h;
        for ox in 0..w {
            img.set(ox, oy, s.image.get(plan.x0 + ox * plan.w / w, sy));
        }
    }
    let mut boxes = Vec::new();
    for b in &s.boxes {
        let (bx0, by0, bx1, by1) = pixel_box(b, w, h);
        let (cx0, cy0) = (bx0.max(plan.x0), by0.max(plan.y0));
        let (cx1, cy1) = (bx1.min(plan.x0 + plan.w), by1.min(plan.y0 + plan.h));
        if cx0 >= cx1 || cy0 >= cy1 {
            continue;
        }
        let visible = ((cx1 - cx0) * (cy1 - cy0)) as f64 / ((bx1 - bx0) * (by1 - by0)).max(1) as f64;
        if visible < MIN_VISIBLE {
            continue;
        }
        let region = (
            first_out(cx0 - plan.x0, w, plan.w),
            first_out(cy0 - plan.y0, h, plan.h),
            first_out(cx1 - plan.x0, w, plan.w),
            first_out(cy1 - plan.y0, h, plan.h),
        );
        if let Some(t) = img.shape_bbox(region.0, region.1, region.2, region.3) {
            boxes.push(GroundTruthBox { rect: normalize(t, w, h), class_id: b.class_id });
        }
    }
    Sample { id: s.id.clone(), image: img, boxes }
}

/// Random horizontal flip (p = 0.5) then a random crop covering at least half the image,
/// resized back to full extent. Crops that keep no box are retried; after ten failures the
/// flipped sample is returned uncropped. Deterministic given `seed`.
pub fn augment(s: &Sample, seed: u64) -> Sample {
    let mut rng = rng_for(seed, &[0x6175_6731]);
    let base = if rng.gen_bool(0.5) { flip_horizontal(s) } else { s.clone() };
    let (w, h) = (s.image.width, s.image.height);
    for _ in 0..CROP_TRIES {
        let area = rng.gen_range(MIN_CROP_AREA..=1.0);
        let aspect: f64 = rng.gen_range(0.5f64.ln()..=2.0f64.ln()).exp();
        let cw = ((w as f64) * (area * aspect).sqrt()).round() as usize;
        let ch = ((h as f64) * (area / aspect).sqrt()).round() as usize;
        if cw == 0 || ch == 0 || cw > w || ch > h || ((cw * ch) as f64) < MIN_CROP_AREA * (w * h) as f64 {
            continue;
        }
        let plan = CropPlan { x0: rng.gen_range(0..=w - cw), y0: rng.gen_range(0..=h - ch), w: cw, h: ch };
        let out = crop_resize(&base, plan);
        if !out.boxes.is_empty() {
            return out;
        }
    }
    base
}
