//! Inference post-processing (softmax, decode, per-class NMS) and VOC 11-point mAP.

use std::cmp::Ordering;
use std::fmt::Write as _;

use crate::arch::Model;
use crate::autograd::BnMode;
use crate::data::{Image, Sample};
use crate::error::{Error, Result};
use crate::multibox::{decode, iou, DefaultBox, GroundTruthBox, Rect, IOU_THRESHOLD, VARIANCES};
use crate::tensor::Tensor;
use crate::train::default_boxes_for;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub rect: Rect,
    /// Foreground class, 1-based.
    pub class_id: usize,
    pub score: f32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InferConfig {
    pub conf_threshold: f32,
    pub nms_iou: f32,
    pub top_k: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig { conf_threshold: 0.01, nms_iou: 0.45, top_k: 200 }
    }
}

/// Greedy non-maximum suppression; returns kept indices in descending score order.
///
/// Equal scores are visited lower index first. A box is suppressed when its IoU with an
/// already kept box exceeds `iou_threshold`.
pub fn nms(boxes: &[Rect], scores: &[f32], iou_threshold: f32) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "nms needs one score per box");
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= iou_threshold) {
            kept.push(i);
        }
    }
    kept
}

/// Detections for one image from its raw head outputs (`loc` is `[N*4]`, `conf` is `[N*K]` logits).
pub fn postprocess(loc: &[f32], conf: &[f32], num_classes: usize, defaults: &[DefaultBox], cfg: &InferConfig) -> Vec<Detection> {
    let n = defaults.len();
    assert_eq!(loc.len(), n * 4);
    assert_eq!(conf.len(), n * num_classes);
    let probs: Vec<f32> = conf.chunks_exact(num_classes).flat_map(softmax).collect();
    let mut decoded: Vec<Option<Rect>> = vec![None; n];
    let mut dets = Vec::new();
    for c in 1..num_classes {
        let mut rects = Vec::new();
        let mut scores = Vec::new();
        for (a, d) in defaults.iter().enumerate() {
            let p = probs[a * num_classes + c];
            if p < cfg.conf_threshold {
                continue;
            }
            let r = *decoded[a].get_or_insert_with(|| decode(&loc[a * 4..a * 4 + 4], d, VARIANCES).clipped());
            if r.is_valid() {
                rects.push(r);
                scores.push(p);
            }
        }
        for k in nms(&rects, &scores, cfg.nms_iou) {
            dets.push(Detection { rect: rects[k], class_id: c, score: scores[k] });
        }
    }
    dets.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.class_id.cmp(&b.class_id)));
    dets.truncate(cfg.top_k);
    dets
}

fn softmax(logits: &[f32]) -> Vec<f32> {
    let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f32> = logits.iter().map(|&x| (x - m).exp()).collect();
    let s: f32 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Runs the model in inference mode over `images` and post-processes each one.
pub fn infer_batch(model: &mut Model, images: &[&Image], cfg: &InferConfig) -> Result<Vec<Vec<Detection>>> {
    let size = model.spec().input_size;
    let k = model.spec().num_classes;
    let mut data = Vec::with_capacity(images.len() * 3 * size * size);
    for img in images {
        if img.width != size || img.height != size {
            return Err(Error::Usage(format!("image is {}x{}, model expects {size}x{size}", img.width, img.height)));
        }
        data.extend(img.to_chw());
    }
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let defaults = default_boxes_for(model.spec())?;
    let out = model.forward(&Tensor::new(&[images.len(), 3, size, size], data)?, BnMode::Infer, false)?;
    let (loc, conf) = (out.graph.value(out.loc).data(), out.graph.value(out.conf).data());
    let n = defaults.len();
    Ok((0..images.len())
        .map(|i| postprocess(&loc[i * n * 4..(i + 1) * n * 4], &conf[i * n * k..(i + 1) * n * k], k, &defaults, cfg))
        .collect())
}

pub fn infer(model: &mut Model, image: &Image, cfg: &InferConfig) -> Result<Vec<Detection>> {
    Ok(infer_batch(model, &[image], cfg)?.pop().unwrap_or_default())
}

/// Mean over recall thresholds 0, 0.1, ..., 1 of the best precision reached at recall ≥ t.
pub fn voc_ap(recall: &[f64], precision: &[f64]) -> f64 {
    assert_eq!(recall.len(), precision.len());
    let mut sum = 0.0;
    for i in 0..=10 {
        let t = i as f64 / 10.0;
        sum += recall.iter().zip(precision).filter(|(r, _)| **r >= t).map(|(_, p)| *p).fold(0.0, f64::max);
    }
    sum / 11.0
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassAp {
    pub name: String,
    /// `None` when the class has no ground truth.
    pub ap: Option<f64>,
    pub num_gt: usize,
    pub num_detections: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub classes: Vec<ClassAp>,
    pub map: f64,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,ap\n");
        for c in &self.classes {
            match c.ap {
                Some(ap) => writeln!(s, "{},{ap:.6}", c.name),
                None => writeln!(s, "{},nan", c.name),
            }
            .unwrap();
        }
        writeln!(s, "mAP,{:.6}", self.map).unwrap();
        s
    }
}

fn rect_key(r: &Rect) -> [f32; 4] {
    [r.xmin, r.ymin, r.xmax, r.ymax]
}

/// Precision/recall staircase of one class, in evaluation order.
pub fn pr_curve(dets: &[(usize, Detection)], gts: &[Vec<GroundTruthBox>], class_id: usize) -> (Vec<f64>, Vec<f64>) {
    let npos: usize = gts.iter().map(|g| g.iter().filter(|b| b.class_id == class_id).count()).sum();
    let mut ds: Vec<&(usize, Detection)> = dets.iter().filter(|(_, d)| d.class_id == class_id).collect();
    ds.sort_by(|(ia, a), (ib, b)| {
        b.score.total_cmp(&a.score).then(ia.cmp(ib)).then_with(|| {
            rect_key(&a.rect).iter().zip(rect_key(&b.rect)).map(|(x, y)| x.total_cmp(&y)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
        })
    });
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::with_capacity(ds.len());
    let mut precision = Vec::with_capacity(ds.len());
    for (img, d) in ds {
        let best = gts[*img]
            .iter()
            .enumerate()
            .filter(|(_, g)| g.class_id == class_id)
            .map(|(j, g)| (j, iou(&g.rect, &d.rect)))
            .fold(None, |acc: Option<(usize, f32)>, (j, o)| if acc.is_none_or(|(_, bo)| o > bo) { Some((j, o)) } else { acc });
        match best {
            Some((j, o)) if o >= IOU_THRESHOLD && !used[*img][j] => {
                used[*img][j] = true;
                tp += 1;
            }
            _ => fp += 1,
        }
        recall.push(if npos == 0 { 0.0 } else { tp as f64 / npos as f64 });
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    (recall, precision)
}

/// Per-class AP and mAP of `dets` (image index, detection) against per-image ground truth.
///
/// Classes are `1..=class_names.len()`. A class without ground truth gets no AP and is left out
/// of the mean.
pub fn evaluate_detections(dets: &[(usize, Detection)], gts: &[Vec<GroundTruthBox>], class_names: &[String]) -> EvalReport {
    let mut classes = Vec::new();
    for (c, name) in class_names.iter().enumerate().map(|(i, n)| (i + 1, n)) {
        let num_gt = gts.iter().map(|g| g.iter().filter(|b| b.class_id == c).count()).sum();
        let num_detections = dets.iter().filter(|(_, d)| d.class_id == c).count();
        let ap = if num_gt == 0 {
            log::warn!("class `{name}` has no ground truth boxes; excluded from mAP");
            None
        } else {
            let (r, p) = pr_curve(dets, gts, c);
            Some(voc_ap(&r, &p))
        };
        classes.push(ClassAp { name: name.clone(), ap, num_gt, num_detections });
    }
    let defined: Vec<f64> = classes.iter().filter_map(|c| c.ap).collect();
    let map = if defined.is_empty() { 0.0 } else { defined.iter().sum::<f64>() / defined.len() as f64 };
    EvalReport { classes, map }
}

pub const EVAL_BATCH: usize = 8;

/// Detections for every sample, batched through the model.
pub fn detect_all(model: &mut Model, samples: &[Sample], cfg: &InferConfig) -> Result<Vec<Vec<Detection>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let imgs: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
        out.extend(infer_batch(model, &imgs, cfg)?);
    }
    Ok(out)
}

pub fn evaluate(model: &mut Model, samples: &[Sample], class_names: &[String]) -> Result<EvalReport> {
    if class_names.len() + 1 != model.spec().num_classes {
        return Err(Error::config(format!(
            "dataset has {} classes, model predicts {} including background",
            class_names.len(),
            model.spec().num_classes
        )));
    }
    let per_image = detect_all(model, samples, &InferConfig::default())?;
    let dets: Vec<(usize, Detection)> =
        per_image.into_iter().enumerate().flat_map(|(i, ds)| ds.into_iter().map(move |d| (i, d))).collect();
    let gts: Vec<Vec<GroundTruthBox>> = samples.iter().map(|s| s.boxes.clone()).collect();
    Ok(evaluate_detections(&dets, &gts, class_names))
}
