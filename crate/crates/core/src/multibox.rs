//! Default boxes, ground-truth matching, offset coding, hard negative mining and the
//! multibox loss.
//!
//! Boxes are in normalized image coordinates. The global default-box order is scale-major,
//! then row, column and anchor, matching [`crate::arch::flatten_predictions`].

use crate::autograd::{log_sum_exp, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const S_MIN: f32 = 0.2;
pub const S_MAX: f32 = 0.9;
pub const IOU_THRESHOLD: f32 = 0.5;
pub const NEG_POS_RATIO: usize = 3;
pub const VARIANCES: [f32; 4] = [0.1, 0.1, 0.2, 0.2];

/// Axis-aligned box in corner form.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub xmin: f32,
    pub ymin: f32,
    pub xmax: f32,
    pub ymax: f32,
}

impl Rect {
    pub fn new(xmin: f32, ymin: f32, xmax: f32, ymax: f32) -> Self {
        Rect { xmin, ymin, xmax, ymax }
    }

    pub fn width(&self) -> f32 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f32 {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> f32 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.xmin < self.xmax && self.ymin < self.ymax
    }

    pub fn clipped(&self) -> Rect {
        let c = |v: f32| v.clamp(0.0, 1.0);
        Rect::new(c(self.xmin), c(self.ymin), c(self.xmax), c(self.ymax))
    }
}

/// Intersection over union; 0 for disjoint or empty boxes.
pub fn iou(a: &Rect, b: &Rect) -> f32 {
    let iw = (a.xmax.min(b.xmax) - a.xmin.max(b.xmin)).max(0.0);
    let ih = (a.ymax.min(b.ymax) - a.ymin.max(b.ymin)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 || inter <= 0.0 {
        0.0
    } else {
        (inter / union).min(1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DefaultBox {
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
    pub scale_index: usize,
    pub row: usize,
    pub col: usize,
    pub anchor_index: usize,
}

impl DefaultBox {
    pub fn rect(&self) -> Rect {
        Rect::new(self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.cx + self.w / 2.0, self.cy + self.h / 2.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruthBox {
    pub rect: Rect,
    /// 1-based; 0 is background.
    pub class_id: usize,
}

/// Box shapes `(scale, aspect)` of one cell. Anchor `j` uses, in order: unit aspect at `s`,
/// unit aspect at `√(s·s_next)`, then aspects 2, 1/2, 3, 1/3.
fn cell_shapes(s: f64, s_next: f64, anchors: usize) -> Vec<(f64, f64)> {
    let all = [(s, 1.0), ((s * s_next).sqrt(), 1.0), (s, 2.0), (s, 0.5), (s, 3.0), (s, 1.0 / 3.0)];
    all[..anchors].to_vec()
}

/// Default boxes for a feature pyramid; `grids[i]` is the square extent of scale `i`.
pub fn generate_default_boxes(grids: &[usize], anchors: &[usize], s_min: f32, s_max: f32) -> Result<Vec<DefaultBox>> {
    if grids.len() != anchors.len() || grids.is_empty() {
        return Err(Error::config(format!("{} grid sizes for {} anchor counts", grids.len(), anchors.len())));
    }
    if let Some(&a) = anchors.iter().find(|&&a| a == 0 || a > crate::arch::MAX_ANCHORS) {
        return Err(Error::config(format!("anchor count {a} outside 1..={}", crate::arch::MAX_ANCHORS)));
    }
    let m = grids.len();
    let (lo, hi) = (s_min as f64, s_max as f64);
    let step = if m > 1 { (hi - lo) / (m - 1) as f64 } else { hi - lo };
    let scale = |i: usize| lo + step * i as f64;
    let mut out = Vec::with_capacity(grids.iter().zip(anchors).map(|(g, a)| g * g * a).sum());
    for (si, (&g, &a)) in grids.iter().zip(anchors).enumerate() {
        let shapes = cell_shapes(scale(si), scale(si + 1), a);
        for row in 0..g {
            for col in 0..g {
                let cx = (col as f64 + 0.5) / g as f64;
                let cy = (row as f64 + 0.5) / g as f64;
                for (anchor_index, &(s, r)) in shapes.iter().enumerate() {
                    let (w, h) = (s * r.sqrt(), s / r.sqrt());
                    let c = |v: f64| v.clamp(0.0, 1.0);
                    let (x0, y0) = (c(cx - w / 2.0), c(cy - h / 2.0));
                    let (x1, y1) = (c(cx + w / 2.0), c(cy + h / 2.0));
                    out.push(DefaultBox {
                        cx: ((x0 + x1) / 2.0) as f32,
                        cy: ((y0 + y1) / 2.0) as f32,
                        w: (x1 - x0) as f32,
                        h: (y1 - y0) as f32,
                        scale_index: si,
                        row,
                        col,
                        anchor_index,
                    });
                }
            }
        }
    }
    Ok(out)
}

pub fn encode(gt: &Rect, d: &DefaultBox, v: [f32; 4]) -> [f32; 4] {
    let (gcx, gcy) = ((gt.xmin + gt.xmax) / 2.0, (gt.ymin + gt.ymax) / 2.0);
    [
        (gcx - d.cx) / (d.w * v[0]),
        (gcy - d.cy) / (d.h * v[1]),
        (gt.width() / d.w).ln() / v[2],
        (gt.height() / d.h).ln() / v[3],
    ]
}

pub fn decode(o: &[f32], d: &DefaultBox, v: [f32; 4]) -> Rect {
    let cx = d.cx + o[0] * v[0] * d.w;
    let cy = d.cy + o[1] * v[1] * d.h;
    let w = d.w * (o[2] * v[2]).exp();
    let h = d.h * (o[3] * v[3]).exp();
    Rect::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
}

/// Per-default-box targets for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchAssignment {
    /// Matched class per default box, 0 for background.
    pub labels: Vec<usize>,
    pub matched_gt: Vec<Option<usize>>,
    /// Encoded offsets; zero for background boxes.
    pub offsets: Vec<[f32; 4]>,
}

impl MatchAssignment {
    pub fn num_positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l > 0).count()
    }
}

/// Bipartite-best then threshold matching.
///
/// Phase 1 repeatedly takes the highest-IoU pair among unassigned ground truths and
/// unassigned defaults (ties: lower ground-truth index, then lower default index), so every
/// ground truth owns a distinct default while defaults last. Phase 2 gives each remaining
/// default its best ground truth if that IoU reaches `threshold`.
pub fn match_boxes(defaults: &[DefaultBox], gts: &[GroundTruthBox], threshold: f32) -> MatchAssignment {
    let n = defaults.len();
    let mut a = MatchAssignment { labels: vec![0; n], matched_gt: vec![None; n], offsets: vec![[0.0; 4]; n] };
    if gts.is_empty() {
        return a;
    }
    let rects: Vec<Rect> = defaults.iter().map(DefaultBox::rect).collect();
    let table: Vec<Vec<f32>> = gts.iter().map(|g| rects.iter().map(|r| iou(&g.rect, r)).collect()).collect();

    let mut gt_done = vec![false; gts.len()];
    for _ in 0..gts.len().min(n) {
        let mut best: Option<(usize, usize, f32)> = None;
        for (gi, row) in table.iter().enumerate() {
            if gt_done[gi] {
                continue;
            }
            for (di, &v) in row.iter().enumerate() {
                if a.matched_gt[di].is_none() && best.is_none_or(|(_, _, b)| v > b) {
                    best = Some((gi, di, v));
                }
            }
        }
        let (gi, di, _) = best.expect("an unassigned pair remains");
        gt_done[gi] = true;
        a.matched_gt[di] = Some(gi);
    }
    for di in 0..n {
        if a.matched_gt[di].is_some() {
            continue;
        }
        let mut best: Option<(usize, f32)> = None;
        for (gi, row) in table.iter().enumerate() {
            if best.is_none_or(|(_, b)| row[di] > b) {
                best = Some((gi, row[di]));
            }
        }
        if let Some((gi, v)) = best {
            if v >= threshold {
                a.matched_gt[di] = Some(gi);
            }
        }
    }
    for di in 0..n {
        if let Some(gi) = a.matched_gt[di] {
            a.labels[di] = gts[gi].class_id;
            a.offsets[di] = encode(&gts[gi].rect, &defaults[di], VARIANCES);
        }
    }
    a
}

/// Picks the `ratio · positives` highest-loss background boxes, ties going to lower indices.
pub fn hard_negative_mine(conf_losses: &[f32], positive: &[bool], ratio: usize) -> Vec<bool> {
    let num_pos = positive.iter().filter(|&&p| p).count();
    let mut negs: Vec<usize> = (0..conf_losses.len()).filter(|&i| !positive[i]).collect();
    let keep = (ratio * num_pos).min(negs.len());
    let mut mask = vec![false; conf_losses.len()];
    if keep == 0 {
        return mask;
    }
    let order = |&a: &usize, &b: &usize| conf_losses[b].total_cmp(&conf_losses[a]).then(a.cmp(&b));
    if keep < negs.len() {
        negs.select_nth_unstable_by(keep - 1, order);
        negs.truncate(keep);
    }
    for i in negs {
        mask[i] = true;
    }
    mask
}

/// Loss terms after normalization by the positive count.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub loc: f32,
    pub conf: f32,
    pub total: f32,
    pub num_positives: usize,
}

/// `(CE(positives ∪ mined negatives) + smoothL1(positives)) / N` over a batch.
///
/// `loc` is `[B·D, 4]` and `conf` is `[B·D, K]` in default-box order with one assignment per
/// image. `N` is `normalizer` when given, else the batch positive count. With no positives the
/// returned node is a constant zero.
pub fn multibox_loss(
    g: &mut Graph,
    loc: Var,
    conf: Var,
    assignments: &[MatchAssignment],
    normalizer: Option<f32>,
) -> Result<(Var, LossBreakdown)> {
    let d = assignments.first().map_or(0, |a| a.labels.len());
    let rows = assignments.len() * d;
    let k = g.shape(conf).get(1).copied().unwrap_or(0);
    if g.shape(loc) != [rows, 4] || g.shape(conf) != [rows, k] || assignments.iter().any(|a| a.labels.len() != d) {
        return Err(Error::config(format!(
            "predictions {:?} / {:?} do not match {} images × {d} default boxes",
            g.shape(loc),
            g.shape(conf),
            assignments.len()
        )));
    }
    let logits = g.value(conf).data();
    let mut conf_rows = Vec::new();
    let mut conf_labels = Vec::new();
    let mut loc_rows = Vec::new();
    let mut loc_targets = Vec::new();
    for (b, a) in assignments.iter().enumerate() {
        let positive: Vec<bool> = a.labels.iter().map(|&l| l > 0).collect();
        let bg_loss: Vec<f32> = (0..d)
            .map(|i| {
                let row = &logits[(b * d + i) * k..(b * d + i + 1) * k];
                log_sum_exp(row) - row[0]
            })
            .collect();
        let mined = hard_negative_mine(&bg_loss, &positive, NEG_POS_RATIO);
        for i in 0..d {
            if positive[i] || mined[i] {
                conf_rows.push(b * d + i);
                conf_labels.push(a.labels[i]);
            }
            if positive[i] {
                loc_rows.push(b * d + i);
                loc_targets.extend_from_slice(&a.offsets[i]);
            }
        }
    }
    let num_positives = loc_rows.len();
    let n = normalizer.unwrap_or(num_positives as f32);
    if num_positives == 0 || n <= 0.0 {
        let zero = g.leaf(Tensor::scalar(0.0));
        return Ok((zero, LossBreakdown { num_positives, ..LossBreakdown::default() }));
    }
    let picked = g.gather_rows(conf, &conf_rows)?;
    let ce = g.softmax_cross_entropy(picked, &conf_labels)?;
    let picked = g.gather_rows(loc, &loc_rows)?;
    let l1 = g.smooth_l1(picked, &loc_targets)?;
    let sum = g.add(ce, l1)?;
    let total = g.scale(sum, 1.0 / n);
    let breakdown = LossBreakdown {
        loc: g.value(l1).data()[0] / n,
        conf: g.value(ce).data()[0] / n,
        total: g.value(total).data()[0],
        num_positives,
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dbox(cx: f32, cy: f32, w: f32, h: f32) -> DefaultBox {
        DefaultBox { cx, cy, w, h, scale_index: 0, row: 0, col: 0, anchor_index: 0 }
    }

    #[test]
    fn box_counts() {
        let ssd = generate_default_boxes(&[38, 19, 10, 5, 3, 1], &[4, 6, 6, 6, 4, 4], S_MIN, S_MAX).unwrap();
        assert_eq!(ssd.len(), 8732);
        let tiny = generate_default_boxes(&[16, 8, 4, 2], &[4, 6, 4, 4], S_MIN, S_MAX).unwrap();
        assert_eq!(tiny.len(), 1488);
        let one = generate_default_boxes(&[1], &[1], S_MIN, S_MAX).unwrap();
        assert_eq!((one[0].cx, one[0].cy), (0.5, 0.5));
        assert!(generate_default_boxes(&[4, 2], &[4], S_MIN, S_MAX).is_err());
    }

    #[test]
    fn default_box_geometry() {
        let b = generate_default_boxes(&[2, 1], &[6, 4], S_MIN, S_MAX).unwrap();
        // first scale, cell (0, 0): s = 0.2, extra box √(0.2·0.9)
        assert!((b[0].w - 0.2).abs() < 1e-6 && (b[0].cx - 0.25).abs() < 1e-6);
        assert!((b[1].w - (0.18f32).sqrt()).abs() < 1e-6);
        assert!((b[2].w / b[2].h - 2.0).abs() < 1e-5);
        assert!((b[4].w / b[4].h - 3.0).abs() < 1e-5);
        assert_eq!((b[6].row, b[6].col, b[6].anchor_index), (0, 1, 0));
        for x in &b {
            let r = x.rect();
            assert!(r.xmin >= -1e-6 && r.xmax <= 1.0 + 1e-6 && x.w > 0.0 && x.h > 0.0);
        }
    }

    #[test]
    fn iou_examples() {
        let a = Rect::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &Rect::new(3.0, 3.0, 4.0, 4.0)), 0.0);
        assert!((iou(&a, &Rect::new(1.0, 0.0, 3.0, 2.0)) - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn encode_examples() {
        let d = dbox(0.5, 0.5, 0.2, 0.2);
        assert!(encode(&d.rect(), &d, VARIANCES).iter().all(|v| v.abs() < 1e-5));
        let o = encode(&Rect::new(0.3, 0.4, 0.7, 0.6), &d, VARIANCES);
        assert!((o[2] - 3.4657).abs() < 1e-3);
        let back = decode(&o, &d, VARIANCES);
        assert!((back.xmin - 0.3).abs() < 1e-6 && (back.ymax - 0.6).abs() < 1e-6);
    }

    #[test]
    fn matching_examples() {
        let defaults = vec![dbox(0.25, 0.25, 0.5, 0.5), dbox(0.75, 0.25, 0.5, 0.5), dbox(0.25, 0.75, 0.5, 0.5), dbox(0.75, 0.75, 0.5, 0.5)];
        let exact = GroundTruthBox { rect: defaults[1].rect(), class_id: 2 };
        let m = match_boxes(&defaults, &[exact], IOU_THRESHOLD);
        assert_eq!(m.labels, vec![0, 2, 0, 0]);
        assert!(m.offsets[1].iter().all(|v| v.abs() < 1e-5));

        let small = GroundTruthBox { rect: Rect::new(0.6, 0.6, 0.7, 0.7), class_id: 1 };
        let m = match_boxes(&defaults, &[small], IOU_THRESHOLD);
        assert_eq!(m.labels, vec![0, 0, 0, 1]);

        let two = [
            GroundTruthBox { rect: Rect::new(0.0, 0.0, 0.4, 0.4), class_id: 1 },
            GroundTruthBox { rect: Rect::new(0.6, 0.6, 1.0, 1.0), class_id: 3 },
        ];
        let m = match_boxes(&defaults, &two, IOU_THRESHOLD);
        assert_eq!(m.matched_gt, vec![Some(0), None, None, Some(1)]);

        assert_eq!(match_boxes(&defaults, &[], IOU_THRESHOLD).num_positives(), 0);
    }

    #[test]
    fn competing_ground_truths_get_distinct_defaults() {
        let defaults = vec![dbox(0.5, 0.5, 0.4, 0.4), dbox(0.5, 0.5, 0.8, 0.8)];
        let g = |r| GroundTruthBox { rect: r, class_id: 1 };
        let gts = [g(Rect::new(0.3, 0.3, 0.7, 0.7)), g(Rect::new(0.32, 0.32, 0.7, 0.7))];
        let m = match_boxes(&defaults, &gts, IOU_THRESHOLD);
        assert_eq!(m.matched_gt, vec![Some(0), Some(1)]);
    }

    #[test]
    fn mining_examples() {
        let losses = [0.5, 0.1, 0.9, 0.3, 0.7, 0.2, 0.8, 0.4, 0.6];
        let mut pos = [false; 9];
        pos[0] = true;
        pos[2] = true;
        let m = hard_negative_mine(&losses, &pos, 3);
        let chosen: Vec<usize> = (0..9).filter(|&i| m[i]).collect();
        assert_eq!(chosen, vec![3, 4, 5, 6, 7, 8]);

        let flat = [1.0f32; 10];
        let mut pos = [false; 10];
        pos[9] = true;
        let m = hard_negative_mine(&flat, &pos, 3);
        assert_eq!((0..10).filter(|&i| m[i]).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(hard_negative_mine(&flat, &[false; 10], 3).iter().all(|&x| !x));
    }

    #[test]
    fn toy_loss_by_hand() {
        // 3 defaults, 1 gt matched to default 0; 3:1 mining keeps both negatives
        let defaults = vec![dbox(0.25, 0.5, 0.5, 1.0), dbox(0.75, 0.5, 0.5, 1.0), dbox(0.5, 0.5, 0.1, 0.1)];
        let gt = GroundTruthBox { rect: Rect::new(0.0, 0.0, 0.5, 1.0), class_id: 1 };
        let a = match_boxes(&defaults, &[gt], IOU_THRESHOLD);
        assert_eq!(a.labels, vec![1, 0, 0]);
        let mut g = Graph::new();
        let loc = g.leaf(Tensor::new(&[3, 4], vec![0.5, -2.0, 0.0, 0.0, 9.0, 9.0, 9.0, 9.0, 1.0, 1.0, 1.0, 1.0]).unwrap());
        let conf = g.leaf(Tensor::new(&[3, 2], vec![0.0, 1.0, 2.0, 0.0, 0.0, 0.0]).unwrap());
        let (_, b) = multibox_loss(&mut g, loc, conf, &[a], None).unwrap();
        let ce = |row: [f64; 2], l: usize| (row[0].exp() + row[1].exp()).ln() - row[l];
        let conf_sum = ce([0.0, 1.0], 1) + ce([2.0, 0.0], 0) + ce([0.0, 0.0], 0);
        let loc_sum = 0.5 * 0.25 + 1.5;
        assert!((b.conf as f64 - conf_sum).abs() < 1e-6);
        assert!((b.loc as f64 - loc_sum).abs() < 1e-6);
        assert_eq!(b.num_positives, 1);
    }

    #[test]
    fn perfect_predictions_leave_only_conf_residual() {
        let defaults = vec![dbox(0.25, 0.5, 0.5, 1.0), dbox(0.75, 0.5, 0.5, 1.0)];
        let gt = GroundTruthBox { rect: Rect::new(0.05, 0.1, 0.45, 0.9), class_id: 1 };
        let a = match_boxes(&defaults, &[gt], IOU_THRESHOLD);
        let mut loc = Vec::new();
        for o in &a.offsets {
            loc.extend_from_slice(o);
        }
        let mut g = Graph::new();
        let loc = g.leaf(Tensor::new(&[2, 4], loc).unwrap());
        let conf = g.leaf(Tensor::new(&[2, 2], vec![-20.0, 20.0, 20.0, -20.0]).unwrap());
        let (_, b) = multibox_loss(&mut g, loc, conf, &[a], None).unwrap();
        assert!(b.loc < 1e-10);
        assert!(b.conf < 1e-12 + 1e-7);
    }

    #[test]
    fn zero_positives_give_zero_loss() {
        let defaults = vec![dbox(0.5, 0.5, 0.2, 0.2)];
        let a = match_boxes(&defaults, &[], IOU_THRESHOLD);
        let mut g = Graph::new();
        let loc = g.leaf(Tensor::zeros(&[1, 4]).with_grad());
        let conf = g.leaf(Tensor::zeros(&[1, 3]).with_grad());
        let (root, b) = multibox_loss(&mut g, loc, conf, &[a], None).unwrap();
        assert_eq!(b.total, 0.0);
        g.backward(root).unwrap();
    }

    #[test]
    fn length_mismatch_is_config_error() {
        let defaults = vec![dbox(0.5, 0.5, 0.2, 0.2)];
        let a = match_boxes(&defaults, &[], IOU_THRESHOLD);
        let mut g = Graph::new();
        let loc = g.leaf(Tensor::zeros(&[2, 4]));
        let conf = g.leaf(Tensor::zeros(&[2, 3]));
        assert!(matches!(multibox_loss(&mut g, loc, conf, &[a], None), Err(Error::Config(_))));
    }
}
