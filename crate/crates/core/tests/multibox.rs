use dsod::arch::flatten_predictions;
use dsod::autograd::Graph;
use dsod::gradcheck::{max_rel_error, numeric_grad, FD_STEP, TOLERANCE};
use dsod::multibox::*;
use dsod::rng::rng_for;
use dsod::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn rect_strategy() -> impl Strategy<Value = Rect> {
    (0.0f32..0.9, 0.0f32..0.9, 0.01f32..0.5, 0.01f32..0.5)
        .prop_map(|(x, y, w, h)| Rect::new(x, y, (x + w).min(1.0), (y + h).min(1.0)))
}

fn random_rect(rng: &mut impl Rng) -> Rect {
    let (x, y) = (rng.gen_range(0.0..0.8f32), rng.gen_range(0.0..0.8f32));
    Rect::new(x, y, x + rng.gen_range(0.05..0.2f32), y + rng.gen_range(0.05..0.2f32))
}

proptest! {
    #[test]
    fn iou_symmetric_and_bounded(a in rect_strategy(), b in rect_strategy()) {
        let (x, y) = (iou(&a, &b), iou(&b, &a));
        prop_assert_eq!(x, y);
        prop_assert!((0.0..=1.0).contains(&x));
    }

    #[test]
    fn encode_decode_roundtrip(g in rect_strategy(), d in rect_strategy()) {
        let db = DefaultBox {
            cx: (d.xmin + d.xmax) / 2.0, cy: (d.ymin + d.ymax) / 2.0, w: d.width(), h: d.height(),
            scale_index: 0, row: 0, col: 0, anchor_index: 0,
        };
        let back = decode(&encode(&g, &db, VARIANCES), &db, VARIANCES);
        for (p, q) in [(back.xmin, g.xmin), (back.ymin, g.ymin), (back.xmax, g.xmax), (back.ymax, g.ymax)] {
            prop_assert!((p - q).abs() < 1e-6, "{p} vs {q}");
        }
    }

    #[test]
    fn mining_matches_sort_oracle(losses in prop::collection::vec(0u8..6, 1..40), pos_bits in prop::collection::vec(any::<bool>(), 40)) {
        let losses: Vec<f32> = losses.iter().map(|&v| v as f32 * 0.25).collect();
        let positive: Vec<bool> = pos_bits[..losses.len()].to_vec();
        let mask = hard_negative_mine(&losses, &positive, 3);
        let mut negs: Vec<usize> = (0..losses.len()).filter(|&i| !positive[i]).collect();
        negs.sort_by(|&a, &b| losses[b].partial_cmp(&losses[a]).unwrap().then(a.cmp(&b)));
        let keep = (3 * positive.iter().filter(|&&p| p).count()).min(negs.len());
        let mut expect = vec![false; losses.len()];
        for &i in &negs[..keep] {
            expect[i] = true;
        }
        prop_assert_eq!(mask, expect);
    }
}

/// Exhaustive reference for the matching post-conditions.
fn check_match_invariants(defaults: &[DefaultBox], gts: &[GroundTruthBox], m: &MatchAssignment) {
    let rects: Vec<Rect> = defaults.iter().map(DefaultBox::rect).collect();
    for (gi, _) in gts.iter().enumerate() {
        assert!(m.matched_gt.iter().any(|&x| x == Some(gi)), "gt {gi} has no positive");
    }
    let mut bipartite_only = vec![0usize; gts.len()];
    for (di, r) in rects.iter().enumerate() {
        let best = gts
            .iter()
            .enumerate()
            .map(|(gi, g)| (gi, iou(&g.rect, r)))
            .fold(None, |acc: Option<(usize, f32)>, (gi, v)| match acc {
                Some((_, b)) if b >= v => acc,
                _ => Some((gi, v)),
            });
        match m.matched_gt[di] {
            Some(gi) => {
                assert_eq!(m.labels[di], gts[gi].class_id);
                let (bg, bv) = best.unwrap();
                if !(bv >= IOU_THRESHOLD && bg == gi) {
                    bipartite_only[gi] += 1;
                }
            }
            None => {
                assert_eq!(m.labels[di], 0);
                if let Some((_, bv)) = best {
                    assert!(bv < IOU_THRESHOLD, "default {di} above threshold left background");
                }
            }
        }
    }
    // positives not explained by the threshold rule come from phase 1: at most one per gt
    assert!(bipartite_only.iter().all(|&c| c <= 1), "{bipartite_only:?}");
}

#[test]
fn match_invariants_on_random_instances() {
    let defaults = generate_default_boxes(&[4, 2, 1], &[4, 6, 4], S_MIN, S_MAX).unwrap();
    for case in 0..1000u64 {
        let mut rng = rng_for(17, &[case]);
        let gts: Vec<GroundTruthBox> = (0..rng.gen_range(0..5))
            .map(|_| GroundTruthBox { rect: random_rect(&mut rng), class_id: rng.gen_range(1..4) })
            .collect();
        let m = match_boxes(&defaults, &gts, IOU_THRESHOLD);
        check_match_invariants(&defaults, &gts, &m);
        assert_eq!(match_boxes(&defaults, &gts, IOU_THRESHOLD), m, "matching is not idempotent");
        assert!(m.num_positives() >= gts.len());
    }
}

#[test]
fn anchor_order_matches_head_flattening() {
    // each map value encodes (scale, row, col, anchor, coord) so the flattened row reveals its source
    let grids = [3usize, 2, 1];
    let anchors = [2usize, 3, 1];
    let k = 2;
    let boxes = generate_default_boxes(&grids, &anchors, S_MIN, S_MAX).unwrap();
    let code = |s: usize, r: usize, c: usize, a: usize, e: usize| (((s * 10 + r) * 10 + c) * 10 + a) * 10 + e;
    let mut g = Graph::new();
    let mut heads = Vec::new();
    for (s, (&gs, &a)) in grids.iter().zip(&anchors).enumerate() {
        let map = |width: usize| {
            let mut v = vec![0.0f32; width * a * gs * gs];
            for ch in 0..width * a {
                for r in 0..gs {
                    for c in 0..gs {
                        v[(ch * gs + r) * gs + c] = code(s, r, c, ch / width, ch % width) as f32;
                    }
                }
            }
            Tensor::new(&[1, width * a, gs, gs], v).unwrap()
        };
        let l = g.leaf(map(4));
        let c = g.leaf(map(k));
        heads.push((l, c));
    }
    let (loc, conf) = flatten_predictions(&mut g, &heads, k).unwrap();
    assert_eq!(g.shape(loc), [boxes.len(), 4]);
    for (i, b) in boxes.iter().enumerate() {
        for e in 0..4 {
            let want = code(b.scale_index, b.row, b.col, b.anchor_index, e) as f32;
            assert_eq!(g.value(loc).data()[i * 4 + e], want);
        }
        assert_eq!(g.value(conf).data()[i * k + 1], code(b.scale_index, b.row, b.col, b.anchor_index, 1) as f32);
    }
}

/// Independent double-precision multibox loss over one image.
fn reference_loss(loc: &[f64], conf: &[f64], k: usize, a: &MatchAssignment) -> f64 {
    let d = a.labels.len();
    let ce = |i: usize, l: usize| {
        let row = &conf[i * k..(i + 1) * k];
        let m = row.iter().cloned().fold(f64::MIN, f64::max);
        m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - row[l]
    };
    let pos: Vec<usize> = (0..d).filter(|&i| a.labels[i] > 0).collect();
    let mut negs: Vec<usize> = (0..d).filter(|&i| a.labels[i] == 0).collect();
    negs.sort_by(|&x, &y| ce(y, 0).partial_cmp(&ce(x, 0)).unwrap().then(x.cmp(&y)));
    negs.truncate(3 * pos.len());
    let conf_loss: f64 = pos.iter().map(|&i| ce(i, a.labels[i])).chain(negs.iter().map(|&i| ce(i, 0))).sum();
    let loc_loss: f64 = pos
        .iter()
        .flat_map(|&i| (0..4).map(move |e| (i, e)))
        .map(|(i, e)| {
            let diff = loc[i * 4 + e] - a.offsets[i][e] as f64;
            if diff.abs() < 1.0 {
                0.5 * diff * diff
            } else {
                diff.abs() - 0.5
            }
        })
        .sum();
    (conf_loss + loc_loss) / pos.len() as f64
}

#[test]
fn multibox_loss_passes_finite_difference_check() {
    let defaults = generate_default_boxes(&[3, 1], &[4, 4], S_MIN, S_MAX).unwrap();
    let k = 3;
    for seed in 0..3u64 {
        let mut rng = rng_for(seed, &[0x6d62]);
        let gts = [
            GroundTruthBox { rect: Rect::new(0.05, 0.1, 0.4, 0.45), class_id: 1 },
            GroundTruthBox { rect: Rect::new(0.5, 0.55, 0.95, 0.9), class_id: 2 },
        ];
        let a = match_boxes(&defaults, &gts, IOU_THRESHOLD);
        let d = defaults.len();
        // loc rows stay at least 0.05 from the |diff| = 1 seam
        let loc: Vec<f32> = (0..d * 4)
            .map(|j| {
                let t = a.offsets[j / 4][j % 4];
                let mag = if j % 2 == 0 { rng.gen_range(0.0..0.9f32) } else { rng.gen_range(1.1..2.0f32) };
                t + if rng.gen_bool(0.5) { mag } else { -mag }
            })
            .collect();
        let conf: Vec<f32> = (0..d * k).map(|_| rng.gen_range(-2.0..2.0f32)).collect();

        let mut g = Graph::new();
        let lv = g.leaf(Tensor::new(&[d, 4], loc.clone()).unwrap().with_grad());
        let cv = g.leaf(Tensor::new(&[d, k], conf.clone()).unwrap().with_grad());
        let (root, b) = multibox_loss(&mut g, lv, cv, std::slice::from_ref(&a), None).unwrap();
        let loc64: Vec<f64> = loc.iter().map(|&v| v as f64).collect();
        let conf64: Vec<f64> = conf.iter().map(|&v| v as f64).collect();
        assert!((b.total as f64 - reference_loss(&loc64, &conf64, k, &a)).abs() < 1e-5);
        g.backward(root).unwrap();

        let nl = numeric_grad(&|x: &[f64]| reference_loss(x, &conf64, k, &a), &loc64, FD_STEP);
        let nc = numeric_grad(&|x: &[f64]| reference_loss(&loc64, x, k, &a), &conf64, FD_STEP);
        let el = max_rel_error(g.grad(lv).unwrap(), &nl);
        let ec = max_rel_error(g.grad(cv).unwrap(), &nc);
        assert!(el < TOLERANCE && ec < TOLERANCE, "seed {seed}: loc {el}, conf {ec}");
    }
}

#[test]
fn batch_normalizer_composes_across_micro_batches() {
    let defaults = generate_default_boxes(&[2], &[4], S_MIN, S_MAX).unwrap();
    let gt = |x: f32| [GroundTruthBox { rect: Rect::new(x, 0.1, x + 0.4, 0.5), class_id: 1 }];
    let a0 = match_boxes(&defaults, &gt(0.05), IOU_THRESHOLD);
    let a1 = match_boxes(&defaults, &gt(0.5), IOU_THRESHOLD);
    let d = defaults.len();
    let mut rng = rng_for(3, &[]);
    let loc: Vec<f32> = (0..2 * d * 4).map(|_| rng.gen_range(-0.5..0.5f32)).collect();
    let conf: Vec<f32> = (0..2 * d * 2).map(|_| rng.gen_range(-1.0..1.0f32)).collect();

    let run = |rows: std::ops::Range<usize>, assigns: &[MatchAssignment], n: Option<f32>| {
        let mut g = Graph::new();
        let l = g.leaf(Tensor::new(&[rows.len(), 4], loc[rows.start * 4..rows.end * 4].to_vec()).unwrap());
        let c = g.leaf(Tensor::new(&[rows.len(), 2], conf[rows.start * 2..rows.end * 2].to_vec()).unwrap());
        multibox_loss(&mut g, l, c, assigns, n).unwrap().1
    };
    let whole = run(0..2 * d, &[a0.clone(), a1.clone()], None);
    let n = whole.num_positives as f32;
    let first = run(0..d, std::slice::from_ref(&a0), Some(n));
    let second = run(d..2 * d, std::slice::from_ref(&a1), Some(n));
    assert!((first.total + second.total - whole.total).abs() < 1e-5);
}
