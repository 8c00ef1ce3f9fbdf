use dsod::arch::{ArchSpec, Model};
use dsod::checkpoint::Checkpoint;
use dsod::data::{generate_sample, Image, Sample};
use dsod::eval::{evaluate_detections, infer, infer_batch, nms, pr_curve, voc_ap, Detection, InferConfig};
use dsod::multibox::{iou, GroundTruthBox, Rect};
use dsod::train::{calibrate_bn, train, train_on, BnStats, TrainConfig, Trainer};
use dsod::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn samples(n: u64, seed: u64) -> Vec<Sample> {
    (0..n).map(|i| generate_sample(i, 3, 128, seed)).collect()
}

fn max_rel_diff(a: &Model, b: &Model) -> f32 {
    let mut worst = 0.0f32;
    for (pa, pb) in a.params().iter().zip(b.params()) {
        for (&x, &y) in pa.data().iter().zip(pb.data()) {
            worst = worst.max((x - y).abs() / x.abs().max(y.abs()).max(1e-3));
        }
    }
    worst
}

#[test]
fn xavier_init_statistics() {
    let mut m = Model::new(&ArchSpec::default()).unwrap();
    m.initialize(5);
    let w = m.param("stem.3.conv.weight").unwrap();
    assert_eq!(w.shape(), &[128, 64, 3, 3]);
    let n = w.len() as f64;
    let mean = w.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = w.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let expected = 2.0 / ((64 + 128) * 9) as f64;
    assert!((var / expected - 1.0).abs() < 0.1, "variance {var} vs {expected}");
    let bound = (6.0 / ((64 + 128) * 9) as f64).sqrt() as f32;
    assert!(w.data().iter().all(|v| v.abs() <= bound));

    for (name, p) in m.param_names().iter().zip(m.params()) {
        if name.ends_with("l2norm.scale") {
            assert!(p.data().iter().all(|&v| v == 20.0), "{name}");
        }
        if name.ends_with(".bias") || name.ends_with(".beta") {
            assert!(p.data().iter().all(|&v| v == 0.0), "{name}");
        }
        if name.ends_with(".gamma") {
            assert!(p.data().iter().all(|&v| v == 1.0), "{name}");
        }
    }
    let mut again = Model::new(&ArchSpec::default()).unwrap();
    again.initialize(5);
    assert!(m.params().iter().zip(again.params()).all(|(a, b)| a.data() == b.data()));
}

#[test]
fn accumulation_matches_combined_batch() {
    let data = samples(16, 3);
    let base = TrainConfig { total_iters: 6, batch_size: 4, base_lr: 0.001, bn_stats: BnStats::Frozen, ..TrainConfig::default() };
    let mut two = Trainer::new(TrainConfig { accum_steps: 2, ..base.clone() }).unwrap();
    let mut one = Trainer::new(TrainConfig { accum_steps: 1, ..base }).unwrap();
    calibrate_bn(&mut two.model, &data[..8]).unwrap();
    calibrate_bn(&mut one.model, &data[..8]).unwrap();
    let mut la = Vec::new();
    let mut lb = Vec::new();
    train_on(&mut two, &data, &mut la, |_, _| true).unwrap();
    train_on(&mut one, &data, &mut lb, |_, _| true).unwrap();
    let d = max_rel_diff(&two.model, &one.model);
    assert_eq!(d, 0.0, "accumulated and combined steps diverged");
}

#[test]
fn batch_stats_mode_updates_running_averages() {
    let data = samples(4, 3);
    let cfg = TrainConfig { total_iters: 1, batch_size: 4, ..TrainConfig::default() };
    let mut t = Trainer::new(cfg).unwrap();
    train_on(&mut t, &data, &mut Vec::new(), |_, _| true).unwrap();
    assert!(t.model.bn_states().iter().any(|s| s.running_mean.iter().any(|&m| m != 0.0)));
}

#[test]
fn training_is_deterministic_and_logs_rows() {
    let data = samples(10, 4);
    let cfg = TrainConfig { total_iters: 4, batch_size: 4, ..TrainConfig::default() };
    let run = || {
        let mut t = Trainer::new(cfg.clone()).unwrap();
        let mut log = Vec::new();
        train_on(&mut t, &data, &mut log, |_, _| true).unwrap();
        (String::from_utf8(log).unwrap(), Checkpoint::from_model(&t.model, "", 4).to_bytes())
    };
    let (log, ck) = run();
    assert_eq!(run(), (log.clone(), ck));
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "iter,lr,loss_loc,loss_conf,loss_total");
    assert_eq!(lines.len(), 5);
    let first: Vec<f32> = lines[1].split(',').map(|f| f.parse().unwrap()).collect();
    assert_eq!(first[0], 1.0);
    assert_eq!(first[1], 0.01);
    assert!(first[4].is_finite() && first[4] > 0.0);
    assert!((first[2] + first[3] - first[4]).abs() < 1e-4 * first[4]);
}

#[test]
fn zero_iterations_saves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("data");
    dsod::data::generate_dataset(4, 3, 128, 1, &ds).unwrap();
    let cfg = TrainConfig {
        total_iters: 0,
        seed: 9,
        dataset: ds,
        checkpoint: dir.path().join("out/init.ck"),
        log: dir.path().join("out/loss.csv"),
        ..TrainConfig::default()
    };
    let report = train(&cfg).unwrap();
    assert_eq!(report.iterations, 0);
    let saved = Checkpoint::load(&cfg.checkpoint).unwrap();
    let mut fresh = Model::new(&cfg.arch).unwrap();
    fresh.initialize(9);
    assert_eq!(saved, Checkpoint::from_model(&fresh, &cfg.to_config_text(), 0));
    assert_eq!(std::fs::read_to_string(&cfg.log).unwrap(), "iter,lr,loss_loc,loss_conf,loss_total\n");
}

#[test]
fn dataset_arch_mismatch_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    dsod::data::generate_dataset(2, 2, 128, 1, dir.path()).unwrap();
    let cfg = TrainConfig { dataset: dir.path().to_path_buf(), ..TrainConfig::default() };
    assert!(matches!(train(&cfg), Err(Error::Config(_))));
    let missing = TrainConfig { dataset: dir.path().join("nope"), ..TrainConfig::default() };
    assert_eq!(train(&missing).unwrap_err().exit_code(), 2);
}

#[test]
fn non_finite_loss_aborts_with_numeric_error() {
    let cfg = TrainConfig { batch_size: 2, ..TrainConfig::default() };
    let mut model = Model::new(&cfg.arch).unwrap();
    model.initialize(1);
    let shape = model.param("head1.conf.bias").unwrap().shape().to_vec();
    model.set_param("head1.conf.bias", &shape, vec![f32::NAN; shape.iter().product()]).unwrap();
    let mut t = Trainer::with_model(cfg, model).unwrap();
    let err = t.step(&samples(2, 1)).unwrap_err();
    assert!(matches!(err, Error::Numeric(ref m) if m.contains("iteration 1")), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn checkpoint_reload_reproduces_detections() {
    let data = samples(6, 8);
    let cfg = TrainConfig { total_iters: 3, batch_size: 2, ..TrainConfig::default() };
    let mut t = Trainer::new(cfg.clone()).unwrap();
    train_on(&mut t, &data, &mut Vec::new(), |_, _| true).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ck");
    let ck = Checkpoint::from_model(&t.model, &cfg.to_config_text(), 3);
    ck.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.to_bytes(), std::fs::read(&path).unwrap());
    let mut back = loaded.to_model().unwrap();
    assert_eq!(Checkpoint::from_model(&back, &loaded.config_text, 3).to_bytes(), ck.to_bytes());
    let imgs: Vec<&Image> = data.iter().map(|s| &s.image).collect();
    let before = infer_batch(&mut t.model, &imgs, &InferConfig::default()).unwrap();
    let after = infer_batch(&mut back, &imgs, &InferConfig::default()).unwrap();
    assert_eq!(before, after);
}

#[test]
fn infer_contract_on_untrained_model() {
    let mut m = Model::new(&ArchSpec::tiny(4)).unwrap();
    m.initialize(2);
    let s = generate_sample(0, 3, 128, 1);
    let cfg = InferConfig { conf_threshold: 0.99, ..InferConfig::default() };
    for d in infer(&mut m, &s.image, &cfg).unwrap() {
        assert!(d.rect.is_valid() && (1..4).contains(&d.class_id));
        assert!((0.99..=1.0).contains(&d.score));
    }
    let dets = infer(&mut m, &s.image, &InferConfig::default()).unwrap();
    assert!(dets.len() <= 200);
    assert!(dets.windows(2).all(|w| w[0].score >= w[1].score));
    let small = Image::new(64, 64);
    assert!(matches!(infer(&mut m, &small, &InferConfig::default()), Err(Error::Usage(_))));
}

/// Reference suppression: repeatedly take the best remaining box and discard everything overlapping it.
fn nms_oracle(boxes: &[Rect], scores: &[f32], thr: f32) -> Vec<usize> {
    let mut alive: Vec<usize> = (0..boxes.len()).collect();
    let mut kept = Vec::new();
    while !alive.is_empty() {
        let mut best = 0;
        for j in 1..alive.len() {
            let (a, b) = (alive[j], alive[best]);
            if scores[a] > scores[b] || (scores[a] == scores[b] && a < b) {
                best = j;
            }
        }
        let pick = alive.remove(best);
        kept.push(pick);
        alive.retain(|&i| iou(&boxes[pick], &boxes[i]) <= thr);
    }
    kept
}

#[test]
fn nms_matches_oracle_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for case in 0..1000 {
        let boxes: Vec<Rect> = (0..10)
            .map(|_| {
                let (x, y) = (rng.gen_range(0.0..0.7f32), rng.gen_range(0.0..0.7f32));
                Rect::new(x, y, x + rng.gen_range(0.05..0.3f32), y + rng.gen_range(0.05..0.3f32))
            })
            .collect();
        // A coarse score grid forces ties.
        let scores: Vec<f32> = (0..10).map(|_| rng.gen_range(0..6) as f32 / 5.0).collect();
        let kept = nms(&boxes, &scores, 0.45);
        assert_eq!(kept, nms_oracle(&boxes, &scores, 0.45), "case {case}");
        for (i, &a) in kept.iter().enumerate() {
            for &b in &kept[i + 1..] {
                assert!(iou(&boxes[a], &boxes[b]) <= 0.45);
            }
        }
    }
}

fn gt(xmin: f32, ymin: f32, xmax: f32, ymax: f32) -> GroundTruthBox {
    GroundTruthBox { rect: Rect::new(xmin, ymin, xmax, ymax), class_id: 1 }
}

fn det(rect: Rect, score: f32) -> Detection {
    Detection { rect, class_id: 1, score }
}

/// Four ground truths over three images and ten scored detections.
///
/// By descending score the detections are TP, FP (duplicate), TP, FP (wrong place), FP (low IoU),
/// TP, FP, FP (duplicate), FP, FP; one ground truth is never found.
fn fixture() -> (Vec<(usize, Detection)>, Vec<Vec<GroundTruthBox>>) {
    let gts = vec![
        vec![gt(0.1, 0.1, 0.4, 0.4), gt(0.5, 0.5, 0.9, 0.9)],
        vec![gt(0.2, 0.2, 0.6, 0.6)],
        vec![gt(0.0, 0.0, 0.3, 0.5)],
    ];
    let shifted = Rect::new(0.25, 0.25, 0.65, 0.65);
    let dets = vec![
        (0, det(gts[0][0].rect, 0.95)),
        (0, det(Rect::new(0.11, 0.1, 0.4, 0.41), 0.9)),
        (1, det(shifted, 0.85)),
        (2, det(Rect::new(0.6, 0.6, 0.9, 0.9), 0.8)),
        (0, det(Rect::new(0.5, 0.5, 0.62, 0.62), 0.7)),
        (0, det(gts[0][1].rect, 0.6)),
        (1, det(Rect::new(0.7, 0.0, 1.0, 0.2), 0.5)),
        (1, det(gts[1][0].rect, 0.4)),
        (2, det(Rect::new(0.5, 0.0, 0.8, 0.5), 0.3)),
        (0, det(Rect::new(0.0, 0.6, 0.3, 0.9), 0.2)),
    ];
    (dets, gts)
}

#[test]
fn voc_ap_hand_computed_staircase() {
    let (dets, gts) = fixture();
    let (recall, precision) = pr_curve(&dets, &gts, 1);
    assert_eq!(recall, vec![0.25, 0.25, 0.5, 0.5, 0.5, 0.75, 0.75, 0.75, 0.75, 0.75]);
    let p: Vec<f64> = [(1, 1), (1, 2), (2, 3), (2, 4), (2, 5), (3, 6), (3, 7), (3, 8), (3, 9), (3, 10)]
        .iter()
        .map(|&(a, b)| a as f64 / b as f64)
        .collect();
    assert_eq!(precision, p);
    // t ∈ {0, .1, .2} → 1; t ∈ {.3, .4, .5} → 2/3; t ∈ {.6, .7} → 1/2; t ∈ {.8, .9, 1} → 0.
    let expected = (1.0 + 1.0 + 1.0 + 2.0 / 3.0 + 2.0 / 3.0 + 2.0 / 3.0 + 0.5 + 0.5) / 11.0;
    assert_eq!(voc_ap(&recall, &precision), expected);
    assert!((expected - 6.0 / 11.0).abs() < 1e-15);
    let report = evaluate_detections(&dets, &gts, &["shape".to_string()]);
    assert_eq!(report.map, expected);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn evaluation_ignores_input_order(seed in any::<u64>()) {
        let (mut dets, gts) = fixture();
        let names = ["shape".to_string()];
        let reference = evaluate_detections(&dets, &gts, &names);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Duplicate a detection so equal-score ties appear too.
        dets.push(dets[rng.gen_range(0..dets.len())]);
        let with_dup = evaluate_detections(&dets, &gts, &names);
        use rand::seq::SliceRandom;
        dets.shuffle(&mut rng);
        prop_assert_eq!(&evaluate_detections(&dets, &gts, &names), &with_dup);
        prop_assert!(with_dup.map <= reference.map);
    }
}
