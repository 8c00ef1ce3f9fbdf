//! Training: configuration, the step-decay schedule, gradient accumulation over
//! micro-batches, and the deterministic loop that writes the loss log and checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::arch::{scale_grids, ArchSpec, Model};
use crate::autograd::BnMode;
use crate::checkpoint::Checkpoint;
use crate::data::{augment, Dataset, Sample};
use crate::error::{Error, Result};
use crate::kv;
use crate::multibox::{generate_default_boxes, match_boxes, multibox_loss, DefaultBox, LossBreakdown, IOU_THRESHOLD, S_MAX, S_MIN};
use crate::optim::Sgd;
use crate::rng::{derive, rng_for};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f32 = 0.1;

/// How batch-norm layers behave during training steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnStats {
    /// Normalize each micro-batch by its own statistics and update running averages.
    Batch,
    /// Normalize by the running statistics and never update them.
    Frozen,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub arch: ArchSpec,
    pub base_lr: f32,
    pub lr_drop_every: usize,
    pub lr_drop_factor: f32,
    pub total_iters: usize,
    pub batch_size: usize,
    pub accum_steps: usize,
    pub momentum: f32,
    pub weight_decay: f32,
    pub seed: u64,
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    /// Save every this many iterations in addition to the end; 0 saves only at the end.
    pub checkpoint_every: usize,
    pub augment: bool,
    pub bn_stats: BnStats,
}

impl Default for TrainConfig {
    /// The desk-scale DSOD-tiny recipe on three synthetic shape classes.
    fn default() -> Self {
        TrainConfig {
            arch: ArchSpec::tiny(4),
            base_lr: 0.01,
            lr_drop_every: 1500,
            lr_drop_factor: 10.0,
            total_iters: 2000,
            batch_size: 8,
            accum_steps: 2,
            momentum: 0.9,
            weight_decay: 0.0005,
            seed: 1,
            dataset: PathBuf::from("data"),
            checkpoint: PathBuf::from("model.ckpt"),
            log: PathBuf::from("loss.csv"),
            checkpoint_every: 0,
            augment: true,
            bn_stats: BnStats::Batch,
        }
    }
}

impl TrainConfig {
    /// Applies one config entry; architecture keys are delegated to [`ArchSpec`].
    pub fn apply_entry(&mut self, e: &kv::Entry) -> Result<()> {
        if self.arch.apply_entry(e)? {
            return Ok(());
        }
        match e.key.as_str() {
            "base_lr" => self.base_lr = e.parse_value()?,
            "lr_drop_every" => self.lr_drop_every = e.parse_value()?,
            "lr_drop_factor" => self.lr_drop_factor = e.parse_value()?,
            "total_iters" => self.total_iters = e.parse_value()?,
            "batch_size" => self.batch_size = e.parse_value()?,
            "accum_steps" => self.accum_steps = e.parse_value()?,
            "momentum" => self.momentum = e.parse_value()?,
            "weight_decay" => self.weight_decay = e.parse_value()?,
            "seed" => self.seed = e.parse_value()?,
            "dataset" => self.dataset = PathBuf::from(&e.value),
            "checkpoint" => self.checkpoint = PathBuf::from(&e.value),
            "log" => self.log = PathBuf::from(&e.value),
            "checkpoint_every" => self.checkpoint_every = e.parse_value()?,
            "augment" => self.augment = e.parse_bool()?,
            "bn_stats" => {
                self.bn_stats = match e.value.as_str() {
                    "batch" => BnStats::Batch,
                    "frozen" => BnStats::Frozen,
                    other => return Err(e.error(format!("expected batch or frozen, got `{other}`"))),
                }
            }
            _ => return Err(e.error("unknown key")),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for e in kv::parse(text)? {
            self.apply_entry(&e)?;
        }
        Ok(())
    }

    pub fn from_config_text(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Every field as `key = value` text; parsing it reproduces the config.
    pub fn to_config_text(&self) -> String {
        let mut s = self.arch.to_config_text();
        let bn = match self.bn_stats {
            BnStats::Batch => "batch",
            BnStats::Frozen => "frozen",
        };
        let _ = write!(
            s,
            "base_lr = {}\nlr_drop_every = {}\nlr_drop_factor = {}\ntotal_iters = {}\nbatch_size = {}\naccum_steps = {}\n\
             momentum = {}\nweight_decay = {}\nseed = {}\ndataset = {}\ncheckpoint = {}\nlog = {}\n\
             checkpoint_every = {}\naugment = {}\nbn_stats = {bn}\n",
            self.base_lr,
            self.lr_drop_every,
            self.lr_drop_factor,
            self.total_iters,
            self.batch_size,
            self.accum_steps,
            self.momentum,
            self.weight_decay,
            self.seed,
            self.dataset.display(),
            self.checkpoint.display(),
            self.log.display(),
            self.checkpoint_every,
            self.augment,
        );
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let fail = |m: String| Err(Error::config(m));
        if self.batch_size == 0 || self.accum_steps == 0 || self.batch_size % self.accum_steps != 0 {
            return fail(format!("batch_size {} must be a positive multiple of accum_steps {}", self.batch_size, self.accum_steps));
        }
        if self.lr_drop_every == 0 || self.lr_drop_factor < 1.0 {
            return fail("lr_drop_every must be positive and lr_drop_factor at least 1".into());
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return fail(format!("base_lr {} invalid", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return fail("momentum must lie in [0, 1) and weight_decay be non-negative".into());
        }
        Ok(())
    }

    /// Learning rate for 0-based iteration `iter`: `base_lr / factor^⌊iter / drop_every⌋`.
    pub fn lr_at(&self, iter: usize) -> f32 {
        let drops = (iter / self.lr_drop_every) as i32;
        (self.base_lr as f64 / (self.lr_drop_factor as f64).powi(drops)) as f32
    }
}

pub fn default_boxes_for(spec: &ArchSpec) -> Result<Vec<DefaultBox>> {
    generate_default_boxes(&scale_grids(spec)?, &spec.anchors_per_scale, S_MIN, S_MAX)
}

/// Stacks sample images into a `[B, 3, S, S]` tensor.
pub fn batch_tensor(samples: &[&Sample]) -> Result<Tensor> {
    let first = samples.first().ok_or_else(|| Error::Usage("empty batch".into()))?;
    let (w, h) = (first.image.width, first.image.height);
    let mut data = Vec::with_capacity(samples.len() * 3 * w * h);
    for s in samples {
        if (s.image.width, s.image.height) != (w, h) {
            return Err(Error::data(format!("sample {} is {}x{}, batch is {w}x{h}", s.id, s.image.width, s.image.height)));
        }
        data.extend(s.image.to_chw());
    }
    Tensor::new(&[samples.len(), 3, h, w], data)
}

/// Sets every batch-norm running average to the exact statistics of `samples` in one pass.
///
/// Followed by [`BnStats::Frozen`] training this pins normalization to realistic values.
pub fn calibrate_bn(model: &mut Model, samples: &[Sample]) -> Result<()> {
    let refs: Vec<&Sample> = samples.iter().collect();
    model.forward(&batch_tensor(&refs)?, BnMode::Train { momentum: 1.0 }, false)?;
    Ok(())
}

/// Owns the model and optimizer state and applies accumulated SGD steps.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    opt: Sgd,
    defaults: Vec<DefaultBox>,
    iter: usize,
}

impl Trainer {
    /// A freshly initialized model for `cfg`.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut model = Model::new(&cfg.arch)?;
        model.initialize(cfg.seed);
        Self::with_model(cfg, model)
    }

    pub fn with_model(cfg: TrainConfig, model: Model) -> Result<Self> {
        cfg.validate()?;
        let defaults = default_boxes_for(&cfg.arch)?;
        let opt = Sgd::new(model.params(), cfg.momentum, cfg.weight_decay);
        Ok(Trainer { cfg, model, opt, defaults, iter: 0 })
    }

    pub fn iteration(&self) -> usize {
        self.iter
    }

    pub fn defaults(&self) -> &[DefaultBox] {
        &self.defaults
    }

    /// One optimizer step over `batch`, split into `accum_steps` equal micro-batches.
    ///
    /// Every micro-batch loss is normalized by the positive count of the whole batch, so the
    /// accumulated gradient equals the gradient of the combined-batch loss.
    pub fn step(&mut self, batch: &[Sample]) -> Result<LossBreakdown> {
        if batch.len() != self.cfg.batch_size {
            return Err(Error::Usage(format!("batch of {} samples, config says {}", batch.len(), self.cfg.batch_size)));
        }
        let assignments: Vec<_> = batch.iter().map(|s| match_boxes(&self.defaults, &s.boxes, IOU_THRESHOLD)).collect();
        let positives: usize = assignments.iter().map(|a| a.num_positives()).sum();
        let lr = self.cfg.lr_at(self.iter);
        let micro = self.cfg.batch_size / self.cfg.accum_steps;
        let mode = match self.cfg.bn_stats {
            BnStats::Batch => BnMode::Train { momentum: BN_MOMENTUM },
            BnStats::Frozen => BnMode::Infer,
        };
        let mut total = LossBreakdown::default();
        self.model.zero_grad();
        for (chunk, assigns) in batch.chunks(micro).zip(assignments.chunks(micro)) {
            let refs: Vec<&Sample> = chunk.iter().collect();
            let images = batch_tensor(&refs)?;
            let mut out = self.model.forward(&images, mode, true)?;
            let (root, b) = multibox_loss(&mut out.graph, out.loc, out.conf, assigns, Some(positives as f32))?;
            if !b.total.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at iteration {} (loc {}, conf {})",
                    self.iter + 1,
                    b.loc,
                    b.conf
                )));
            }
            self.model.backward(&mut out, root)?;
            total.loc += b.loc;
            total.conf += b.conf;
            total.total += b.total;
        }
        total.num_positives = positives;
        if let Some(bad) = self.model.params().iter().position(|p| p.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite()))) {
            return Err(Error::Numeric(format!(
                "non-finite gradient for `{}` at iteration {}",
                self.model.param_names()[bad],
                self.iter + 1
            )));
        }
        self.opt.step(self.model.params_mut(), lr);
        self.iter += 1;
        Ok(total)
    }
}

/// Deterministic sample order: a fresh seeded permutation of the dataset for every epoch.
pub struct BatchSchedule {
    seed: u64,
    n: usize,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSchedule {
    pub fn new(n: usize, seed: u64) -> Self {
        BatchSchedule { seed, n, epoch: 0, order: Vec::new(), cursor: 0 }
    }

    pub fn next_indices(&mut self, count: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            if self.cursor == self.order.len() {
                self.order = (0..self.n).collect();
                self.order.shuffle(&mut rng_for(self.seed, &[0x6570_6f63, self.epoch]));
                self.epoch += 1;
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

pub const LOG_HEADER: &str = "iter,lr,loss_loc,loss_conf,loss_total";

pub fn log_row(iter: usize, lr: f32, b: &LossBreakdown) -> String {
    format!("{iter},{lr},{:.6},{:.6},{:.6}", b.loc, b.conf, b.total)
}

/// Runs `cfg.total_iters` steps over `samples`, writing one log row per iteration.
///
/// `on_step` sees each iteration's loss and may stop training early by returning `false`.
pub fn train_on(
    trainer: &mut Trainer,
    samples: &[Sample],
    log: &mut dyn Write,
    mut on_step: impl FnMut(usize, &LossBreakdown) -> bool,
) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::data("training set is empty"));
    }
    let cfg = trainer.cfg.clone();
    let mut schedule = BatchSchedule::new(samples.len(), cfg.seed);
    let werr = |e: std::io::Error| Error::io(&cfg.log, e);
    writeln!(log, "{LOG_HEADER}").map_err(werr)?;
    for it in trainer.iteration()..cfg.total_iters {
        let idx = schedule.next_indices(cfg.batch_size);
        let batch: Vec<Sample> = idx
            .iter()
            .enumerate()
            .map(|(j, &i)| {
                if cfg.augment {
                    augment(&samples[i], derive(cfg.seed, &[0x6175_67, it as u64, j as u64]))
                } else {
                    samples[i].clone()
                }
            })
            .collect();
        let lr = cfg.lr_at(it);
        let b = trainer.step(&batch)?;
        writeln!(log, "{}", log_row(it + 1, lr, &b)).map_err(werr)?;
        if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 && it + 1 < cfg.total_iters {
            Checkpoint::from_model(&trainer.model, &cfg.to_config_text(), (it + 1) as u64).save(&cfg.checkpoint)?;
        }
        if !on_step(it + 1, &b) {
            break;
        }
    }
    log.flush().map_err(werr)?;
    Ok(())
}

/// Summary of a finished [`train`] run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub iterations: usize,
    pub losses: Vec<f32>,
}

/// Loads the dataset, trains, and writes the log CSV and the final checkpoint.
pub fn train(cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let data = Dataset::load(&cfg.dataset)?;
    if data.manifest.size != cfg.arch.input_size {
        return Err(Error::config(format!(
            "dataset images are {} px, architecture expects {}",
            data.manifest.size, cfg.arch.input_size
        )));
    }
    if data.manifest.num_classes() + 1 != cfg.arch.num_classes {
        return Err(Error::config(format!(
            "dataset has {} classes, architecture expects {} including background",
            data.manifest.num_classes(),
            cfg.arch.num_classes
        )));
    }
    let mut trainer = Trainer::new(cfg.clone())?;
    let mut log = Vec::new();
    let mut losses = Vec::new();
    let result = train_on(&mut trainer, &data.samples, &mut log, |it, b| {
        losses.push(b.total);
        if it % 50 == 0 {
            log::info!("iter {it}: loss {:.4} (loc {:.4}, conf {:.4})", b.total, b.loc, b.conf);
        }
        true
    });
    write_file(&cfg.log, &log)?;
    result?;
    Checkpoint::from_model(&trainer.model, &cfg.to_config_text(), trainer.iteration() as u64).save(&cfg.checkpoint)?;
    Ok(TrainReport { iterations: trainer.iteration(), losses })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
