use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dsod::arch::{shape_trace, ArchSpec};
use dsod::checkpoint::Checkpoint;
use dsod::data::{generate_dataset, read_ppm, Dataset, CLASS_NAMES};
use dsod::eval::{evaluate, infer, InferConfig};
use dsod::gradcheck::{grad_check, OPS, TOLERANCE};
use dsod::kv::{self, Entry};
use dsod::train::{train, TrainConfig};
use dsod::{Error, Result};

/// DSOD detectors trained from scratch: architecture tools, synthetic data, training and evaluation.
#[derive(Parser, Debug)]
#[command(name = "dsod", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the layer-by-layer shape trace CSV and the total parameter count.
    Describe(DescribeArgs),
    /// Check every differentiable operator against a 64-bit finite-difference oracle.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic shapes dataset (PPM images, annotations, manifest).
    GenData(GenDataArgs),
    /// Train a detector; flags override values from --config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset and print per-class AP and mAP as CSV.
    Eval(EvalArgs),
    /// Run one image through a checkpoint and print its detections.
    Detect(DetectArgs),
}

#[derive(Args, Debug, Default)]
struct ArchFlags {
    /// Architecture string `DS/A-B-k-θ`, for example DS/64-192-48-1.
    #[arg(long)]
    arch: Option<String>,
    /// Dense layers per block, comma separated.
    #[arg(long)]
    blocks: Option<String>,
    /// Square input extent in pixels.
    #[arg(long)]
    input: Option<String>,
    /// Prediction structure: plain or dense.
    #[arg(long)]
    pred: Option<String>,
    /// Number of classes including background.
    #[arg(long)]
    classes: Option<String>,
    /// Number of prediction scales.
    #[arg(long)]
    num_scales: Option<String>,
    /// Channels of the scales after the first: one value or one per scale.
    #[arg(long)]
    scale_channels: Option<String>,
    /// Default boxes per cell: one value or one per scale.
    #[arg(long)]
    anchors: Option<String>,
    /// Use the three-conv stem (true) or a single 7x7 conv (false).
    #[arg(long)]
    stem: Option<String>,
    /// Insert transition layers without pooling (true) or stop after three blocks (false).
    #[arg(long)]
    transition_wo_pooling: Option<String>,
}

impl ArchFlags {
    /// Overrides in the order they must be applied: the scale count resets per-scale lists.
    fn entries(&self) -> Vec<Entry> {
        [
            ("arch", &self.arch),
            ("block_layers", &self.blocks),
            ("input_size", &self.input),
            ("prediction_style", &self.pred),
            ("num_classes", &self.classes),
            ("use_stem", &self.stem),
            ("use_transition_wo_pooling", &self.transition_wo_pooling),
            ("num_scales", &self.num_scales),
            ("scale_channels", &self.scale_channels),
            ("anchors_per_scale", &self.anchors),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.as_ref().map(|v| Entry::flag(k, v)))
        .collect()
    }
}

#[derive(Args, Debug)]
struct DescribeArgs {
    /// Architecture config file with `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    arch: ArchFlags,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Operator name, or `all`.
    #[arg(long, default_value = "all")]
    op: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Number of images.
    #[arg(long)]
    n: usize,
    /// Number of foreground classes (1 to 3).
    #[arg(long, default_value_t = 3)]
    classes: usize,
    /// Image extent in pixels.
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training config file with `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    arch: ArchFlags,
    #[arg(long)]
    base_lr: Option<String>,
    #[arg(long)]
    lr_drop_every: Option<String>,
    #[arg(long)]
    lr_drop_factor: Option<String>,
    /// Total number of optimizer steps.
    #[arg(long)]
    iters: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    accum_steps: Option<String>,
    #[arg(long)]
    momentum: Option<String>,
    #[arg(long)]
    weight_decay: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: Option<String>,
    /// Checkpoint output path.
    #[arg(long)]
    ckpt: Option<String>,
    /// Loss log CSV path.
    #[arg(long)]
    log: Option<String>,
    #[arg(long)]
    checkpoint_every: Option<String>,
    /// Random flip and crop augmentation (true or false).
    #[arg(long)]
    augment: Option<String>,
    /// Batch-norm statistics during training: batch or frozen.
    #[arg(long)]
    bn_stats: Option<String>,
}

impl TrainArgs {
    fn entries(&self) -> Vec<Entry> {
        let mut out = self.arch.entries();
        let rest = [
            ("base_lr", &self.base_lr),
            ("lr_drop_every", &self.lr_drop_every),
            ("lr_drop_factor", &self.lr_drop_factor),
            ("total_iters", &self.iters),
            ("batch_size", &self.batch_size),
            ("accum_steps", &self.accum_steps),
            ("momentum", &self.momentum),
            ("weight_decay", &self.weight_decay),
            ("seed", &self.seed),
            ("dataset", &self.data),
            ("checkpoint", &self.ckpt),
            ("log", &self.log),
            ("checkpoint_every", &self.checkpoint_every),
            ("augment", &self.augment),
            ("bn_stats", &self.bn_stats),
        ];
        out.extend(rest.into_iter().filter_map(|(k, v)| v.as_ref().map(|v| Entry::flag(k, v))));
        out
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Also write the CSV to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DetectArgs {
    /// Binary PPM image of the model's input size.
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    conf_threshold: f32,
    #[arg(long, default_value_t = 0.45)]
    nms_iou: f32,
    #[arg(long, default_value_t = 200)]
    top_k: usize,
}

/// Writes to stdout; a reader that closed the pipe early is not an error.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::io("<stdout>", e)),
        _ => Ok(()),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn describe(args: &DescribeArgs) -> Result<()> {
    let mut spec = ArchSpec::default();
    let mut entries = match &args.config {
        Some(p) => kv::parse(&read_text(p)?)?,
        None => Vec::new(),
    };
    entries.extend(args.arch.entries());
    for e in &entries {
        if !spec.apply_entry(e)? {
            return Err(e.error("unknown key"));
        }
    }
    spec.validate()?;
    emit(&shape_trace(&spec)?.to_csv())
}

fn gradcheck(args: &GradcheckArgs) -> Result<()> {
    let ops: Vec<&str> = if args.op == "all" { OPS.to_vec() } else { vec![args.op.as_str()] };
    let mut failed = Vec::new();
    for op in ops {
        let r = grad_check(op, args.seed)?;
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        emit(&format!("{op} seed={} elements={} max_rel_error={:.3e} {verdict}\n", r.seed, r.elements, r.max_rel_error))?;
        if !r.passed() {
            failed.push(op);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("gradient check above {TOLERANCE:e} for {}", failed.join(", "))))
    }
}

fn train_cmd(args: &TrainArgs) -> Result<()> {
    let mut cfg = TrainConfig::default();
    if let Some(p) = &args.config {
        cfg.apply_text(&read_text(p)?)?;
    }
    for e in args.entries() {
        cfg.apply_entry(&e)?;
    }
    cfg.validate()?;
    let report = train(&cfg)?;
    let last = report.losses.last().map(|l| format!("{l:.6}")).unwrap_or_else(|| "n/a".into());
    emit(&format!(
        "trained {} iterations, final loss {last}, checkpoint {}, log {}\n",
        report.iterations,
        cfg.checkpoint.display(),
        cfg.log.display()
    ))
}

fn eval_cmd(args: &EvalArgs) -> Result<()> {
    let mut model = Checkpoint::load(&args.ckpt)?.to_model()?;
    let data = Dataset::load(&args.data)?;
    let report = evaluate(&mut model, &data.samples, &data.manifest.classes)?;
    let csv = report.to_csv();
    if let Some(out) = &args.out {
        fs::write(out, &csv).map_err(|e| Error::io(out, e))?;
    }
    emit(&csv)
}

fn detect(args: &DetectArgs) -> Result<()> {
    let mut model = Checkpoint::load(&args.ckpt)?.to_model()?;
    let image = read_ppm(&args.image)?;
    let cfg = InferConfig { conf_threshold: args.conf_threshold, nms_iou: args.nms_iou, top_k: args.top_k };
    let mut text = String::new();
    for d in infer(&mut model, &image, &cfg)? {
        let class = CLASS_NAMES.get(d.class_id - 1).map(|s| s.to_string()).unwrap_or_else(|| d.class_id.to_string());
        let r = d.rect;
        let _ = writeln!(text, "{class} {:.6} {:.6} {:.6} {:.6} {:.6}", d.score, r.xmin, r.ymin, r.xmax, r.ymax);
    }
    emit(&text)
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("DSOD_THREADS") else { return Ok(()) };
    let n: usize = raw.trim().parse().map_err(|_| Error::Usage(format!("DSOD_THREADS must be a count, got `{raw}`")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Usage(format!("cannot size thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match &cli.command {
        Command::Describe(a) => describe(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::GenData(a) => {
            let m = generate_dataset(a.n, a.classes, a.size, a.seed, &a.out)?;
            emit(&format!(
                "wrote {} images of {}x{} with classes {} to {}\n",
                m.samples,
                m.size,
                m.size,
                m.classes.join(","),
                a.out.display()
            ))
        }
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Detect(a) => detect(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
