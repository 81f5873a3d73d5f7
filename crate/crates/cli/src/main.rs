//! `dynamo`: data generation, training, evaluation and self-checks for
//! dynamic motion filter networks.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::json;

use dynamo::data::{diff_image, export_pgm, gen_synthetic, load_dataset, save_dataset, GenSpec, Placement};
use dynamo::eval::{compare_runs, evaluate, identity_baseline, MetricsReport};
use dynamo::gradcheck::{run_suite_seeds, DEFAULT_EPS, TOLERANCE};
use dynamo::model::{forward, load_model, save_model, ForwardOptions, ModelParams, NetworkConfig};
use dynamo::trainer::{pretrain, train_joint, TrainConfig, TrainMode, TrainRun};
use dynamo::{Dataset, HuberMode, LossConfig, Reduction};

#[derive(Parser, Debug)]
#[command(name = "dynamo", version, about = "Dynamic motion filters learned by next-frame prediction")]
struct Cli {
    /// Worker threads (0 = one per core). Never changes output bytes.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Drop timestamps from log lines.
    #[arg(long, global = true)]
    deterministic_logs: bool,
    /// Root of every random stream.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic moving-sprite dataset.
    GenData(GenDataArgs),
    /// Frame-prediction pretraining (no labels used).
    Pretrain(PretrainArgs),
    /// Joint frame-prediction and classification training.
    Train(TrainArgs),
    /// Accuracy, SSIM and PSNR of a model on a dataset.
    Eval(EvalArgs),
    /// Export ground truth, prediction and residual frames of one clip as PGM.
    Predict(PredictArgs),
    /// Finite-difference gradient check of every differentiable op.
    GradCheck(GradCheckArgs),
    /// Difference of two evaluation reports on the same dataset.
    Compare(CompareArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 800)]
    clips: usize,
    /// Input frames per clip; one extra future frame is stored.
    #[arg(long, default_value_t = 16)]
    t: usize,
    #[arg(long, default_value_t = 32)]
    h: usize,
    #[arg(long, default_value_t = 32)]
    w: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,2")]
    speeds: Vec<u32>,
    #[arg(long, default_value_t = 4)]
    size_min: usize,
    #[arg(long, default_value_t = 8)]
    size_max: usize,
    #[arg(long, value_enum, default_value_t = PlacementArg::Auto)]
    placement: PlacementArg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PlacementArg {
    Symmetric,
    Directional,
    Auto,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum HuberArg {
    PerPixel,
    FrameNorm,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ReductionArg {
    Mean,
    FrameSum,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Joint,
    ClsOnly,
}

#[derive(Args, Debug)]
struct NetworkArgs {
    #[arg(long, default_value_t = 5)]
    filter_size: usize,
    #[arg(long, default_value_t = 512)]
    dmr_dim: usize,
    #[arg(long, default_value_t = 64)]
    ar_dim: usize,
    #[arg(long, value_delimiter = ',', default_value = "8,16")]
    trunk_channels: Vec<usize>,
}

#[derive(Args, Debug)]
struct OptimArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output model file.
    #[arg(long)]
    out: PathBuf,
    /// JSON-lines epoch trace; stdout when omitted.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Start from this model instead of a fresh initialization.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    /// Fractions of training after which the learning rate drops 10x.
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.75")]
    milestones: Vec<f64>,
    #[arg(long, default_value_t = 0.01)]
    delta: f64,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long, value_enum, default_value_t = HuberArg::PerPixel)]
    huber_mode: HuberArg,
    #[arg(long, value_enum, default_value_t = ReductionArg::FrameSum)]
    reduction: ReductionArg,
    #[command(flatten)]
    network: NetworkArgs,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    optim: OptimArgs,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, value_enum, default_value_t = ModeArg::Joint)]
    mode: ModeArg,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, required_unless_present = "identity", conflicts_with = "identity")]
    model: Option<PathBuf>,
    /// Score the identity-filter baseline instead of a model.
    #[arg(long)]
    identity: bool,
    #[arg(long)]
    data: PathBuf,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    clip: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    /// Number of seeds derived from --seed.
    #[arg(long, default_value_t = 1)]
    seeds: usize,
    #[arg(long, default_value_t = DEFAULT_EPS)]
    eps: f64,
}

#[derive(Args, Debug)]
struct CompareArgs {
    a: PathBuf,
    b: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Validation(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Io(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Validation(m) | Failure::Io(m) => m,
        }
    }
}

impl From<dynamo::Error> for Failure {
    fn from(e: dynamo::Error) -> Self {
        use dynamo::Error as E;
        match e {
            E::Io(_) | E::BadMagic { .. } | E::UnsupportedVersion(_) | E::Truncated(_) | E::Malformed(_) => {
                Failure::Io(e.to_string())
            }
            _ => Failure::Validation(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn read_report(path: &Path) -> Result<MetricsReport, Failure> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("plain data serializes")
}

fn echo_config(command: &str, cli: &Cli, config: serde_json::Value) {
    let full = json!({
        "command": command,
        "seed": cli.seed,
        "threads": cli.threads,
        "deterministic_logs": cli.deterministic_logs,
        "config": config,
    });
    info!("resolved config {}", full);
}

fn gen_data(cli: &Cli, a: &GenDataArgs) -> Result<(), Failure> {
    let spec = GenSpec {
        num_clips: a.clips,
        frames: a.t,
        height: a.h,
        width: a.w,
        num_classes: a.classes,
        speeds: a.speeds.clone(),
        size_min: a.size_min,
        size_max: a.size_max,
        placement: match a.placement {
            PlacementArg::Symmetric => Placement::Symmetric,
            PlacementArg::Directional => Placement::Directional,
            PlacementArg::Auto => Placement::Auto,
        },
        seed: cli.seed,
    };
    echo_config("gen-data", cli, json!({ "spec": spec, "out": a.out }));
    let placement = spec.resolve_placement()?;
    info!("placement {placement:?}");
    let ds = gen_synthetic(&spec)?;
    save_dataset(&ds, &a.out)?;
    info!("wrote {} clips to {}", ds.len(), a.out.display());
    Ok(())
}

fn train_config(cli: &Cli, o: &OptimArgs, beta: f64, mode: TrainMode) -> TrainConfig {
    TrainConfig {
        lr: o.lr,
        momentum: o.momentum,
        weight_decay: o.weight_decay,
        batch_size: o.batch_size,
        epochs: o.epochs,
        loss: LossConfig {
            delta: o.delta,
            alpha: o.alpha,
            beta,
            huber_mode: match o.huber_mode {
                HuberArg::PerPixel => HuberMode::PerPixel,
                HuberArg::FrameNorm => HuberMode::FrameNorm,
            },
            reduction: match o.reduction {
                ReductionArg::Mean => Reduction::Mean,
                ReductionArg::FrameSum => Reduction::FrameSum,
            },
        },
        mode,
        milestones: o.milestones.clone(),
        seed: cli.seed,
    }
}

fn initial_params(cli: &Cli, o: &OptimArgs, data: &Dataset) -> Result<ModelParams<f32>, Failure> {
    if let Some(path) = &o.init {
        info!("initializing from {}", path.display());
        return Ok(load_model(path)?);
    }
    let h = &data.header;
    let config = NetworkConfig {
        frames: data.frames(),
        height: h.height,
        width: h.width,
        filter_size: o.network.filter_size,
        dmr_dim: o.network.dmr_dim,
        ar_dim: o.network.ar_dim,
        trunk_channels: o.network.trunk_channels.clone(),
        num_classes: h.num_classes,
        seed: cli.seed,
    };
    Ok(ModelParams::init(&config)?)
}

fn run_training(cli: &Cli, name: &str, o: &OptimArgs, cfg: TrainConfig) -> Result<(), Failure> {
    cfg.validate()?;
    let data = load_dataset(&o.data)?;
    let params = initial_params(cli, o, &data)?;
    echo_config(
        name,
        cli,
        json!({
            "data": o.data,
            "out": o.out,
            "trace": o.trace,
            "init": o.init,
            "network": params.config(),
            "train": cfg,
        }),
    );
    let run: TrainRun<f32> = if cfg.mode == TrainMode::Pretrain {
        pretrain(params, &data, &cfg)?
    } else {
        train_joint(params, &data, &cfg)?
    };
    if let Some(l) = run.first_batch_loss_cls {
        info!("first-batch loss_cls before any update {l}");
    }
    let mut lines = String::new();
    for r in &run.trace {
        lines.push_str(&to_json(r));
        lines.push('\n');
    }
    match &o.trace {
        Some(path) => write_file(path, lines.as_bytes())?,
        None => print!("{lines}"),
    }
    save_model(&run.params, &o.out)?;
    info!("wrote model to {}", o.out.display());
    Ok(())
}

fn eval(cli: &Cli, a: &EvalArgs) -> Result<(), Failure> {
    echo_config("eval", cli, json!({ "model": a.model, "identity": a.identity, "data": a.data, "out": a.out }));
    let data = load_dataset(&a.data)?;
    let report = match &a.model {
        Some(path) => evaluate(&load_model(path)?, &data)?,
        None => identity_baseline(&data)?,
    };
    let text = to_json(&report);
    println!("{text}");
    if let Some(out) = &a.out {
        write_file(out, format!("{text}\n").as_bytes())?;
    }
    Ok(())
}

fn predict(cli: &Cli, a: &PredictArgs) -> Result<(), Failure> {
    echo_config("predict", cli, json!({ "model": a.model, "data": a.data, "clip": a.clip, "out_dir": a.out_dir }));
    let params = load_model(&a.model)?;
    let data = load_dataset(&a.data)?;
    let clip = data
        .clips
        .get(a.clip)
        .ok_or_else(|| Failure::Validation(format!("clip {} out of range for {} clips", a.clip, data.len())))?;
    let t = data.frames();
    let input = clip.frames.slice_leading(0, t)?;
    let fw = forward(&params, &input, &ForwardOptions { classify: false, trainable: None })?;
    let predicted = fw.output().predicted;
    fs::create_dir_all(&a.out_dir).map_err(|e| io_err(&a.out_dir, e))?;
    for i in 0..t {
        let gt = clip.frames.slice_leading(i + 1, i + 2)?;
        let pred = predicted.slice_leading(i, i + 1)?;
        let diff = diff_image(&pred, &gt)?;
        export_pgm(&gt, a.out_dir.join(format!("gt_{i:02}.pgm")))?;
        export_pgm(&pred, a.out_dir.join(format!("pred_{i:02}.pgm")))?;
        export_pgm(&diff, a.out_dir.join(format!("diff_{i:02}.pgm")))?;
    }
    info!("wrote {} frame triples to {}", t, a.out_dir.display());
    Ok(())
}

/// Returns whether every check passed.
fn grad_check(cli: &Cli, a: &GradCheckArgs) -> Result<bool, Failure> {
    echo_config("grad-check", cli, json!({ "seeds": a.seeds, "eps": a.eps, "tolerance": TOLERANCE }));
    if a.seeds == 0 {
        return Err(Failure::Validation("--seeds must be positive".into()));
    }
    let checks = run_suite_seeds(cli.seed, a.seeds, a.eps)?;
    let mut out = std::io::stdout().lock();
    let mut ok = true;
    for c in &checks {
        ok &= c.passed();
        writeln!(
            out,
            "{:<44} {:.3e} checked {:>4} excluded {:>3} {}",
            c.name,
            c.max_rel_error,
            c.checked,
            c.excluded,
            if c.passed() { "ok" } else { "FAIL" }
        )
        .map_err(|e| Failure::Io(e.to_string()))?;
    }
    let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    writeln!(out, "worst {worst:.3e} tolerance {TOLERANCE:e} {}", if ok { "PASS" } else { "FAIL" })
        .map_err(|e| Failure::Io(e.to_string()))?;
    Ok(ok)
}

fn compare(cli: &Cli, a: &CompareArgs) -> Result<(), Failure> {
    echo_config("compare", cli, json!({ "a": a.a, "b": a.b, "out": a.out }));
    let cmp = compare_runs(&read_report(&a.a)?, &read_report(&a.b)?)?;
    let text = to_json(&cmp);
    println!("{text}");
    if let Some(out) = &a.out {
        write_file(out, format!("{text}\n").as_bytes())?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<bool, Failure> {
    match &cli.command {
        Command::GenData(a) => gen_data(cli, a)?,
        Command::Pretrain(a) => {
            let cfg = train_config(cli, &a.optim, 0.0, TrainMode::Pretrain);
            run_training(cli, "pretrain", &a.optim, cfg)?
        }
        Command::Train(a) => {
            let mode = match a.mode {
                ModeArg::Joint => TrainMode::Joint,
                ModeArg::ClsOnly => TrainMode::ClsOnly,
            };
            let cfg = train_config(cli, &a.optim, a.beta, mode);
            run_training(cli, "train", &a.optim, cfg)?
        }
        Command::Eval(a) => eval(cli, a)?,
        Command::Predict(a) => predict(cli, a)?,
        Command::GradCheck(a) => return grad_check(cli, a),
        Command::Compare(a) => compare(cli, a)?,
    }
    Ok(true)
}

fn init_logging(deterministic: bool) {
    let mut b = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"));
    if deterministic {
        b.format_timestamp(None);
    }
    b.init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    init_logging(cli.deterministic_logs);
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
