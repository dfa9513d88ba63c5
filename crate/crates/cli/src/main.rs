use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use s3po::checkpoint::{self, Checkpoint};
use s3po::datakit::{
    self, apply_split, make_lr_pairs, prepare, synthetic_clip, write_frames, DatasetManifest,
    PrepareOptions, Split, SyntheticKind,
};
use s3po::degrade::{DegradationConfig, DegradationMode};
use s3po::metrics::{si_ti, MetricConfig};
use s3po::model::{Model, ModelConfig};
use s3po::report::{
    bicubic_baseline, evaluate_dirs, read_clips, render_report, write_csv, ModelResults,
    ReportBundle, BASELINE_NAME,
};
use s3po::resample::Padding;
use s3po::trainer::{Stage, TrainConfig, Trainer, TrainingClip};
use s3po::S3poError;

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "s3po", version, about = "Super-resolution for equirectangular 360° video")]
struct Cli {
    /// Seed for initialization, shuffling and splitting.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// JSON file with optional `model`, `train`, `degradation`, `metrics` and
    /// `prepare` sections. Command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Cap, resize and store source clips as a dataset.
    Prepare(PrepareArgs),
    /// Randomly assign clips to the train and test splits.
    Split(SplitArgs),
    /// Generate LR frames for every clip of a dataset.
    Degrade(DegradeArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Super-resolve LR clips with a checkpoint.
    Infer(InferArgs),
    /// Score predicted clips against references.
    Evaluate(EvaluateArgs),
    /// Spatial and temporal information of clips.
    Siti(SitiArgs),
    /// Render tables and plots from evaluation bundles.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct RootArg {
    /// Dataset root.
    #[arg(long, env = "S3PO_DATA_ROOT")]
    root: PathBuf,
}

#[derive(Args, Debug)]
struct PrepareArgs {
    /// Directory with one subdirectory of numbered frames per clip.
    #[arg(long)]
    input: PathBuf,
    /// Dataset root to write.
    #[arg(long, env = "S3PO_DATA_ROOT")]
    output: PathBuf,
    #[arg(long)]
    max_frames: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[command(flatten)]
    root: RootArg,
    #[arg(long, default_value_t = 45)]
    test_count: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Bi,
    Bd,
}

impl From<ModeArg> for DegradationMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Bi => DegradationMode::Bi,
            ModeArg::Bd => DegradationMode::Bd,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PadArg {
    Wrap,
    Reflect,
}

#[derive(Args, Debug)]
struct DegradeArgs {
    #[command(flatten)]
    root: RootArg,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    scale: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    kernel: Option<usize>,
    #[arg(long, value_enum)]
    pad_h: Option<PadArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StageArg {
    Pretrain,
    Adapt,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset root with LR pairs. Not needed with `--synthetic`.
    #[arg(long, env = "S3PO_DATA_ROOT")]
    root: Option<PathBuf>,
    /// Checkpoint directory to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "adapt")]
    stage: StageArg,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Initialize weights from this checkpoint.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Continue the session stored in `--init`, including optimizer state.
    #[arg(long, requires = "init")]
    resume: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_decay_every: Option<usize>,
    /// Smooth-L1 threshold.
    #[arg(long)]
    beta: Option<f64>,
    /// Detach the recurrent state every N steps.
    #[arg(long)]
    truncation: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    /// Train on N generated clips instead of a dataset.
    #[arg(long)]
    synthetic: Option<usize>,
    /// Frames per generated clip.
    #[arg(long, default_value_t = 8)]
    synthetic_frames: usize,
    /// LR size of generated clips as HEIGHTxWIDTH.
    #[arg(long, default_value = "24x32")]
    synthetic_size: String,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root or directory of LR clips.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Fuse a half-width-rotated view for seam continuity.
    #[arg(long)]
    cyclic: bool,
    /// LR directory to read when the input is a dataset root.
    #[arg(long, value_enum, default_value = "bd")]
    mode: ModeArg,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Dataset root or directory of reference clips.
    #[arg(long)]
    gt: PathBuf,
    /// Directory of predicted clips.
    #[arg(long)]
    pred: PathBuf,
    /// Output directory for `metrics.csv` and `bundle.json`.
    #[arg(long)]
    out: PathBuf,
    /// Model name used in tables.
    #[arg(long, default_value = "s3po")]
    name: String,
    /// Average metrics over R, G and B instead of using luma.
    #[arg(long)]
    rgb: bool,
    /// Also score bicubic upsampling of the stored LR frames.
    #[arg(long, value_enum)]
    baseline: Option<ModeArg>,
    #[arg(long, default_value_t = 4)]
    scale: usize,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(Args, Debug)]
struct SitiArgs {
    #[arg(long)]
    input: PathBuf,
    /// Write JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Evaluation bundles to combine.
    #[arg(long = "bundle", required = true)]
    bundles: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Deserialize, Default, Debug)]
#[serde(deny_unknown_fields, default)]
struct ConfigFile {
    model: Option<ModelConfig>,
    train: Option<TrainConfig>,
    degradation: Option<DegradationConfig>,
    metrics: Option<MetricConfig>,
    prepare: Option<PrepareOptions>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Core(S3poError),
}

impl From<S3poError> for CliError {
    fn from(e: S3poError) -> Self {
        CliError::Core(e)
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(CliError::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { EXIT_NUMERIC } else { EXIT_DATA })
        }
    }
}

fn run(cli: Cli) -> CliResult {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(CliError::Usage("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let config = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str::<ConfigFile>(&text)
                .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?
        }
        None => ConfigFile::default(),
    };
    match cli.command {
        Command::Prepare(a) => cmd_prepare(a, &config),
        Command::Split(a) => cmd_split(a, cli.seed.unwrap_or(0)),
        Command::Degrade(a) => cmd_degrade(a, &config),
        Command::Train(a) => cmd_train(a, &config, cli.seed),
        Command::Infer(a) => cmd_infer(a),
        Command::Evaluate(a) => cmd_evaluate(a, &config),
        Command::Siti(a) => cmd_siti(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn cmd_prepare(a: PrepareArgs, config: &ConfigFile) -> CliResult {
    let mut opts = config.prepare.unwrap_or_default();
    opts.max_frames = a.max_frames.unwrap_or(opts.max_frames);
    opts.width = a.width.unwrap_or(opts.width);
    opts.height = a.height.unwrap_or(opts.height);
    let m = prepare(&a.input, &a.output, &opts)?;
    for issue in &m.issues {
        log::warn!("skipped {}: {}", issue.clip_id, issue.reason);
    }
    log::info!("prepared {} clips into {}", m.entries.len(), a.output.display());
    Ok(())
}

fn cmd_split(a: SplitArgs, seed: u64) -> CliResult {
    let m = apply_split(&a.root.root, a.test_count, seed)?;
    log::info!("{} train / {} test", m.train_count, m.test_count);
    Ok(())
}

fn degradation_config(config: &ConfigFile, a: &DegradeArgs) -> DegradationConfig {
    let mut cfg = config.degradation.unwrap_or_default();
    if let Some(m) = a.mode {
        cfg.mode = m.into();
    }
    cfg.scale = a.scale.unwrap_or(cfg.scale);
    cfg.blur_sigma = a.sigma.unwrap_or(cfg.blur_sigma);
    cfg.kernel_size = a.kernel.unwrap_or(cfg.kernel_size);
    if let Some(p) = a.pad_h {
        cfg.horizontal_padding = match p {
            PadArg::Wrap => Padding::Wrap,
            PadArg::Reflect => Padding::Reflect,
        };
    }
    cfg
}

fn cmd_degrade(a: DegradeArgs, config: &ConfigFile) -> CliResult {
    let cfg = degradation_config(config, &a);
    let m = make_lr_pairs(&a.root.root, &cfg)?;
    let failed = m.issues.iter().filter(|i| i.stage.starts_with("make_lr_pairs")).count();
    log::info!(
        "generated {} LR clips ({} failed)",
        m.entries.len() - failed,
        failed
    );
    Ok(())
}

fn parse_size(s: &str) -> CliResult<(usize, usize)> {
    let parse = || {
        let (h, w) = s.split_once(['x', 'X'])?;
        Some((h.trim().parse().ok()?, w.trim().parse().ok()?))
    };
    match parse() {
        Some((h, w)) if h > 0 && w > 0 => Ok((h, w)),
        _ => Err(CliError::Usage(format!("expected HEIGHTxWIDTH, got `{s}`"))),
    }
}

fn cmd_train(a: TrainArgs, config: &ConfigFile, seed: Option<u64>) -> CliResult {
    let init = match &a.init {
        Some(dir) => Some(load_checkpoint(dir, config.model.as_ref())?),
        None => None,
    };

    let mut model_cfg = config
        .model
        .clone()
        .or_else(|| init.as_ref().map(|c| c.model.clone()))
        .unwrap_or_default();
    model_cfg.base_channels = a.channels.unwrap_or(model_cfg.base_channels);
    model_cfg.num_blocks = a.blocks.unwrap_or(model_cfg.num_blocks);
    if let Some(s) = seed {
        model_cfg.seed = s;
    }

    let mut train_cfg = config.train.clone().unwrap_or_else(|| match a.stage {
        StageArg::Pretrain => TrainConfig::pretrain(),
        StageArg::Adapt => TrainConfig::adapt(),
    });
    train_cfg.stage = match a.stage {
        StageArg::Pretrain => Stage::Pretrain,
        StageArg::Adapt => Stage::Adapt,
    };
    if let Some(d) = config.degradation {
        train_cfg.degradation = d;
    }
    if let Some(m) = a.mode {
        train_cfg.degradation.mode = m.into();
    }
    train_cfg.degradation.scale = model_cfg.scale;
    train_cfg.epochs = a.epochs.unwrap_or(train_cfg.epochs);
    train_cfg.batch_size = a.batch_size.unwrap_or(train_cfg.batch_size);
    train_cfg.lr_initial = a.lr.unwrap_or(train_cfg.lr_initial);
    train_cfg.lr_decay_every = a.lr_decay_every.unwrap_or(train_cfg.lr_decay_every);
    train_cfg.loss.beta = a.beta.unwrap_or(train_cfg.loss.beta);
    if a.truncation.is_some() {
        train_cfg.unroll_truncation = a.truncation;
    }
    if let Some(s) = seed {
        train_cfg.seed = s;
    }

    let clips = match a.synthetic {
        Some(n) => {
            let (h, w) = parse_size(&a.synthetic_size)?;
            let kind = match train_cfg.stage {
                Stage::Pretrain => SyntheticKind::Conventional,
                Stage::Adapt => SyntheticKind::Panoramic,
            };
            let s = model_cfg.scale;
            (0..n)
                .map(|i| {
                    let gt = synthetic_clip(kind, h * s, w * s, a.synthetic_frames, train_cfg.seed + i as u64)?;
                    TrainingClip::from_gt(format!("synthetic_{i:03}"), gt, &train_cfg.degradation)
                })
                .collect::<s3po::Result<Vec<_>>>()?
        }
        None => {
            let root = a.root.as_ref().ok_or_else(|| {
                CliError::Usage("train needs --root, S3PO_DATA_ROOT or --synthetic".into())
            })?;
            datakit::load_pairs(root, Split::Train, train_cfg.degradation.mode)?
        }
    };
    if clips.is_empty() {
        return Err(S3poError::InvalidArgument("no training clips with matching LR frames".into()).into());
    }

    let mut trainer = match (&init, a.resume) {
        (Some(ck), true) => Trainer::resume(ck)?,
        (Some(ck), false) => {
            ck.params.check_layout(&model_cfg)?;
            let model = Model::from_parts(model_cfg, ck.params.clone())?;
            Trainer::new(model, train_cfg)?
        }
        (None, _) => Trainer::new(Model::new(model_cfg)?, train_cfg)?,
    };

    let result = trainer.run(&clips);
    std::fs::create_dir_all(&a.out).map_err(|e| S3poError::Io { path: a.out.clone(), source: e })?;
    trainer.write_log(&a.out.join("train_log.csv"))?;
    match result {
        Ok(()) => {
            trainer.checkpoint().save(&a.out)?;
            log::info!(
                "trained {} updates, final loss {:.6}",
                trainer.updates(),
                trainer.loss_history().last().copied().unwrap_or(f64::NAN)
            );
            Ok(())
        }
        Err(e) => {
            if e.is_numeric() {
                let diag = a.out.join("diagnostic");
                trainer.checkpoint().save(&diag)?;
                log::error!("diagnostic checkpoint written to {}", diag.display());
            }
            Err(e.into())
        }
    }
}

fn load_checkpoint(dir: &Path, cfg: Option<&ModelConfig>) -> CliResult<Checkpoint> {
    if !checkpoint::exists(dir) {
        return Err(S3poError::InvalidArgument(format!(
            "no checkpoint at {} (expected {}, {} and {})",
            dir.display(),
            checkpoint::CONFIG_FILE,
            checkpoint::WEIGHTS_FILE,
            checkpoint::INDEX_FILE
        ))
        .into());
    }
    Ok(match cfg {
        Some(cfg) => Checkpoint::load_for(dir, cfg)?,
        None => Checkpoint::load(dir)?,
    })
}

fn cmd_infer(a: InferArgs) -> CliResult {
    let ck = load_checkpoint(&a.checkpoint, None)?;
    let mut cfg = ck.model.clone();
    cfg.cyclic_enabled = a.cyclic;
    let model = Model::from_parts(cfg, ck.params)?;

    let mode: DegradationMode = a.mode.into();
    let clips: Vec<(String, Vec<s3po::ErpFrame>)> = if a.input.join(datakit::MANIFEST_FILE).is_file() {
        let manifest = DatasetManifest::load(&a.input)?;
        manifest
            .split_entries(a.split.into())
            .map(|e| Ok((e.clip_id.clone(), datakit::read_frames(&datakit::lr_dir(&a.input, e, mode), None)?)))
            .collect::<s3po::Result<_>>()?
    } else {
        read_clips(&a.input)?.into_iter().map(|(c, _)| c).collect()
    };
    if clips.is_empty() {
        return Err(S3poError::InvalidArgument(format!("no clips under {}", a.input.display())).into());
    }

    let outputs = clips
        .iter()
        .map(|(id, frames)| Ok((id, model.forward_clip(frames)?)))
        .collect::<s3po::Result<Vec<_>>>()?;
    for (id, frames) in &outputs {
        write_frames(&a.output.join(id), frames)?;
    }
    log::info!("wrote {} clips to {}", outputs.len(), a.output.display());
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs, config: &ConfigFile) -> CliResult {
    let mut cfg = config.metrics.unwrap_or_default();
    if a.rgb {
        cfg.on_luma = false;
    }
    let split: Split = a.split.into();
    let model = ModelResults::new(a.name.clone(), evaluate_dirs(&a.gt, &a.pred, split, &cfg)?);
    let baseline = match a.baseline {
        Some(m) => Some(ModelResults::new(
            BASELINE_NAME,
            bicubic_baseline(&a.gt, split, m.into(), a.scale, &cfg)?,
        )),
        None => None,
    };
    let bundle = ReportBundle {
        reports: vec![model],
        baseline_reports: baseline,
        table_paths: Vec::new(),
        plot_paths: Vec::new(),
        config_echo: serde_json::json!({
            "metrics": cfg,
            "split": split,
            "baseline": a.baseline.map(|m| DegradationMode::from(m).as_str()),
            "scale": a.scale,
        }),
    };
    std::fs::create_dir_all(&a.out).map_err(|e| S3poError::Io { path: a.out.clone(), source: e })?;
    write_csv(&a.out.join("metrics.csv"), &bundle.rows())?;
    bundle.save(&a.out.join("bundle.json"))?;
    for r in bundle.rows() {
        println!(
            "{}: PSNR {} SSIM {:.4} WS-PSNR {} WS-SSIM {:.4}",
            r.name,
            s3po::metrics::format_db(r.overall.psnr),
            r.overall.ssim,
            s3po::metrics::format_db(r.overall.ws_psnr),
            r.overall.ws_ssim
        );
    }
    Ok(())
}

fn cmd_siti(a: SitiArgs) -> CliResult {
    let clips = read_clips(&a.input)?;
    if clips.is_empty() {
        return Err(S3poError::InvalidArgument(format!("no clips under {}", a.input.display())).into());
    }
    let mut out = serde_json::Map::new();
    for ((id, frames), _) in clips {
        let stats = si_ti(&frames)?;
        out.insert(
            id,
            serde_json::json!({ "frames": frames.len(), "si": stats.si, "ti": stats.ti }),
        );
    }
    let text = serde_json::to_string_pretty(&serde_json::Value::Object(out))
        .map_err(|e| CliError::Usage(e.to_string()))?;
    match a.out {
        Some(p) => std::fs::write(&p, text + "\n").map_err(|e| S3poError::Io { path: p, source: e })?,
        None => println!("{text}"),
    }
    Ok(())
}

fn cmd_report(a: ReportArgs) -> CliResult {
    let mut combined = ReportBundle {
        reports: Vec::new(),
        baseline_reports: None,
        table_paths: Vec::new(),
        plot_paths: Vec::new(),
        config_echo: serde_json::Value::Array(Vec::new()),
    };
    for path in &a.bundles {
        let b = ReportBundle::load(path)?;
        combined.reports.extend(b.reports);
        if combined.baseline_reports.is_none() {
            combined.baseline_reports = b.baseline_reports;
        }
        if let serde_json::Value::Array(echo) = &mut combined.config_echo {
            echo.push(b.config_echo);
        }
    }
    let files = render_report(&combined.rows(), &a.out)?;
    combined.table_paths = vec![files.table.display().to_string()];
    combined.plot_paths = files.plots.iter().map(|p| p.display().to_string()).collect();
    combined.save(&a.out.join("bundle.json"))?;
    println!("{}", files.table.display());
    Ok(())
}
