//! `decon` command-line interface: dataset generation, pre-training,
//! downstream evaluation, statistics, and report emission.

use clap::{Parser, Subcommand, ValueEnum};
use decon_core::config::{
    self, preset, validate_config, DecoderKind, ExperimentConfig, ObjectiveKind, ValidatedConfig,
};
use decon_core::data::{generate_dataset, load_dataset};
use decon_core::error::DeconError;
use decon_core::eval::{evaluate_downstream, FineTuneOptions, TransferMode};
use decon_core::report::{emit_report, load_run_dir, RunArtifacts};
use decon_core::stats::{cohens_d, wilcoxon_signed_rank};
use decon_core::trainer::{
    load_checkpoint, pretrain, verify_checkpoint_config, PretrainOptions,
};
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(name = "decon", version, about = "Joint encoder-decoder contrastive pre-training testbed")]
struct Cli {
    /// Emit errors as machine-readable JSON on stderr.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic shape dataset.
    GenData(GenDataArgs),
    /// Pre-train a model on a dataset directory.
    Pretrain(Box<PretrainArgs>),
    /// Fine-tune on segmentation and report held-out mIoU.
    Evaluate(EvaluateArgs),
    /// Cohen's d and Wilcoxon signed-rank p for two samples.
    Stats(StatsArgs),
    /// Comparison CSV and loss-curve plot over run directories.
    Report(ReportArgs),
}

#[derive(clap::Args, Debug)]
struct GenDataArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of items to generate.
    #[arg(long)]
    n: usize,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 64)]
    size: u32,
    /// Generation seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DecoderKindArg {
    None,
    Fcn,
    Fpn,
}

impl From<DecoderKindArg> for DecoderKind {
    fn from(v: DecoderKindArg) -> Self {
        match v {
            DecoderKindArg::None => DecoderKind::None,
            DecoderKindArg::Fcn => DecoderKind::Fcn,
            DecoderKindArg::Fpn => DecoderKind::Fpn,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ObjectiveKindArg {
    DensePair,
    Prototype,
}

impl From<ObjectiveKindArg> for ObjectiveKind {
    fn from(v: ObjectiveKindArg) -> Self {
        match v {
            ObjectiveKindArg::DensePair => ObjectiveKind::DensePair,
            ObjectiveKindArg::Prototype => ObjectiveKind::Prototype,
        }
    }
}

/// Every override maps 1:1 to an `ExperimentConfig` field.
#[derive(clap::Args, Debug, Default)]
struct ConfigOverrides {
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, alias = "dropout")]
    dropout_p: Option<f64>,
    #[arg(long, value_enum)]
    decoder_kind: Option<DecoderKindArg>,
    #[arg(long)]
    decoder_levels: Option<u32>,
    #[arg(long, alias = "objective", value_enum)]
    objective_kind: Option<ObjectiveKindArg>,
    #[arg(long)]
    prototypes_enc: Option<u32>,
    #[arg(long)]
    prototypes_dec: Option<u32>,
    #[arg(long)]
    temp_student: Option<f64>,
    #[arg(long)]
    temp_teacher: Option<f64>,
    #[arg(long)]
    proj_hidden: Option<u32>,
    #[arg(long)]
    proj_out: Option<u32>,
    #[arg(long)]
    ema_m0: Option<f64>,
    #[arg(long)]
    center_momentum: Option<f64>,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    batch_size: Option<u32>,
    #[arg(long)]
    image_size: Option<u32>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigOverrides {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { cfg.$field = v; })*
            };
        }
        set!(
            alpha,
            dropout_p,
            decoder_levels,
            prototypes_enc,
            prototypes_dec,
            temp_student,
            temp_teacher,
            proj_hidden,
            proj_out,
            ema_m0,
            center_momentum,
            epochs,
            batch_size,
            image_size,
            lr,
            weight_decay,
            seed
        );
        if let Some(v) = self.decoder_kind {
            cfg.decoder_kind = v.into();
        }
        if let Some(v) = self.objective_kind {
            cfg.objective_kind = v.into();
        }
    }
}

#[derive(clap::Args, Debug)]
struct PretrainArgs {
    /// Named starting configuration (baseline, decon-sl, decon-ml-s, decon-ml-l).
    #[arg(long)]
    preset: Option<String>,
    /// JSON config file (flags still override its fields).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output path; loss.csv and config.json land next to it.
    #[arg(long)]
    out: PathBuf,
    /// Resume from an earlier checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Also checkpoint every k epochs.
    #[arg(long)]
    checkpoint_every: Option<u32>,
    /// Treat config-hash mismatches on resume as errors.
    #[arg(long)]
    strict: bool,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Random,
    Encoder,
    EncoderDecoder,
}

impl From<ModeArg> for TransferMode {
    fn from(v: ModeArg) -> Self {
        match v {
            ModeArg::Random => TransferMode::Random,
            ModeArg::Encoder => TransferMode::Encoder,
            ModeArg::EncoderDecoder => TransferMode::EncoderDecoder,
        }
    }
}

#[derive(clap::Args, Debug)]
struct EvaluateArgs {
    /// Pre-training checkpoint (required unless --mode random).
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// Dataset directory with images and masks.
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated fine-tuning seeds, e.g. 0,1,2.
    #[arg(long)]
    seeds: String,
    /// Where to write the EvalResult JSON (also printed to stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fine-tuning steps.
    #[arg(long, default_value_t = 300)]
    ft_steps: u32,
    /// Fine-tuning learning rate.
    #[arg(long, default_value_t = 0.01)]
    ft_lr: f64,
    /// Fine-tuning batch size.
    #[arg(long, default_value_t = 16)]
    ft_batch: usize,
}

#[derive(clap::Args, Debug)]
struct StatsArgs {
    /// File of newline-separated numbers (group A).
    #[arg(long)]
    a: PathBuf,
    /// File of newline-separated numbers (group B).
    #[arg(long)]
    b: PathBuf,
}

#[derive(clap::Args, Debug)]
struct ReportArgs {
    /// Run directories (each with loss.csv and/or eval.json).
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    /// Output directory for report.csv and loss_curves.svg.
    #[arg(long)]
    out: PathBuf,
}

fn read_numbers(path: &Path) -> Result<Vec<f64>, DeconError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| DeconError::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        out.push(line.parse::<f64>().map_err(|e| {
            DeconError::Stats(format!("{} line {}: {e}", path.display(), i + 1))
        })?);
    }
    if out.is_empty() {
        return Err(DeconError::Stats(format!("{} contains no numbers", path.display())));
    }
    Ok(out)
}

fn cmd_gen_data(args: &GenDataArgs) -> Result<(), DeconError> {
    let manifest = generate_dataset(args.seed, args.size, args.n, &args.out)?;
    println!(
        "wrote {} items of size {} to {}",
        manifest.count,
        manifest.image_size,
        args.out.display()
    );
    Ok(())
}

fn effective_config(
    preset_name: Option<&str>,
    config_file: Option<&Path>,
    overrides: &ConfigOverrides,
) -> Result<ValidatedConfig, DeconError> {
    let mut cfg = match (config_file, preset_name) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| DeconError::io(path.display().to_string(), e))?;
            config::parse(&text)?
        }
        (None, Some(name)) => preset(name)?,
        (None, None) => ExperimentConfig::default(),
    };
    overrides.apply(&mut cfg);
    validate_config(cfg)
}

fn cmd_pretrain(args: &PretrainArgs) -> Result<(), DeconError> {
    let cfg = effective_config(args.preset.as_deref(), args.config.as_deref(), &args.overrides)?;
    let scenes = load_dataset(&args.data)?;
    let run_dir = args.out.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&run_dir)
        .map_err(|e| DeconError::io(run_dir.display().to_string(), e))?;

    let resume = match &args.resume {
        None => None,
        Some(path) => {
            let state = load_checkpoint(path)?;
            if let Some(warning) = verify_checkpoint_config(&state, &cfg, args.strict)? {
                eprintln!("warning: {warning}");
            }
            Some(state)
        }
    };

    // provenance: the effective config is echoed next to the checkpoint
    let config_echo = run_dir.join("config.json");
    std::fs::write(&config_echo, config::render(cfg.as_config()))
        .map_err(|e| DeconError::io(config_echo.display().to_string(), e))?;

    let options = PretrainOptions {
        loss_log: Some(run_dir.join("loss.csv")),
        checkpoint_out: Some(args.out.clone()),
        checkpoint_every_epochs: args.checkpoint_every,
        resume,
    };
    let (state, rows) = pretrain(&cfg, &scenes, options)?;
    let last = rows.last().map(|b| b.total).unwrap_or(f64::NAN);
    println!(
        "pre-trained {} steps ({} epochs); final total loss {last:.6}; checkpoint at {}",
        state.step,
        state.epoch,
        args.out.display()
    );
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<(), DeconError> {
    let scenes = load_dataset(&args.data)?;
    let seeds: Vec<u64> = args
        .seeds
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|e| DeconError::Eval(format!("bad seed `{s}`: {e}")))
        })
        .collect::<Result<_, _>>()?;
    let state = match &args.ckpt {
        Some(path) => Some(load_checkpoint(path)?),
        None => None,
    };
    let options =
        FineTuneOptions { steps: args.ft_steps, lr: args.ft_lr, batch_size: args.ft_batch };
    let result =
        evaluate_downstream(state.as_ref(), args.mode.into(), &scenes, &seeds, &options)?;
    let text = serde_json::to_string_pretty(&result).expect("result serializes");
    if let Some(out) = &args.out {
        if let Some(parent) = out.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)
                    .map_err(|e| DeconError::io(parent.display().to_string(), e))?;
            }
        }
        std::fs::write(out, &text).map_err(|e| DeconError::io(out.display().to_string(), e))?;
    }
    println!("{text}");
    Ok(())
}

fn cmd_stats(args: &StatsArgs) -> Result<(), DeconError> {
    let a = read_numbers(&args.a)?;
    let b = read_numbers(&args.b)?;
    match cohens_d(&a, &b) {
        Ok(d) => println!("d={d:.3}"),
        Err(e) => println!("d=n/a ({e})"),
    }
    if a.len() != b.len() {
        println!("p=n/a (groups must be paired; lengths {} vs {})", a.len(), b.len());
        return Ok(());
    }
    let diffs: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    match wilcoxon_signed_rank(&diffs) {
        Ok(p) => println!("p={p:.6}"),
        Err(e) => println!("p=n/a ({e})"),
    }
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<(), DeconError> {
    let mut runs: Vec<RunArtifacts> = Vec::new();
    for dir in &args.runs {
        runs.push(load_run_dir(dir)?);
    }
    let paths = emit_report(&runs, &args.out)?;
    println!("wrote {}", paths.csv.display());
    if let Some(curves) = paths.curves {
        println!("wrote {}", curves.display());
    }
    Ok(())
}

fn error_kind(e: &DeconError) -> &'static str {
    match e {
        DeconError::Config(_) => "config",
        DeconError::Data(_) => "data",
        DeconError::Shape(_) => "shape",
        DeconError::Train(_) => "train",
        DeconError::Eval(_) => "eval",
        DeconError::Stats(_) => "stats",
        DeconError::Checkpoint(_) => "checkpoint",
        DeconError::Io { .. } => "io",
    }
}

/// Dispatches one invocation. Exit codes: 0 success, 1 validation/run
/// failure, 2 usage errors.
pub fn run(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    decon_core::init_thread_pool();
    let result = match &cli.cmd {
        Cmd::GenData(args) => cmd_gen_data(args),
        Cmd::Pretrain(args) => cmd_pretrain(args),
        Cmd::Evaluate(args) => cmd_evaluate(args),
        Cmd::Stats(args) => cmd_stats(args),
        Cmd::Report(args) => cmd_report(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            if cli.json {
                eprintln!(
                    "{}",
                    serde_json::json!({"error": e.to_string(), "kind": error_kind(&e)})
                );
            } else {
                eprintln!("error: {e}");
            }
            1
        }
    }
}
