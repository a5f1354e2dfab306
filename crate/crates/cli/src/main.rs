//! `thzq`: synthesize raster-scan THz datasets, train and evaluate the four
//! classifier variants, check gradients, and count trainable parameters.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;

use thzq_core::io;
use thzq_core::nn::TrainConfig;
use thzq_core::pipeline::{
    self, evaluate_with_threads, reconstruct_images, train, HybridQml, ModelKind, TrainOptions,
};
use thzq_core::thz::{synth_dataset_with_scene, make_scene, Scene, SceneConfig, Split};
use thzq_core::vqc::gradient_agreement_suite;

#[derive(Parser)]
#[command(name = "thzq", version, about = "THz multi-layer imaging with quantum feature extraction")]
struct Cli {
    /// Worker threads for per-sample circuit evaluation (1 = fully serial,
    /// results are identical for any value).
    #[arg(long, global = true, env = "THZQ_THREADS", default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic raster-scan dataset.
    Synth(SynthArgs),
    /// Train one model kind on a dataset file.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Run the gradient agreement suite; exits 0 only if all checks pass.
    Gradcheck(GradcheckArgs),
    /// Print trainable-parameter counts for a model kind.
    Params(ParamsArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Base seed for scene content, waveform noise and splits.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output dataset file.
    #[arg(long)]
    out: PathBuf,
    /// Optional scene-override file (blocks of '0'/'1' rows, one per surface).
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Optional JSON file overriding scene-config fields.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelArg {
    Intensity,
    Logreg,
    Dnn,
    #[value(name = "qml-dnn")]
    QmlDnn,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> ModelKind {
        match m {
            ModelArg::Intensity => ModelKind::Intensity,
            ModelArg::Logreg => ModelKind::LogReg,
            ModelArg::Dnn => ModelKind::Dnn,
            ModelArg::QmlDnn => ModelKind::QmlDnn,
        }
    }
}

fn parse_decay(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err("decay factor must be in (0, 1]".into())
    }
}

fn parse_positive(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 {
        Ok(v)
    } else {
        Err("value must be positive".into())
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Which method to train.
    #[arg(long, value_enum)]
    model: ModelArg,
    /// Input dataset file.
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint path; the training history CSV lands alongside it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u32).range(1..))]
    epochs: u32,
    #[arg(long, default_value_t = 5.0, value_parser = parse_positive)]
    lr: f64,
    #[arg(long, default_value_t = 0.5, value_parser = parse_decay)]
    decay: f64,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u32).range(1..))]
    decay_every: u32,
    #[arg(long, default_value_t = 128, value_parser = clap::value_parser!(u32).range(1..))]
    batch: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keep the circuit angles at their initialization; train only the head.
    #[arg(long, default_value_t = false)]
    freeze_vqc: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Valid => Split::Valid,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset file.
    #[arg(long)]
    data: PathBuf,
    /// Split the metrics are computed on.
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Write per-surface PGM heatmaps and a score CSV with this path prefix
    /// (reconstruction always uses the test split).
    #[arg(long)]
    heatmaps: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 2024)]
    seed: u64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5, value_parser = parse_positive)]
    eps: f64,
}

#[derive(Args)]
struct ParamsArgs {
    #[arg(long, value_enum)]
    model: ModelArg,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli.threads.max(1);
    let result = match cli.command {
        Command::Synth(args) => run_synth(args, threads),
        Command::Train(args) => run_train(args, threads),
        Command::Eval(args) => run_eval(args, threads),
        Command::Gradcheck(args) => run_gradcheck(args, threads),
        Command::Params(args) => run_params(args, threads),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run_synth(args: SynthArgs, threads: usize) -> Result<()> {
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str::<SceneConfig>(&text)
                .with_context(|| format!("parsing config {}", path.display()))?
        }
        None => SceneConfig::default(),
    };
    config.seed = args.seed;
    eprintln!(
        "config: synth seed={} out={} scene={} threads={threads}\n  scene_config: {}",
        config.seed,
        args.out.display(),
        args.scene
            .as_ref()
            .map_or("<random>".to_string(), |p| p.display().to_string()),
        serde_json::to_string(&config)?
    );

    let scene = match &args.scene {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading scene {}", path.display()))?;
            Scene::parse_text(&text, config.n_surfaces(), config.pixels_per_side)?
        }
        None => make_scene(&config)?,
    };
    let dataset = synth_dataset_with_scene(&config, scene)?;
    io::write_dataset(&dataset, &args.out)?;
    println!(
        "wrote {} samples ({} pixels x {} scans) to {}",
        dataset.samples.len(),
        config.n_pixels(),
        config.scans_per_pixel(),
        args.out.display()
    );
    Ok(())
}

fn history_path(out: &std::path::Path) -> PathBuf {
    out.with_extension("history.csv")
}

fn run_train(args: TrainArgs, threads: usize) -> Result<()> {
    let kind: ModelKind = args.model.into();
    let config = TrainConfig {
        epochs: args.epochs as usize,
        base_lr: args.lr,
        decay_factor: args.decay,
        decay_every: args.decay_every as usize,
        batch_size: args.batch as usize,
        seed: args.seed,
    };
    let options = TrainOptions {
        freeze_vqc: args.freeze_vqc,
        threads,
    };
    eprintln!(
        "config: train model={kind} data={} out={} epochs={} lr={} decay={} decay_every={} batch={} seed={} freeze_vqc={} threads={threads}",
        args.data.display(),
        args.out.display(),
        config.epochs,
        config.base_lr,
        config.decay_factor,
        config.decay_every,
        config.batch_size,
        config.seed,
        options.freeze_vqc,
    );

    let dataset = io::read_dataset(&args.data)?;
    let (checkpoint, metrics) = train(kind, &dataset, &config, &options)?;
    io::write_checkpoint(&checkpoint, &args.out)?;
    let hist = history_path(&args.out);
    io::write_history_csv(&metrics.history, &hist)?;

    println!("checkpoint: {}", args.out.display());
    println!("history: {}", hist.display());
    println!("best_epoch = {}", checkpoint.best_epoch);
    print!(
        "{}",
        io::format_metrics_report(
            &kind.to_string(),
            Split::Valid,
            &metrics,
            dataset.indices_for(Split::Valid).len(),
        )
    );
    Ok(())
}

fn run_eval(args: EvalArgs, threads: usize) -> Result<()> {
    let split: Split = args.split.into();
    eprintln!(
        "config: eval ckpt={} data={} split={split} heatmaps={} threads={threads}",
        args.ckpt.display(),
        args.data.display(),
        args.heatmaps
            .as_ref()
            .map_or("<none>".to_string(), |p| p.display().to_string()),
    );
    let checkpoint = io::read_checkpoint(&args.ckpt)?;
    let dataset = io::read_dataset(&args.data)?;
    let metrics = evaluate_with_threads(&checkpoint, &dataset, split, threads)?;
    print!(
        "{}",
        io::format_metrics_report(
            &checkpoint.model_kind.to_string(),
            split,
            &metrics,
            dataset.indices_for(split).len(),
        )
    );
    if let Some(prefix) = args.heatmaps {
        let maps = reconstruct_images(&checkpoint, &dataset)?;
        let written = io::export_heatmaps(&maps, dataset.config.pixels_per_side, &prefix)?;
        for path in written {
            println!("heatmap: {}", path.display());
        }
    }
    Ok(())
}

fn run_gradcheck(args: GradcheckArgs, threads: usize) -> Result<()> {
    eprintln!(
        "config: gradcheck seed={} eps={} threads={threads}",
        args.seed, args.eps
    );
    let report = gradient_agreement_suite(args.seed, args.eps, 20)?;
    println!("{report}");

    let max_rel = pipeline::hybrid_fd_check(args.seed, args.eps)?;
    println!("hybrid joint gradient vs finite diff: max rel err = {max_rel:.3e} (tol 1e-4)");

    if report.passed() && max_rel <= 1e-4 {
        println!("gradcheck: PASS");
        Ok(())
    } else {
        bail!("gradient checks failed");
    }
}

fn run_params(args: ParamsArgs, threads: usize) -> Result<()> {
    let kind: ModelKind = args.model.into();
    eprintln!("config: params model={kind} threads={threads}");
    let (vqc, head) = match kind {
        ModelKind::Intensity => {
            // one trained threshold per surface
            (0, SceneConfig::default().n_surfaces())
        }
        ModelKind::LogReg => {
            let mlp = thzq_core::nn::Mlp::init(196, 6, 1, 0)?;
            (0, mlp.param_count())
        }
        ModelKind::Dnn => {
            let mlp = thzq_core::nn::Mlp::init(196, 6, 5, 0)?;
            (0, mlp.param_count())
        }
        ModelKind::QmlDnn => {
            let hybrid = HybridQml::init(8, 2, 5, 6, 0)?;
            (hybrid.layout.param_count(), hybrid.head.param_count())
        }
    };
    println!("vqc={vqc} head={head} total={}", vqc + head);
    Ok(())
}
