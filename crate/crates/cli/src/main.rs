use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use facefill::archive::Archive;
use facefill::data::Dataset;
use facefill::losses::ExtractorConfig;
use facefill::trainer::{
    apply_deterministic_env, evaluate_dataset, infer_directory, resolve_pretrain, run_joint, run_pretrain,
    run_smoke_with, DataSource, EvalEmbedders, InferOptions, RunConfig, SmokeConfig, Stage, TrainedGenerator,
    DETERMINISTIC_ENV,
};
use facefill::{Error, Result};

#[derive(Parser)]
#[command(
    name = "facefill",
    version,
    about = "Face completion with contrastive pretraining and dual attention fusion"
)]
#[command(after_help = "Set FACEFILL_DETERMINISTIC=1 to pin the CPU backend to one thread.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stage 1: contrastive pretraining of the encoder.
    Pretrain(TrainArgs),
    /// Stage 2: joint generator training.
    Train(JointArgs),
    /// Complete every image under DIR/images using DIR/masks.
    Infer(InferArgs),
    /// Score a trained generator on a dataset split.
    Evaluate(EvaluateArgs),
    /// Render synthetic faces with UV ground truth.
    GenSynthetic(GenArgs),
    /// Run the scaled end-to-end experiment and report the acceptance checks.
    Smoke(SmokeArgs),
    /// Print the default run configuration as TOML.
    DefaultConfig,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set adam.lr=1e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Dataset root; reads `<DIR>/<split>/images` (and `uv/`).
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    #[arg(long, default_value = "train")]
    split: String,
    /// Output directory for checkpoints and logs.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Continue from a checkpoint written by the same stage.
    #[arg(long, value_name = "FILE")]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct JointArgs {
    #[command(flatten)]
    common: TrainArgs,
    /// Stage-1 checkpoint; required unless contrastive init is disabled.
    #[arg(long, value_name = "FILE")]
    pretrain: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    #[arg(long, value_name = "DIR")]
    input: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Also write the predicted UV field as `<stem>.uv.npyish`.
    #[arg(long)]
    emit_uv: bool,
    /// Also write the fusion map as `<stem>.alpha.png`.
    #[arg(long)]
    emit_alpha: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Report file (JSON).
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Seed of the evaluation masks.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    count: usize,
    #[arg(long, num_args = 2, value_names = ["H", "W"])]
    size: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long, default_value = "train")]
    split: String,
    /// Also write one sampled mask per image under `<split>/masks`, making
    /// the split directly usable by `infer`.
    #[arg(long)]
    with_masks: bool,
}

#[derive(Args)]
struct SmokeArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// TOML smoke configuration; omitted keys take the desk defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Report file (JSON).
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

fn run_config(args: &TrainArgs, stage: Stage) -> Result<RunConfig> {
    let base = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let mut config = base.with_overrides(&args.overrides)?;
    config.stage = stage;
    if let Some(root) = &args.data {
        config.data = DataSource::Directory {
            root: root.clone(),
            split: args.split.clone(),
            shuffle_seed: config.seed,
        };
    }
    if let Some(out) = &args.out {
        config.out_dir = Some(out.clone());
    }
    config.validate()?;
    Ok(config)
}

fn load_archive(path: Option<&PathBuf>) -> Result<Option<Archive>> {
    path.map(|p| Archive::load(p)).transpose()
}

fn pretrain(args: TrainArgs) -> Result<()> {
    let config = run_config(&args, Stage::Pretrain)?;
    let dataset = config.data.load()?;
    let resume = load_archive(args.resume.as_ref())?;
    let out = run_pretrain(&config, &dataset, resume.as_ref())?;
    let last = out.log.records().last().map_or(f64::NAN, |r| r.total);
    eprintln!(
        "pretrain: {} steps, final InfoNCE {last:.5}{}",
        out.pretrainer.step(),
        if out.stopped_early { " (plateau)" } else { "" }
    );
    Ok(())
}

fn train(args: JointArgs) -> Result<()> {
    let mut config = run_config(&args.common, Stage::Joint)?;
    if let Some(p) = args.pretrain {
        config.pretrain_checkpoint = Some(p);
    }
    let resume = load_archive(args.common.resume.as_ref())?;
    let pretrain = if resume.is_some() {
        None
    } else {
        resolve_pretrain(&config)?
    };
    let dataset = config.data.load()?;
    let out = run_joint(&config, &dataset, pretrain.as_ref(), resume.as_ref())?;
    if let Some(r) = out.log.records().last() {
        eprintln!(
            "train: {} steps, total {:.5} (rec {:.5}, uv {:.5}, style {:.5}, ip {:.5}){}",
            r.step,
            r.total,
            r.l_rec,
            r.l_uv,
            r.l_style,
            r.l_ip,
            if out.stopped_early { " (plateau)" } else { "" }
        );
    }
    Ok(())
}

fn load_generator(path: &Path) -> Result<(TrainedGenerator, ExtractorConfig)> {
    let archive = Archive::load(path)?;
    let model = TrainedGenerator::from_archive(&archive)?;
    let extractor = if archive.contains("joint.extractor") {
        archive.get_json("joint.extractor")?
    } else {
        ExtractorConfig::default()
    };
    Ok((model, extractor))
}

fn infer(args: InferArgs) -> Result<()> {
    let (model, _) = load_generator(&args.checkpoint)?;
    let options = InferOptions {
        emit_uv: args.emit_uv,
        emit_alpha: args.emit_alpha,
    };
    let done = infer_directory(&model, &args.input, &args.out, options)?;
    eprintln!(
        "infer: completed {} images into {}",
        done.len(),
        args.out.display()
    );
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let (model, extractor) = load_generator(&args.checkpoint)?;
    let dataset = facefill::data::load_dataset(&args.data, &args.split, 0)?;
    let embedders = EvalEmbedders::new(&extractor, model.params.dtype())?;
    let report = evaluate_dataset(&model, &dataset, args.seed, &embedders, args.batch_size)?;
    report.save(&args.out)?;
    eprintln!(
        "evaluate: {} images, PSNR {:.3} (input {:.3}), SSIM {:.4}, Frechet {:.4}, AUC {:.4}",
        report.images.len(),
        report.psnr_mean,
        report.psnr_input_mean,
        report.ssim_mean,
        report.frechet,
        report.auc
    );
    Ok(())
}

fn gen_synthetic(args: GenArgs) -> Result<()> {
    let (h, w) = match args.size.as_slice() {
        [h, w] => (*h, *w),
        _ => return Err(Error::Config("--size takes two values: H W".into())),
    };
    let dataset = Dataset::synthetic(args.count, h, w, args.seed)?;
    dataset.write(&args.out, &args.split)?;
    if args.with_masks {
        let dir = args.out.join(&args.split).join("masks");
        std::fs::create_dir_all(&dir)?;
        for (i, rec) in dataset.records().iter().enumerate() {
            let sample = dataset.sample(i, args.seed)?;
            sample
                .mask
                .to_image()
                .save_png(&dir.join(format!("{}.png", rec.name)))?;
        }
    }
    eprintln!(
        "gen-synthetic: wrote {} faces to {}",
        dataset.len(),
        args.out.join(&args.split).display()
    );
    Ok(())
}

fn smoke(args: SmokeArgs) -> Result<bool> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            toml::from_str::<SmokeConfig>(&text).map_err(|e| Error::Config(e.to_string()))?
        }
        None => SmokeConfig::desk(args.seed),
    };
    cfg.seed = args.seed;
    cfg.run.seed = args.seed;
    let report = run_smoke_with(&cfg)?;
    let c = &report.criteria;
    let mark = |ok: bool| if ok { "PASS" } else { "FAIL" };
    println!(
        "loss drop    [{}] step-last / step-1 = {:.3} (need <= 0.70)",
        mark(c.loss_drop),
        report.loss_ratio
    );
    println!(
        "psnr gain    [{}] {:.2} dB vs masked input {:.2} dB: +{:.2} dB (need >= 3)",
        mark(c.psnr_gain),
        report.final_eval.psnr_mean,
        report.final_eval.psnr_input_mean,
        report.psnr_gain_db
    );
    println!(
        "uv improved  [{}] {:?} -> {:?}",
        mark(c.uv_improved),
        report.initial_eval.uv_mse,
        report.final_eval.uv_mse
    );
    println!("elapsed {:.1} s", report.elapsed_s);
    if let Some(out) = &args.out {
        if let Some(parent) = out.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(out, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(c.loss_drop && c.psnr_gain && c.uv_improved)
}

fn main() -> ExitCode {
    if apply_deterministic_env() {
        eprintln!("{DETERMINISTIC_ENV} set: single-threaded backend");
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain(a) => pretrain(a).map(|_| true),
        Command::Train(a) => train(a).map(|_| true),
        Command::Infer(a) => infer(a).map(|_| true),
        Command::Evaluate(a) => evaluate(a).map(|_| true),
        Command::GenSynthetic(a) => gen_synthetic(a).map(|_| true),
        Command::Smoke(a) => smoke(a),
        Command::DefaultConfig => RunConfig::default().to_toml_string().map(|s| {
            print!("{s}");
            true
        }),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
