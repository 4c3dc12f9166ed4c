use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cimark::ablation::{ablate, AblationOptions, Variant};
use cimark::data::{training_source, DataSource, ImageFolder, SyntheticTextures, HELD_OUT_SEED_OFFSET};
use cimark::distortions::EvalDistortion;
use cimark::evaluation::{evaluate_checkpoint, EvalOptions};
use cimark::gradcheck::{self, Precision, CHECKS};
use cimark::image_io::{load_image, save_image, write_atomic};
use cimark::message::BitMessage;
use cimark::training::{FitOptions, Trainer};
use cimark::{Checkpoint, Model, RunConfig};

#[derive(Parser)]
#[command(name = "cimark", version, about = "Robust image watermarking: train, embed, extract, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints plus a per-step loss log.
    Train(TrainArgs),
    /// Hide a hex message in a PNG.
    Embed(EmbedArgs),
    /// Recover the message from an image.
    Extract(ExtractArgs),
    /// Score a checkpoint under a list of distortions.
    Evaluate(EvaluateArgs),
    /// Train and compare ablation variants.
    Ablate(AblateArgs),
    /// Run every finite-difference gradient check.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration; desk defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory for checkpoints and `loss.jsonl`.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint (its configuration is used).
    #[arg(long, conflicts_with = "config")]
    resume: Option<PathBuf>,
    /// Overrides the configured epoch count.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// `l/4` hex digits, most significant bit first.
    #[arg(long)]
    message: String,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
}

#[derive(Args)]
struct EvalData {
    /// Folder of PNG/JPEG images; held-out synthetic textures when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Number of evaluation images.
    #[arg(long, default_value_t = 64)]
    images: usize,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: EvalData,
    /// Comma-separated distortion names, optionally `name=value`.
    #[arg(long, value_delimiter = ',', default_value = "original,combined")]
    distortions: Vec<String>,
    /// JSON report path.
    #[arg(long)]
    report: PathBuf,
    /// Per-image CSV path.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Seed for evaluation messages and distortion draws.
    #[arg(long, default_value_t = 0)]
    eval_seed: u64,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated variants, `arch` or `arch:strategy`.
    #[arg(long, value_delimiter = ',', required = true)]
    variants: Vec<String>,
    #[command(flatten)]
    data: EvalData,
    /// JSON-lines report path, one row per variant.
    #[arg(long)]
    report: PathBuf,
    /// Per-variant checkpoints and loss logs.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Run only these checks.
    #[arg(long, value_delimiter = ',')]
    only: Vec<String>,
}

/// Argument problems exit with 2, everything after validation with 1.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<cimark::Error> for Failure {
    fn from(e: cimark::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn usage(e: impl ToString) -> Failure {
    Failure::Usage(e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Embed(a) => embed(a),
        Command::Extract(a) => extract(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Ablate(a) => run_ablation(a),
        Command::Gradcheck(a) => run_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn resolve_config(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p).map_err(usage)?,
        None => RunConfig::desk(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn echo(cfg: &RunConfig) {
    let compact = serde_json::to_string(cfg).expect("config serialises");
    println!("config: {compact}");
    println!("seed: {}", cfg.seed);
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    if !path.is_file() {
        return Err(usage(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(Checkpoint::load(path)?)
}

fn require_file(path: &Path) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{} does not exist", path.display())))
    }
}

fn train(a: TrainArgs) -> Outcome {
    let mut trainer = match &a.resume {
        Some(p) => Trainer::from_checkpoint(load_checkpoint(p)?)?,
        None => {
            let cfg = resolve_config(&a.config)?;
            cfg.validate().map_err(usage)?;
            Trainer::new(&cfg)?
        }
    };
    if let Some(e) = a.epochs {
        trainer.model.config.epochs = e;
    }
    if a.resume.is_some() && a.config.seed.is_some() {
        return Err(usage("--seed cannot change the seed of a resumed run"));
    }
    let cfg = trainer.config().clone();
    let data = training_source(&cfg).map_err(usage)?;
    echo(&cfg);
    std::fs::create_dir_all(&a.out).map_err(|e| Failure::Runtime(format!("{}: {e}", a.out.display())))?;
    write_atomic(&a.out.join("config.json"), cfg.to_json().as_bytes())?;
    let opts = FitOptions {
        checkpoint_dir: Some(a.out.clone()),
        loss_log: Some(a.out.join("loss.jsonl")),
        stop_after_epoch: None,
    };
    let ck = trainer.fit(data.as_ref(), &opts)?;
    println!("steps: {}", ck.step);
    println!("checkpoint: {}", a.out.join("final.ckpt").display());
    Ok(())
}

fn embed(a: EmbedArgs) -> Outcome {
    let ck = load_checkpoint(&a.checkpoint)?;
    require_file(&a.input)?;
    let message = BitMessage::from_hex(&a.message, ck.config.message_length).map_err(usage)?;
    let image = load_image(&a.input).map_err(usage)?;
    let guidance = ck.require_guidance()?;
    echo(&ck.config);
    let model = Model::new(&ck.config)?;
    let out = model.embed(&ck.params, &[image], &[message], guidance)?;
    save_image(&out[0], &a.output)?;
    println!("wrote: {}", a.output.display());
    Ok(())
}

fn extract(a: ExtractArgs) -> Outcome {
    let ck = load_checkpoint(&a.checkpoint)?;
    require_file(&a.input)?;
    let image = load_image(&a.input).map_err(usage)?;
    let guidance = ck.require_guidance()?;
    echo(&ck.config);
    let model = Model::new(&ck.config)?;
    let probs = model.extract(&ck.params, &[image], guidance)?.remove(0);
    println!("message: {}", BitMessage::from_probabilities(&probs).to_hex());
    let listed: Vec<String> = probs.iter().map(|p| format!("{p:.6}")).collect();
    println!("probabilities: {}", listed.join(" "));
    Ok(())
}

fn eval_source(d: &EvalData, cfg: &RunConfig) -> Result<Box<dyn DataSource>, Failure> {
    if d.images == 0 {
        return Err(usage("--images must be positive"));
    }
    Ok(match &d.data {
        Some(dir) => Box::new(
            ImageFolder::open(dir, cfg.height(), cfg.width())
                .map_err(usage)?
                .truncate(d.images),
        ),
        None => Box::new(SyntheticTextures::new(
            cfg.seed + HELD_OUT_SEED_OFFSET,
            d.images,
            cfg.height(),
            cfg.width(),
        )),
    })
}

fn evaluate(a: EvaluateArgs) -> Outcome {
    let distortions = a
        .distortions
        .iter()
        .map(|d| EvalDistortion::parse(d))
        .collect::<cimark::Result<Vec<_>>>()
        .map_err(usage)?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let data = eval_source(&a.data, &ck.config)?;
    echo(&ck.config);
    let opts = EvalOptions {
        seed: a.eval_seed,
        per_image: a.csv.is_some(),
        limit: None,
    };
    let report = evaluate_checkpoint(&ck, data.as_ref(), &distortions, &opts)?;
    write_atomic(&a.report, report.to_json().as_bytes())?;
    if let (Some(path), Some(csv)) = (&a.csv, report.to_csv()) {
        write_atomic(path, csv.as_bytes())?;
    }
    let p = report.imperceptibility.psnr;
    println!("psnr: {p:.2}  ssim: {:.4}", report.imperceptibility.ssim);
    for d in &report.distortions {
        println!("{:<24} {:.4}", d.distortion, d.mean_accuracy);
    }
    Ok(())
}

fn run_ablation(a: AblateArgs) -> Outcome {
    let variants = a
        .variants
        .iter()
        .map(|v| v.parse::<Variant>())
        .collect::<cimark::Result<Vec<_>>>()
        .map_err(usage)?;
    let cfg = resolve_config(&a.config)?;
    let train = training_source(&cfg).map_err(usage)?;
    let eval = eval_source(&a.data, &cfg)?;
    echo(&cfg);
    let opts = AblationOptions {
        eval: EvalOptions {
            seed: cfg.seed,
            ..Default::default()
        },
        output_dir: a.out.clone(),
    };
    let report = ablate(&cfg, &variants, train.as_ref(), eval.as_ref(), &opts)?;
    write_atomic(&a.report, report.to_json_lines().as_bytes())?;
    println!(
        "{:<28} {:>8} {:>7} {:>7} {:>9}",
        "variant", "psnr", "ssim", "clean", "combined"
    );
    for r in &report.rows {
        println!(
            "{:<28} {:>8.2} {:>7.4} {:>7.4} {:>9.4}",
            r.variant, r.psnr, r.ssim, r.clean_accuracy, r.combined_accuracy
        );
    }
    Ok(())
}

fn run_gradcheck(a: GradcheckArgs) -> Outcome {
    if let Some(bad) = a.only.iter().find(|n| !CHECKS.contains(&n.as_str())) {
        return Err(usage(format!(
            "unknown check `{bad}` (known: {})",
            CHECKS.join(", ")
        )));
    }
    let names: Vec<&str> = if a.only.is_empty() {
        CHECKS.to_vec()
    } else {
        a.only.iter().map(String::as_str).collect()
    };
    let mut rows = Vec::new();
    for name in names {
        for p in [Precision::F32, Precision::F64] {
            rows.push(gradcheck::run_check(name, p).expect("known check"));
        }
    }
    print!("{}", gradcheck::format_table(&rows));
    let failed = rows.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} gradient checks failed")));
    }
    println!("all {} checks passed", rows.len());
    Ok(())
}
