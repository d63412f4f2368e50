//! `attngan` command-line interface: dataset synthesis, training,
//! evaluation, single-image inference and gradient checks.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use attngan::config::RunConfig;
use attngan::data::{augment_with, encode_image, synth_generate, DatasetManifest, Domain, Sample};
use attngan::metrics::evaluate_testset;
use attngan::networks::{Direction, ForcedAttention};
use attngan::objectives::Mode;
use attngan::tensor::gradcheck::{gradcheck_suite, GradcheckConfig};
use attngan::tensor::OpKind;
use attngan::training::{load_checkpoint, train_loop, DirSink, TrainData, TrainState};

#[derive(Parser)]
#[command(name = "attngan", version, about = "Attention-guided object transfiguration at toy scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic two-domain dataset under the configured root.
    GenData(ConfigArgs),
    /// Train all six networks and write loss log, grids and checkpoints.
    Train(TrainArgs),
    /// Background PSNR/SSIM and attention IoU on a test split.
    Eval(EvalArgs),
    /// Translate one image; writes composite, attention and transformed images.
    Infer(InferArgs),
    /// Finite-difference check of every op and loss term.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    base: ConfigArgs,
    /// Continue from a checkpoint; its stored configuration is used.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    lambda_attn: Option<f64>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root holding testA/testB and masksA/masksB.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "x2y")]
    direction: Direction,
    /// Directory for `eval_<direction>.csv` and `eval_<direction>.md`.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long, hide = true)]
    force_attention: Option<ForcedAttention>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "x2y")]
    direction: Direction,
    /// Output prefix; files get `_composite.png`, `_attention.png`,
    /// `_transformed.png` appended.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, hide = true)]
    force_attention: Option<ForcedAttention>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Perturbs the backward rule of one op (test fixture).
    #[arg(long, hide = true)]
    corrupt_op: Option<String>,
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn gen_data(args: &ConfigArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let manifest = synth_generate(&cfg.synth_config()?, cfg.root()?)?;
    println!("{}", manifest.summary());
    Ok(())
}

fn train(args: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.base)?;
    if let Some(l) = args.lambda_attn {
        cfg.lambda_attn = l;
    }
    if let Some(m) = args.mode {
        cfg.mode = m;
    }
    if let Some(o) = &args.out {
        cfg.out = o.clone();
    }
    let requested = cfg.train_config()?;
    let mut state = match &args.resume {
        Some(path) => {
            let st = load_checkpoint(path)?;
            if st.config != requested {
                log::warn!("resuming with the configuration stored in {}", path.display());
            }
            st
        }
        None => TrainState::new(requested, 3)?,
    };
    let manifest = DatasetManifest::load(cfg.root()?)?;
    let data = TrainData::load(&manifest, state.config.mode)?;
    let mut sink = DirSink::new(&cfg.out, args.resume.as_ref().map(|_| state.iteration))?;
    log::info!(
        "training {} epochs from epoch {}, {} steps per epoch",
        state.config.total_epochs(),
        state.epoch + 1,
        data.steps_per_epoch()
    );
    train_loop(&mut state, &data, &mut sink)?;
    sink.flush()?;
    println!("finished epoch {} after {} iterations; outputs in {}", state.epoch, state.iteration, cfg.out.display());
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    let state = load_checkpoint(&args.checkpoint)?;
    let manifest = DatasetManifest::load(&args.data)?;
    let report = evaluate_testset(&state.bundle, &manifest, args.direction, args.force_attention)?;
    if !report.has_masks() {
        eprintln!("notice: test masks unavailable; PSNR, SSIM and IoU columns omitted");
    }
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let stem = args.out.join(format!("eval_{}", args.direction));
    report.write(&stem.with_extension("csv"), &stem.with_extension("md"))?;
    print!("{}", report.to_markdown());
    Ok(())
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn infer(args: &InferArgs) -> Result<()> {
    let state = load_checkpoint(&args.checkpoint)?;
    let domain = match args.direction {
        Direction::XtoY => Domain::X,
        Direction::YtoX => Domain::Y,
    };
    let raw = Sample::load(&args.input, None, domain)?;
    let input = augment_with(&raw, None, state.bundle.image_size)?.image;
    let tr = state.bundle.translate(args.direction, &input, args.force_attention)?;
    let files = [
        (with_suffix(&args.out, "_composite.png"), &tr.output),
        (with_suffix(&args.out, "_attention.png"), &tr.attention.map(|a| 2.0 * a - 1.0)),
        (with_suffix(&args.out, "_transformed.png"), &tr.transformed),
    ];
    for (path, t) in files {
        encode_image(t, &path)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn gradcheck(args: &GradcheckArgs) -> Result<()> {
    let fault = match &args.corrupt_op {
        Some(name) => Some(OpKind::from_name(name).with_context(|| format!("unknown op `{name}`"))?),
        None => None,
    };
    let cfg = GradcheckConfig {
        trials: args.trials,
        seed: args.seed,
        fault,
        ..GradcheckConfig::default()
    };
    let report = gradcheck_suite(&cfg);
    print!("{}", report.table());
    if !report.passed() {
        let names: Vec<&str> = report.failures().map(|r| r.name.as_str()).collect();
        bail!("gradient check failed (tolerance {:e}): {}", report.tolerance, names.join(", "));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
