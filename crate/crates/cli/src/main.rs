use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use utnet::config::{RunConfig, SynthConfig, Variant};
use utnet::pipeline::{run_eval, run_infer, run_synth, run_train};
use utnet::Error;

/// Optic disc and cup segmentation with cup-to-disc ratio screening.
#[derive(Parser)]
#[command(name = "utnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic fundus-like dataset.
    Synth(SynthArgs),
    /// Train a model from a run configuration.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset directory.
    Eval(EvalArgs),
    /// Segment one image and report its cup-to-disc ratio.
    Infer(InferArgs),
    /// Print the default run configuration.
    Config,
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Read generator settings from `io.synthetic` of a run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    noise: Option<f64>,
    /// Cup-to-disc ratio range.
    #[arg(long, num_args = 2, value_names = ["MIN", "MAX"])]
    ratio: Option<Vec<f64>>,
    /// Vertical disc semi-axis range as fractions of the image size.
    #[arg(long, num_args = 2, value_names = ["MIN", "MAX"])]
    disc_axis: Option<Vec<f64>>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    augment: bool,
    /// Dataset directory in the images/ masks_disc/ masks_cup/ layout.
    #[arg(long, conflicts_with = "synthetic")]
    dataset: Option<PathBuf>,
    /// Train on generated data with default generator settings.
    #[arg(long)]
    synthetic: bool,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Directory for report.csv and summary.json.
    #[arg(long, default_value = "eval")]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Also write the input with the disc outline in red and the cup outline in green.
    #[arg(long)]
    overlay: bool,
}

/// 2 usage or configuration, 3 data, 4 numerical abort.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Contract(_) => 2,
        Error::Load(_) | Error::Io { .. } | Error::Checkpoint(_) | Error::Dimension { .. } | Error::UndefinedCdr(_) => 3,
        Error::NumericalAbort { .. } | Error::NonFinite { .. } | Error::Domain { .. } => 4,
    }
}

fn load_config(path: Option<&Path>) -> utnet::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn synth(a: SynthArgs) -> utnet::Result<()> {
    let mut s = match &a.config {
        Some(p) => load_config(Some(p))?.io.synthetic.unwrap_or_default(),
        None => SynthConfig::default(),
    };
    s.count = a.count.unwrap_or(s.count);
    s.size = a.size.unwrap_or(s.size);
    s.seed = a.seed.unwrap_or(s.seed);
    s.noise = a.noise.unwrap_or(s.noise);
    if let Some(r) = a.ratio {
        s.ratio = [r[0], r[1]];
    }
    if let Some(d) = a.disc_axis {
        s.disc_axis = [d[0], d[1]];
    }
    let samples = run_synth(&s, &a.out)?;
    println!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> utnet::Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    let t = &mut cfg.train;
    cfg.arch.variant = a.variant.unwrap_or(cfg.arch.variant);
    cfg.arch.image_size = a.image_size.unwrap_or(cfg.arch.image_size);
    t.steps = a.steps.unwrap_or(t.steps);
    t.batch_size = a.batch_size.unwrap_or(t.batch_size);
    t.learning_rate = a.learning_rate.unwrap_or(t.learning_rate);
    t.seed = a.seed.unwrap_or(t.seed);
    t.eval_every = a.eval_every.unwrap_or(t.eval_every);
    t.augment |= a.augment;
    if let Some(d) = a.dataset {
        cfg.io.dataset = Some(d);
        cfg.io.synthetic = None;
    }
    if a.synthetic {
        cfg.io.dataset = None;
        cfg.io.synthetic = Some(SynthConfig {
            size: cfg.arch.image_size,
            ..Default::default()
        });
    }
    cfg.io.output_dir = a.output_dir.unwrap_or(cfg.io.output_dir);
    cfg.io.checkpoint = a.checkpoint.or(cfg.io.checkpoint);
    let run = run_train(&cfg, |l| {
        log::info!("step {} loss {:.5}", l.step, l.loss.total);
    })?;
    let o = &run.outcome;
    if let Some(last) = o.log.last() {
        println!("steps {} final loss {:.6}", o.log.len(), last.loss.total);
    }
    if let Some(s) = o.stopped_at {
        println!("DSC targets met after step {s}");
    }
    println!("checkpoint {}", run.checkpoint.display());
    println!("best checkpoint {} (step {})", run.best_checkpoint.display(), o.best_step);
    println!("log {}", run.log.display());
    Ok(())
}

fn eval(a: EvalArgs) -> utnet::Result<()> {
    let run = run_eval(&a.checkpoint, &a.dataset, &a.out)?;
    let s = &run.summary;
    println!("images {}", s.images);
    for (name, m) in [("disc", &s.disc), ("cup", &s.cup)] {
        println!(
            "{name}: dsc {:.4} iou {:.4} precision {:.4} sensitivity {:.4} accuracy {:.4}",
            m.dsc, m.iou, m.precision, m.sensitivity, m.accuracy
        );
    }
    let opt = |v: Option<f64>, note: &Option<String>| match (v, note) {
        (Some(v), _) => format!("{v:.4}"),
        (None, Some(n)) => n.clone(),
        (None, None) => "n/a".into(),
    };
    println!("delta_cdr {}", opt(s.delta_cdr, &None));
    println!("auc {}", opt(s.auc, &s.auc_note));
    println!("pcc {}", opt(s.pcc, &s.pcc_note));
    if let Some(ms) = s.mean_inference_ms {
        println!("mean inference {ms:.1} ms/image");
    }
    println!("report {}", run.report.display());
    println!("summary {}", run.summary_path.display());
    Ok(())
}

fn infer(a: InferArgs) -> utnet::Result<()> {
    let run = run_infer(&a.checkpoint, &a.image, &a.out, a.overlay)?;
    if let Some((w, h)) = run.resized_from {
        eprintln!("note: input {w}×{h} was resized to the model extent and masks resized back");
    }
    println!("disc mask {}", run.disc_path.display());
    println!("cup mask {}", run.cup_path.display());
    if let Some(p) = &run.overlay_path {
        println!("overlay {}", p.display());
    }
    match run.cdr {
        Some(c) => println!("cdr {:.4} grade {} (cup {} px, disc {} px)", c.cdr, c.grade, c.d_cup, c.d_disc),
        None => println!("cdr undefined: no disc detected"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer(a),
        Command::Config => RunConfig::default().to_toml().map(|t| print!("{t}")),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
