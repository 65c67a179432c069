use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use glore_mtl::datakit::{SplitSpec, Subset, SynthConfig};
use glore_mtl::gradcheck::{Fault, FIXTURES};
use glore_mtl::precision::Precision;
use glore_mtl::{Error, Result};
use glore_mtl_cli::commands;
use glore_mtl_cli::config::RunConfig;
use glore_mtl_cli::{exit_code, EXIT_FAILED, EXIT_OK};

#[derive(Parser)]
#[command(
    name = "glore-mtl",
    version,
    about = "Multi-task surgical scene segmentation and interaction detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a run directory.
    Train(Box<TrainArgs>),
    /// Evaluate a checkpoint on a dataset split and print metrics JSON.
    Eval(EvalArgs),
    /// Predict one frame: label map, interaction scores and overlay.
    Infer(InferArgs),
    /// Generate a synthetic dataset in the on-disk layout.
    Synth(SynthArgs),
    /// Run the built-in gradient, metric, loss, freeze and permutation suites.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Flat `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = ["V", "KD", "S", "STL"])]
    regime: Option<String>,
    #[arg(long, value_parser = ["GR", "MSGR", "MSLRGR"])]
    variant: Option<String>,
    #[arg(long, value_parser = ["NONE", "GISF", "PF"])]
    edge_mode: Option<String>,
    /// Inject scene-graph edge features into the segmentation latent space.
    #[arg(long)]
    sgfseg: bool,
    #[arg(long)]
    alpha: Option<String>,
    /// Epochs of the joint regimes, or of stage A.
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    stage_b_epochs: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    out: Option<String>,
    /// Continue from a run directory or its checkpoint.ckpt.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Trained single-task checkpoint for KD (trained first when absent).
    #[arg(long)]
    teacher: Option<String>,
    #[arg(long, value_parser = ["fixed", "fast"])]
    precision: Option<String>,
    /// Any other config key, as KEY=VALUE; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test", value_parser = ["train", "test", "all"])]
    subset: String,
    /// Cross-validation fold 1..4 instead of the default split.
    #[arg(long)]
    fold: Option<usize>,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    /// Also write the metrics JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory for per-frame label maps, records and overlays.
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long, value_parser = ["fixed", "fast"])]
    precision: Option<String>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    annotation: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = ["fixed", "fast"])]
    precision: Option<String>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    frames: usize,
    #[arg(long, default_value_t = 320)]
    height: usize,
    #[arg(long, default_value_t = 400)]
    width: usize,
    /// Comma-separated sequence numbers frames are spread over.
    #[arg(long)]
    sequences: Option<String>,
}

#[derive(Args)]
struct SelftestArgs {
    /// Corrupt one kernel's analytic gradient to check the suite notices.
    #[arg(long, value_parser = FIXTURES)]
    fault: Option<String>,
    #[arg(long, default_value_t = 1.01)]
    fault_scale: f64,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
}

fn precision(flag: &Option<String>) -> Result<Precision> {
    match flag {
        Some(p) => p.parse(),
        None => Precision::from_env(),
    }
}

fn run_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &a.config {
        cfg.apply_file(p)?;
    }
    if std::env::var_os(glore_mtl::precision::PRECISION_ENV).is_some() {
        cfg.precision = Precision::from_env()?;
    }
    let flags = [
        ("regime", &a.regime),
        ("variant", &a.variant),
        ("edge_mode", &a.edge_mode),
        ("alpha", &a.alpha),
        ("epochs", &a.epochs),
        ("stage_b_epochs", &a.stage_b_epochs),
        ("batch", &a.batch),
        ("lr", &a.lr),
        ("seed", &a.seed),
        ("data", &a.data),
        ("out", &a.out),
        ("teacher", &a.teacher),
        ("precision", &a.precision),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, v)?;
        }
    }
    if a.sgfseg {
        cfg.set("sgfseg", "true")?;
    }
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k, v)?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Train(a) => {
            let cfg = run_config(&a)?;
            let dir = commands::train(&cfg, a.resume.as_deref())?;
            println!("{}", dir.display());
        }
        Command::Eval(a) => {
            let split = match a.fold {
                Some(k) => SplitSpec::fold(k)?,
                None => SplitSpec::default(),
            };
            let subset = match a.subset.as_str() {
                "train" => Subset::Train,
                "all" => Subset::All,
                _ => Subset::Test,
            };
            let m = commands::eval(
                &a.checkpoint,
                &a.data,
                &split,
                subset,
                a.batch,
                precision(&a.precision)?,
                a.predictions.as_deref(),
            )?;
            let json = serde_json::to_string_pretty(&m)? + "\n";
            if let Some(p) = &a.out {
                std::fs::write(p, &json).map_err(|e| Error::Io {
                    path: p.clone(),
                    source: e,
                })?;
            }
            print!("{json}");
        }
        Command::Infer(a) => {
            let out = commands::infer(
                &a.checkpoint,
                &a.image,
                &a.annotation,
                &a.out,
                precision(&a.precision)?,
            )?;
            for p in [Some(&out.labels), Some(&out.record), out.overlay.as_ref()]
                .into_iter()
                .flatten()
            {
                println!("{}", p.display());
            }
        }
        Command::Synth(a) => {
            let mut cfg = SynthConfig::new(a.seed, a.frames);
            cfg.height = a.height;
            cfg.width = a.width;
            if let Some(s) = &a.sequences {
                cfg.sequences = s
                    .split(',')
                    .map(|v| {
                        v.trim()
                            .parse()
                            .map_err(|_| Error::Config(format!("bad sequence number `{v}`")))
                    })
                    .collect::<Result<_>>()?;
            }
            let n = commands::synth(&cfg, &a.out)?;
            println!("wrote {n} frames to {}", a.out.display());
        }
        Command::Selftest(a) => {
            let fault = a.fault.map(|fixture| Fault {
                fixture,
                scale: a.fault_scale,
            });
            let results = commands::selftest(fault.as_ref())?;
            if a.json {
                println!("{}", serde_json::to_string_pretty(&results)?);
            } else {
                for r in &results {
                    println!(
                        "{} {} ({:.1}s)",
                        if r.passed { "PASS" } else { "FAIL" },
                        r.suite,
                        r.seconds
                    );
                    for f in &r.failures {
                        println!("    {f}");
                    }
                }
            }
            if results.iter().any(|r| !r.passed) {
                return Ok(EXIT_FAILED);
            }
        }
    }
    Ok(EXIT_OK)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    };
    ExitCode::from(code as u8)
}
