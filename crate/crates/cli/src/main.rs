use clap::{Args, Parser, Subcommand};
use mtat_cli::{
    cmd_bench, cmd_flops, cmd_redundancy, cmd_sample, cmd_sweep, cmd_train, CliError, CliResult, RunConfig,
};
use mtat_core::scheduler::MediatorSchedule;
use std::path::PathBuf;
use std::process::ExitCode;

/// Mediator-token attention toolkit: train a toy diffusion model, sample
/// with dynamic mediator schedules, analyse attention redundancy, sweep
/// schedule thresholds and count operations.
#[derive(Parser)]
#[command(name = "mtat", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Base {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Sampling {
    /// Sampler steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Model checkpoint written by `train`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the toy model; writes model.ckpt and loss.csv.
    Train {
        #[command(flatten)]
        base: Base,
        /// Training steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Generate samples; writes per-sample trace.csv and sample.mtat plus flops.json.
    Sample {
        #[command(flatten)]
        base: Base,
        #[command(flatten)]
        sampling: Sampling,
        /// Mediator schedule as inline JSON or a path to a JSON file.
        #[arg(long)]
        schedule: Option<String>,
    },
    /// Attention redundancy along the sampling trajectory; writes redundancy.csv.
    Redundancy {
        #[command(flatten)]
        base: Base,
        #[command(flatten)]
        sampling: Sampling,
    },
    /// Evaluate the threshold grid; writes sweep.csv and envelope.csv.
    Sweep {
        #[command(flatten)]
        base: Base,
        #[command(flatten)]
        sampling: Sampling,
    },
    /// Per-layer attention operation counts; writes flops.csv and flops.json.
    Flops {
        #[command(flatten)]
        base: Base,
    },
    /// MAC and wall-clock scaling over token counts; writes bench.csv and bench_fit.csv.
    Bench {
        #[command(flatten)]
        base: Base,
    },
}

fn resolve(base: &Base) -> CliResult<RunConfig> {
    let mut cfg = match &base.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = base.seed {
        cfg.seed = s;
    }
    if let Some(o) = &base.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

fn apply_sampling(cfg: &mut RunConfig, s: &Sampling) {
    if let Some(n) = s.steps {
        cfg.sampler.steps = n;
    }
    if let Some(c) = &s.checkpoint {
        cfg.checkpoint = Some(c.clone());
    }
}

fn parse_schedule(arg: &str) -> CliResult<MediatorSchedule> {
    let text = if arg.trim_start().starts_with('{') {
        arg.to_string()
    } else {
        std::fs::read_to_string(arg).map_err(|e| CliError::Config(format!("cannot read schedule {arg}: {e}")))?
    };
    MediatorSchedule::from_json(&text).map_err(|e| CliError::Config(format!("--schedule: {e}")))
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { base, steps } => {
            let mut cfg = resolve(&base)?;
            if let Some(n) = steps {
                cfg.train.steps = n;
            }
            let s = cmd_train(&cfg)?;
            let r = &s.report;
            println!(
                "trained {} steps ({} parameters); held-out loss {:.6} -> {:.6}",
                r.losses.len(),
                s.parameters,
                r.eval_initial,
                r.eval_final
            );
            println!("checkpoint {}", cfg.out.join("model.ckpt").display());
        }
        Command::Sample {
            base,
            sampling,
            schedule,
        } => {
            let mut cfg = resolve(&base)?;
            apply_sampling(&mut cfg, &sampling);
            if let Some(s) = schedule {
                cfg.sampler.schedule = Some(parse_schedule(&s)?);
            }
            let s = cmd_sample(&cfg)?;
            println!(
                "{} samples, {:.6} attention GFLOPs per step on average",
                s.samples.len(),
                s.avg_gflops
            );
        }
        Command::Redundancy { base, sampling } => {
            let mut cfg = resolve(&base)?;
            apply_sampling(&mut cfg, &sampling);
            let s = cmd_redundancy(&cfg)?;
            println!(
                "{} layers x {} steps over {} samples",
                s.trace.layers, s.trace.steps, s.trace.samples
            );
            println!(
                "mean score slope along steps: {:+.3e} ({})",
                s.trend_slope,
                if s.scores_rise {
                    "scores rise, redundancy falls"
                } else {
                    "scores do not rise"
                }
            );
        }
        Command::Sweep { base, sampling } => {
            let mut cfg = resolve(&base)?;
            apply_sampling(&mut cfg, &sampling);
            let s = cmd_sweep(&cfg)?;
            let on = s.results.iter().filter(|r| r.on_envelope).count();
            println!(
                "{} grid points, {} on the envelope, {} failed",
                s.results.len(),
                on,
                s.failures.len()
            );
        }
        Command::Flops { base } => {
            let cfg = resolve(&base)?;
            print!("{}", cmd_flops(&cfg)?.render());
        }
        Command::Bench { base } => {
            let cfg = resolve(&base)?;
            let r = cmd_bench(&cfg)?;
            for f in &r.fits {
                println!(
                    "{:<9} MAC exponent {:.4}  wall-clock exponent {:.3}",
                    f.kind, f.mac_exponent, f.wall_exponent
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    if let Some(n) = std::env::var("MTAT_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
