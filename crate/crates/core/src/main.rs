use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use recoseg::config::{Profile, RunConfig};
use recoseg::pipeline::{
    cmd_calibrate, cmd_evaluate, cmd_phantom, cmd_preprocess, cmd_synthesize, cmd_train_diffusion, cmd_train_seg,
    RunOptions,
};
use recoseg::plot::cmd_plot;
use recoseg::residual::ResidualSource;
use recoseg::{Error, Result};

#[derive(Parser)]
#[command(name = "recoseg", version, about = "Residual-guided tumor segmentation pipeline")]
struct Cli {
    /// TOML file merged over the profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    /// Overwrite or retrain existing artifacts.
    #[arg(long, global = true)]
    force: bool,
    #[arg(long, global = true, default_value = "quick", value_parser = ["quick", "paper"])]
    profile: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct SourceArg {
    /// Residual source: dynamic, static or zero.
    #[arg(long)]
    source: Option<ResidualSource>,
}

#[derive(Args, Clone, Default)]
struct TrainArgs {
    /// Stop after this many epochs in this invocation; rerun to resume.
    #[arg(long)]
    max_epochs_this_run: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic phantom dataset.
    Phantom {
        #[arg(long)]
        subjects: Option<usize>,
    },
    /// Build the preprocessed slice cache and subject split.
    Preprocess,
    /// Train the conditional diffusion model.
    TrainDiffusion(TrainArgs),
    /// Synthesize T1ce for every cached slice.
    Synthesize,
    /// Train the segmentation network.
    TrainSeg {
        #[command(flatten)]
        source: SourceArg,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Threshold sweep on the evaluation split.
    Evaluate {
        #[command(flatten)]
        source: SourceArg,
        /// Replace the residual channel with zeros.
        #[arg(long)]
        no_real_t1ce: bool,
    },
    /// Choose the threshold on the validation split.
    Calibrate {
        #[command(flatten)]
        source: SourceArg,
    },
    /// Write synthesis, segmentation and threshold figures.
    Plot {
        #[command(flatten)]
        source: SourceArg,
        #[arg(long)]
        subject: Option<String>,
        #[arg(long)]
        slice: Option<usize>,
    },
    /// Run phantom, preprocess, both trainings, evaluate, calibrate and plot.
    Run,
}

fn run(cli: Cli) -> Result<()> {
    let profile: Profile = cli.profile.parse()?;
    let mut cfg = RunConfig::load(profile, cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let mut opts = RunOptions { force: cli.force, max_epochs_this_run: None };
    let out = cli.out.as_path();
    let set_source = |cfg: &mut RunConfig, s: &SourceArg| {
        if let Some(src) = s.source {
            cfg.residual.source = src;
        }
    };
    match &cli.command {
        Command::Phantom { subjects } => {
            if let Some(n) = subjects {
                cfg.data.phantom.subjects = *n;
            }
        }
        Command::TrainDiffusion(t) => opts.max_epochs_this_run = t.max_epochs_this_run,
        Command::TrainSeg { source, train } => {
            set_source(&mut cfg, source);
            opts.max_epochs_this_run = train.max_epochs_this_run;
        }
        Command::Evaluate { source, no_real_t1ce } => {
            set_source(&mut cfg, source);
            cfg.residual.no_real_t1ce |= no_real_t1ce;
        }
        Command::Calibrate { source } | Command::Plot { source, .. } => set_source(&mut cfg, source),
        Command::Preprocess | Command::Synthesize | Command::Run => {}
    }
    cfg.validate()?;
    cfg.write_resolved(out)?;
    match &cli.command {
        Command::Phantom { .. } => {
            let dirs = cmd_phantom(&cfg, out, opts)?;
            println!("wrote {} subjects", dirs.len());
        }
        Command::Preprocess => {
            let s = cmd_preprocess(&cfg, out)?;
            println!("cached {} subjects, {} tumor slices, manifest {}", s.subjects, s.tumor_slices, s.manifest_hash);
        }
        Command::TrainDiffusion(_) => {
            let ck = cmd_train_diffusion(&cfg, out, opts)?;
            println!("diffusion: {} epochs, best epoch {}", ck.meta.epochs_completed, ck.meta.best_epoch);
        }
        Command::Synthesize => println!("synthesized {} slices", cmd_synthesize(&cfg, out, opts)?),
        Command::TrainSeg { .. } => {
            let ck = cmd_train_seg(&cfg, out, opts)?;
            println!("segmentation: {} epochs, best epoch {}", ck.meta.epochs_completed, ck.meta.best_epoch);
        }
        Command::Evaluate { .. } => print!("{}", cmd_evaluate(&cfg, out)?.1),
        Command::Calibrate { .. } => print!("{}", cmd_calibrate(&cfg, out)?.1),
        Command::Plot { subject, slice, .. } => {
            for p in cmd_plot(&cfg, out, subject.as_deref(), *slice)? {
                println!("{}", p.display());
            }
        }
        Command::Run => {
            if !cfg.raw_dir(out).exists() || opts.force {
                cmd_phantom(&cfg, out, opts)?;
            }
            cmd_preprocess(&cfg, out)?;
            cmd_train_diffusion(&cfg, out, opts)?;
            cmd_train_seg(&cfg, out, opts)?;
            print!("{}", cmd_evaluate(&cfg, out)?.1);
            print!("{}", cmd_calibrate(&cfg, out)?.1);
            for p in cmd_plot(&cfg, out, None, None)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: kind={} message={}", e.kind(), one_line(&e));
            ExitCode::from(2)
        }
    }
}

fn one_line(e: &Error) -> String {
    e.to_string().replace(['\n', '\r'], " ")
}
