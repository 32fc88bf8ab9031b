use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use ld3::commands;
use ld3::config::RunConfig;

#[derive(Parser)]
#[command(name = "ld3", version, about = "Learn time discretizations for diffusion ODE samplers")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file (`key = value` lines); defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample prior draws, run the teacher and write the binary dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a grid; writes checkpoint.json, metrics.csv and config.txt.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve fresh prior draws on a checkpointed grid; writes CSV.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Heuristics and LD3 over NFEs, solvers and seeds; writes CSV.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Best validation loss per ball radius in `eval.r_values`; writes CSV.
    SweepR {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Bound terms and the log-det gap estimate; writes JSON.
    Bound {
        #[command(flatten)]
        common: Common,
        /// Student grid; defaults to the logSNR heuristic.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train per solver family and evaluate every pairing; writes CSV.
    CrossEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::from_text(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn common(cmd: &Cmd) -> &Common {
    match cmd {
        Cmd::GenData { common, .. }
        | Cmd::Train { common, .. }
        | Cmd::Sample { common, .. }
        | Cmd::Bench { common, .. }
        | Cmd::SweepR { common, .. }
        | Cmd::Bound { common, .. }
        | Cmd::CrossEval { common, .. } => common,
    }
}

fn run(cli: Cli) -> Result<()> {
    let common = common(&cli.cmd);
    if let Some(jobs) = common.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global()?;
    }
    let cfg = load_config(common)?;
    match &cli.cmd {
        Cmd::GenData { out, .. } => {
            let ds = commands::gen_data(&cfg, out)?;
            let t = cfg.teacher.solver;
            println!(
                "wrote {} pairs (d = {}) to {}; teacher {}{} NFE {} on the {} grid",
                ds.pairs.len(),
                ds.d,
                out.display(),
                t.family,
                t.order,
                t.nfe,
                cfg.teacher.grid
            );
        }
        Cmd::Train { data, out, .. } => {
            let res = commands::train(&cfg, data, out)?;
            println!(
                "init {}; best val loss {:e} (initial {:e}); checkpoint {}",
                res.report.init.kind,
                res.report.best_val_loss,
                res.report.epochs[0].val_loss,
                res.checkpoint.display()
            );
        }
        Cmd::Sample { checkpoint, n, out, .. } => {
            let samples = commands::sample(&cfg, checkpoint, *n)?;
            write(out, &ld3::persist::samples_csv(&samples))?;
            println!("wrote {} samples to {}", samples.len(), out.display());
        }
        Cmd::Bench { out, .. } => {
            write(out, &commands::bench(&cfg)?)?;
            println!("wrote {}", out.display());
        }
        Cmd::SweepR { data, out, .. } => {
            write(out, &commands::sweep_r(&cfg, data)?)?;
            println!("wrote {}", out.display());
        }
        Cmd::Bound { checkpoint, out, .. } => {
            let rep = commands::bound(&cfg, checkpoint.as_deref())?;
            write(out, &serde_json::to_string_pretty(&rep)?)?;
            println!(
                "r = {}: term1 {:e}, term2 {:e}, term3 ~ {:e}",
                rep.r, rep.term1, rep.term2, rep.term3_estimate
            );
        }
        Cmd::CrossEval { data, out, .. } => {
            let table = commands::cross_eval(&cfg, data)?;
            write(out, &table)?;
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
