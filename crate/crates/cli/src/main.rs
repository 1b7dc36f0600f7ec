use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use detalign_cli::config::RunConfig;
use detalign_cli::{run, run_checks};

#[derive(Parser)]
#[command(name = "detalign", version, about = "Domain-aligned toy detector: train, evaluate, ablate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` config file; defaults apply to absent keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a key, e.g. `--set beta=0.5`. Applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output root; wins over the config's `out_dir`.
    #[arg(long, env = "DETALIGN_OUT")]
    out_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::parse(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
                .with_context(|| format!("parsing {}", p.display()))?,
            None => RunConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv.split_once('=').with_context(|| format!("`{kv}` is not KEY=VALUE"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(dir) = &self.out_dir {
            cfg.out_dir = dir.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration, optionally resuming from a checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the target test split.
    Eval {
        checkpoint: PathBuf,
        /// Snapshot directory from `gen-data`; regenerated from the checkpoint's config if absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, env = "DETALIGN_OUT", default_value = ".")]
        out_dir: PathBuf,
    },
    /// Train every alignment variant over several seeds and compare.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
    },
    /// Write the configured scenario's splits to a snapshot directory.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Defaults to `<out_dir>/data`.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Run the invariant and oracle suite.
    Check {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn ensure_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Train { cfg, resume } => {
            let cfg = cfg.load()?;
            let s = run::run_train(&cfg, resume.as_deref())?;
            println!(
                "{} steps, target mAP50 {:.4}, mAP80/mAP50 {:.4}; outputs in {}",
                s.steps,
                s.final_map.map[0],
                s.final_map.ratio(0.8).unwrap_or(0.0),
                s.out_dir.display()
            );
            Ok(true)
        }
        Command::Eval { checkpoint, data, out_dir } => {
            let (_, text) = run::run_eval(&checkpoint, data.as_deref(), &out_dir)?;
            print!("{text}");
            Ok(true)
        }
        Command::Ablate { cfg, seeds } => {
            let cfg = cfg.load()?;
            ensure_dir(&cfg.out_dir)?;
            let report = run::run_ablation(&cfg, &seeds, |line| eprintln!("{line}"))?;
            fs::write(cfg.out_dir.join("ablation.csv"), report.csv())?;
            let summary = report.summary();
            fs::write(cfg.out_dir.join("ablation.txt"), &summary)?;
            print!("{summary}");
            Ok(report.orderings().iter().all(|o| o.holds))
        }
        Command::GenData { cfg, dir } => {
            let cfg = cfg.load()?;
            let dir = dir.unwrap_or_else(|| cfg.out_dir.join("data"));
            let data = run::run_gen_data(&cfg, &dir)?;
            println!(
                "{} source, {} target train, {} target test scenes in {}",
                data.source_train.len(),
                data.target_train.len(),
                data.target_test.len(),
                dir.display()
            );
            Ok(true)
        }
        Command::Check { seed } => {
            let outcomes = run_checks(seed, |o| {
                println!("{} {:<24} {:>8.2?}  {}", if o.passed { "pass" } else { "FAIL" }, o.name, o.elapsed, o.detail);
            })?;
            Ok(outcomes.iter().all(|o| o.passed))
        }
    }
}
