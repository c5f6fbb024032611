use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use depaint_cli::presets::{ExperimentPreset, PRESET_NAMES};
use depaint_cli::{average_seeds, parse_config, verify};
use depaint_core::policy::Checkpoint;
use depaint_core::trainer::{evaluate, uniform_policy, write_metrics_csv, Trainer};
use depaint_core::{ParticleWorld, RunConfig};

/// Decentralized safe multi-agent policy gradient experiments.
#[derive(Parser)]
#[command(name = "depaint", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train once and write the per-iteration metrics CSV.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overridden by DEPAINT_SEED when that is set.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also save every agent's final parameters here.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Monte-Carlo evaluation of saved parameters, or of a uniform policy.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a named experiment grid over its seeds, one configuration at a time.
    Preset {
        /// coop-nav, predator-prey or ablation-momentum
        name: String,
        /// Settings shared by every cell of the grid.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "results")]
        out_dir: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Average metrics files row by row.
    Average {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the numerical self-checks.
    Verify,
}

fn load(config: Option<&Path>) -> Result<RunConfig> {
    match config {
        Some(path) => parse_config(path),
        None => Ok(RunConfig::default()),
    }
}

fn resolve_seed(flag: Option<u64>, fallback: u64) -> Result<u64> {
    match std::env::var("DEPAINT_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .with_context(|| format!("DEPAINT_SEED={v:?} is not an unsigned integer")),
        Err(_) => Ok(flag.unwrap_or(fallback)),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn train_to(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>) -> Result<()> {
    let env = ParticleWorld::new(cfg.env_config())?;
    let outcome = Trainer::new(cfg, &env)?.run(&mut ())?;
    write_metrics_csv(&outcome.metrics, create(out)?)?;
    if let Some(path) = checkpoint {
        Checkpoint::from_agents(&outcome.final_params).write_to(create(path)?)?;
    }
    Ok(())
}

fn run(
    config: Option<&Path>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    checkpoint: Option<&Path>,
) -> Result<()> {
    let mut cfg = load(config)?;
    cfg.seed = resolve_seed(seed, cfg.seed)?;
    if let Some(out) = out {
        cfg.output = out;
    }
    train_to(&cfg, &cfg.output, checkpoint)?;
    eprintln!("wrote {}", cfg.output.display());
    Ok(())
}

fn eval(
    config: Option<&Path>,
    checkpoint: Option<&Path>,
    episodes: usize,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = load(config)?;
    let seed = resolve_seed(seed, cfg.seed)?;
    let env = ParticleWorld::new(cfg.env_config())?;
    let n = cfg.agent_count();
    let params = match checkpoint {
        Some(path) => {
            let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
            Checkpoint::read_from(std::io::BufReader::new(file))?.into_agents(n)?
        }
        None => uniform_policy(n)?,
    };
    let e = evaluate(
        &params,
        &env,
        episodes,
        cfg.horizon,
        &cfg.constraint_spec(),
        seed,
    )?;
    println!("obj_return = {}", e.objective_return);
    println!("util_return = {}", e.utility_return);
    println!("peak_violation_rate = {}", e.peak_violation_rate);
    Ok(())
}

fn preset(
    name: &str,
    config: Option<&Path>,
    out_dir: &Path,
    iterations: Option<usize>,
    seeds: Option<Vec<u64>>,
) -> Result<()> {
    let mut base = load(config)?;
    if let Some(t) = iterations {
        base.iterations = t;
    }
    let mut preset = ExperimentPreset::resolve(name, &base)?;
    if let Some(seeds) = seeds {
        if seeds.is_empty() {
            bail!("--seeds must list at least one seed");
        }
        preset.seeds = seeds;
    }
    let dir = out_dir.join(preset.name);
    for (label, cell) in &preset.cells {
        let mut files = Vec::new();
        for &seed in &preset.seeds {
            let cfg = RunConfig {
                seed,
                ..cell.clone()
            };
            let path = dir.join(format!("{label}_seed{seed}.csv"));
            train_to(&cfg, &path, None).with_context(|| format!("{label} seed {seed}"))?;
            eprintln!("wrote {}", path.display());
            files.push(path);
        }
        let mean = dir.join(format!("{label}_mean.csv"));
        average_seeds(&files, &mean)?;
        eprintln!("wrote {}", mean.display());
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run {
            config,
            seed,
            out,
            checkpoint,
        } => run(config.as_deref(), seed, out, checkpoint.as_deref()),
        Command::Eval {
            config,
            checkpoint,
            episodes,
            seed,
        } => eval(config.as_deref(), checkpoint.as_deref(), episodes, seed),
        Command::Preset {
            name,
            config,
            out_dir,
            iterations,
            seeds,
        } => {
            if !PRESET_NAMES.contains(&name.as_str()) {
                bail!(
                    "unknown preset `{name}`; expected one of {}",
                    PRESET_NAMES.join(", ")
                );
            }
            preset(&name, config.as_deref(), &out_dir, iterations, seeds)
        }
        Command::Average { inputs, out } => average_seeds(&inputs, &out),
        Command::Verify => {
            let checks = verify::run_checks();
            for c in &checks {
                println!(
                    "{} {}: {}",
                    if c.pass { "PASS" } else { "FAIL" },
                    c.name,
                    c.detail
                );
            }
            let failed = checks.iter().filter(|c| !c.pass).count();
            if failed > 0 {
                bail!("{failed} self-check(s) failed");
            }
            Ok(())
        }
    }
}
