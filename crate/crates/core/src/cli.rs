//! Command-line interface: `train`, `eval`, `gen-holdout` and `report`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use crate::eval::{
    complexity_trace, evaluate, generate_holdout, load_scenarios, report_csv, save_scenarios,
    ReportRow, REPORT_HEADER, SMOOTHING_WINDOW,
};
use crate::layouts::RoadLayout;
use crate::orchestrator::{train, Framework, RunMeta, TrainConfig, TrainLog};
use crate::scenario::ScenarioGraph;
use crate::student::Policy;

#[derive(Debug, Parser)]
#[command(
    name = "drive-acl",
    version,
    about = "Curriculum training for driving agents"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a policy and write checkpoints, buffers and the training log.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        framework: Option<Framework>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Override the environment-step budget.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Evaluate a checkpoint on a hold-out set with the deterministic policy.
    Eval {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        holdout: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "unknown")]
        framework: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the report CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a hold-out scenario set at a fixed traffic density.
    GenHoldout {
        #[arg(long, value_parser = parse_density)]
        density: f64,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        max_actors: Option<usize>,
    },
    /// Summarize a training run: complexity trace and per-checkpoint hold-out metrics.
    Report {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Hold-out sets to evaluate every checkpoint on.
        #[arg(long)]
        holdout: Vec<PathBuf>,
    },
}

fn parse_density(s: &str) -> Result<f64, String> {
    let d: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if (0.0..=1.0).contains(&d) {
        Ok(d)
    } else {
        Err(format!("density must be in [0, 1], got {d}"))
    }
}

/// Parse `args`, run the command and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            TrainConfig::from_toml(&text).with_context(|| format!("parsing config {}", p.display()))
        }
        None => Ok(TrainConfig::default()),
    }
}

fn load_policy(path: &Path) -> Result<Policy> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading checkpoint {}", path.display()))?;
    Policy::from_json(&text).with_context(|| format!("parsing checkpoint {}", path.display()))
}

fn all_layouts(cfg: &TrainConfig) -> Result<Vec<RoadLayout>> {
    let lib = cfg.library()?;
    Ok(lib.train.into_iter().chain(lib.holdout).collect())
}

fn holdout_density(set: &[ScenarioGraph], max_actors: usize) -> f64 {
    if set.is_empty() || max_actors == 0 {
        return 0.0;
    }
    let mean = set.iter().map(|s| s.actor_count() as f64).sum::<f64>() / set.len() as f64;
    mean / max_actors as f64
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train {
            config,
            framework,
            seed,
            out,
            steps,
            workers,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(f) = framework {
                cfg.run.framework = f;
            }
            if let Some(s) = seed {
                cfg.run.seed = s;
            }
            if let Some(n) = steps {
                cfg.run.total_env_steps = n;
            }
            if let Some(w) = workers {
                cfg.run.workers = w;
            }
            cfg.check()?;
            let (_, log) = train(&cfg, Some(&out))?;
            eprintln!(
                "trained {} seed {}: {} updates, {} env steps -> {}",
                cfg.run.framework.as_str(),
                cfg.run.seed,
                log.training_updates().count(),
                log.env_steps,
                out.display()
            );
            Ok(())
        }
        Command::Eval {
            policy,
            holdout,
            config,
            framework,
            seed,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let policy = load_policy(&policy)?;
            let set = load_scenarios(&holdout)?;
            let layouts = all_layouts(&cfg)?;
            let metrics = evaluate(&policy, &layouts, &set, &cfg.sim)?;
            let row = ReportRow {
                framework,
                seed,
                density: holdout_density(&set, cfg.generator.max_actors),
                metrics,
            };
            let text = report_csv(&[row]);
            match out {
                Some(p) => {
                    std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?
                }
                None => print!("{text}"),
            }
            Ok(())
        }
        Command::GenHoldout {
            density,
            count,
            seed,
            out,
            config,
            max_actors,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(m) = max_actors {
                cfg.generator.max_actors = m;
            }
            let lib = cfg.library()?;
            let set = generate_holdout(&lib.holdout, &cfg.generator, density, count, seed)?;
            save_scenarios(&out, &set)?;
            eprintln!("wrote {} scenarios to {}", set.len(), out.display());
            Ok(())
        }
        Command::Report { log, out, holdout } => report(&log, &out, &holdout),
    }
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    out.with_file_name(format!("{stem}_{suffix}.csv"))
}

/// Checkpoints `policy_<update>.ckpt` in `dir`, sorted by update.
fn checkpoints(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(u) = name
            .strip_prefix("policy_")
            .and_then(|r| r.strip_suffix(".ckpt"))
            .and_then(|r| r.parse::<usize>().ok())
        {
            out.push((u, path));
        }
    }
    out.sort();
    Ok(out)
}

fn report(dir: &Path, out: &Path, holdouts: &[PathBuf]) -> Result<()> {
    let meta_path = dir.join("run.json");
    let meta: RunMeta = serde_json::from_str(
        &std::fs::read_to_string(&meta_path)
            .with_context(|| format!("reading {}", meta_path.display()))?,
    )
    .with_context(|| format!("parsing {}", meta_path.display()))?;
    let cfg_path = dir.join("config.toml");
    let cfg = load_config(Some(&cfg_path))?;
    let log_path = dir.join("trainlog.csv");
    let text = std::fs::read_to_string(&log_path)
        .with_context(|| format!("reading {}", log_path.display()))?;
    let log = TrainLog::from_csv(&text, meta.framework, meta.seed)?;

    let trace = complexity_trace(&log, SMOOTHING_WINDOW);
    let trace_path = sibling(out, "complexity");
    std::fs::write(&trace_path, trace.to_csv())
        .with_context(|| format!("writing {}", trace_path.display()))?;

    let sets: Vec<Vec<ScenarioGraph>> = holdouts
        .iter()
        .map(|p| load_scenarios(p).map_err(anyhow::Error::from))
        .collect::<Result<_>>()?;
    let ckpts = checkpoints(dir)?;
    if !sets.is_empty() && ckpts.is_empty() {
        bail!("no checkpoints in {}", dir.display());
    }
    let layouts = all_layouts(&cfg)?;
    let framework = meta.framework.as_str().to_string();
    let mut per_ckpt = format!("update,{REPORT_HEADER}\n");
    let mut final_rows = Vec::new();
    for (i, (update, path)) in ckpts.iter().enumerate() {
        if sets.is_empty() {
            break;
        }
        let policy = load_policy(path)?;
        let rows: Vec<ReportRow> = sets
            .iter()
            .map(|set| {
                Ok(ReportRow {
                    framework: framework.clone(),
                    seed: meta.seed,
                    density: holdout_density(set, meta.max_actors),
                    metrics: evaluate(&policy, &layouts, set, &cfg.sim)?,
                })
            })
            .collect::<Result<_>>()?;
        for line in report_csv(&rows).lines().skip(1) {
            per_ckpt.push_str(&format!("{update},{line}\n"));
        }
        if i + 1 == ckpts.len() {
            final_rows = rows;
        }
    }
    let ckpt_path = sibling(out, "checkpoints");
    std::fs::write(&ckpt_path, per_ckpt)
        .with_context(|| format!("writing {}", ckpt_path.display()))?;
    std::fs::write(out, report_csv(&final_rows))
        .with_context(|| format!("writing {}", out.display()))?;
    let (h1, h2) = trace.half_means();
    eprintln!(
        "{} updates; mean actor count {:.3} (first half) -> {:.3} (second half)",
        trace.updates.len(),
        h1,
        h2
    );
    Ok(())
}
