//! Hold-out scenario generation, deterministic policy evaluation and curriculum complexity traces.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layouts::RoadLayout;
use crate::orchestrator::{run_episodes, EpisodeJob, EpisodeOutcome, TrainError, TrainLog};
use crate::scenario::{ScenarioDoc, ScenarioGraph};
use crate::sim::{SimConfig, TerminalCause};
use crate::student::{Policy, PpoConfig};
use crate::teacher::{generate_scenario_with_count, GeneratorConfig, TeacherError};

pub const SMOOTHING_WINDOW: usize = 50;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("density {0} is outside [0, 1]")]
    BadDensity(f64),
    #[error("no hold-out layouts")]
    NoLayouts,
    #[error("no scenarios to evaluate")]
    NoScenarios,
    #[error(transparent)]
    Teacher(#[from] TeacherError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
}

/// `n` scenarios on hold-out layouts with exactly `round(density * max_actors)` actors each.
pub fn generate_holdout(
    layouts: &[RoadLayout],
    cfg: &GeneratorConfig,
    density: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<ScenarioGraph>, EvalError> {
    if !(0.0..=1.0).contains(&density) {
        return Err(EvalError::BadDensity(density));
    }
    if layouts.is_empty() {
        return Err(EvalError::NoLayouts);
    }
    let count = (density * cfg.max_actors as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Ok(generate_scenario_with_count(layouts, cfg, count, &mut rng)?))
        .collect()
}

pub fn save_scenarios(path: &Path, scenarios: &[ScenarioGraph]) -> Result<(), EvalError> {
    let docs: Vec<ScenarioDoc> = scenarios.iter().cloned().map(ScenarioDoc).collect();
    let text = serde_json::to_string(&docs).map_err(|source| EvalError::Json {
        path: path.display().to_string(),
        source,
    })?;
    std::fs::write(path, text).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_scenarios(path: &Path) -> Result<Vec<ScenarioGraph>, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let docs: Vec<ScenarioDoc> = serde_json::from_str(&text).map_err(|source| EvalError::Json {
        path: path.display().to_string(),
        source,
    })?;
    Ok(docs.into_iter().map(|d| d.0).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population mean and standard deviation.
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self::default();
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub episodes: usize,
    pub success_pct: f64,
    pub offroad_pct: f64,
    pub collision_pct: f64,
    pub timeout_pct: f64,
    pub reward: MeanStd,
    pub progress: MeanStd,
    pub velocity: MeanStd,
}

impl MetricsReport {
    pub fn from_outcomes(outcomes: &[EpisodeOutcome]) -> Self {
        let n = outcomes.len();
        let pct = |c: TerminalCause| {
            if n == 0 {
                0.0
            } else {
                100.0 * outcomes.iter().filter(|o| o.cause == c).count() as f64 / n as f64
            }
        };
        let col = |f: fn(&EpisodeOutcome) -> f64| outcomes.iter().map(f).collect::<Vec<_>>();
        Self {
            episodes: n,
            success_pct: pct(TerminalCause::Success),
            offroad_pct: pct(TerminalCause::OffRoad),
            collision_pct: pct(TerminalCause::Collision),
            timeout_pct: pct(TerminalCause::Timeout),
            reward: MeanStd::of(&col(|o| o.episode_return)),
            progress: MeanStd::of(&col(|o| o.progress)),
            velocity: MeanStd::of(&col(|o| o.mean_speed)),
        }
    }
}

/// Run the deterministic policy once on every scenario.
pub fn evaluate(
    policy: &Policy,
    layouts: &[RoadLayout],
    scenarios: &[ScenarioGraph],
    sim_cfg: &SimConfig,
) -> Result<MetricsReport, EvalError> {
    if scenarios.is_empty() {
        return Err(EvalError::NoScenarios);
    }
    let jobs: Vec<EpisodeJob> = scenarios
        .iter()
        .map(|s| EpisodeJob {
            scenario: s.clone(),
            seed: 0,
        })
        .collect();
    let outcomes = run_episodes(
        policy,
        layouts,
        &jobs,
        sim_cfg,
        &PpoConfig::default(),
        false,
        true,
    )?;
    Ok(MetricsReport::from_outcomes(&outcomes))
}

/// One row of the evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub framework: String,
    pub seed: u64,
    pub density: f64,
    pub metrics: MetricsReport,
}

pub const REPORT_HEADER: &str = "framework,seed,density,success_pct,offroad_pct,collision_pct,reward_mean,reward_std,progress_mean,progress_std,vel_mean,vel_std";

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(
            out,
            "{},{},{:.2},{:.2},{:.2},{:.2},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
            r.framework,
            r.seed,
            r.density,
            m.success_pct,
            m.offroad_pct,
            m.collision_pct,
            m.reward.mean,
            m.reward.std,
            m.progress.mean,
            m.progress.std,
            m.velocity.mean,
            m.velocity.std
        );
    }
    out
}

/// Mean actor count per policy update and its trailing moving average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityTrace {
    pub updates: Vec<usize>,
    pub mean_actors: Vec<f64>,
    pub smoothed: Vec<f64>,
}

impl ComplexityTrace {
    /// Means of the first and second halves of the raw series.
    pub fn half_means(&self) -> (f64, f64) {
        let h = self.mean_actors.len() / 2;
        let mean = |xs: &[f64]| {
            if xs.is_empty() {
                f64::NAN
            } else {
                xs.iter().sum::<f64>() / xs.len() as f64
            }
        };
        (mean(&self.mean_actors[..h]), mean(&self.mean_actors[h..]))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("update,mean_actor_count,smoothed\n");
        for ((u, m), s) in self
            .updates
            .iter()
            .zip(&self.mean_actors)
            .zip(&self.smoothed)
        {
            let _ = writeln!(out, "{u},{m:.6},{s:.6}");
        }
        out
    }
}

pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut sum = 0.0;
    xs.iter()
        .enumerate()
        .map(|(i, x)| {
            sum += x;
            if i >= w {
                sum -= xs[i - w];
            }
            sum / (i + 1).min(w) as f64
        })
        .collect()
}

pub fn complexity_trace(log: &TrainLog, window: usize) -> ComplexityTrace {
    let (updates, mean_actors): (Vec<usize>, Vec<f64>) = log
        .training_updates()
        .filter_map(|u| Some((u.update?, u.mean_actor_count?)))
        .unzip();
    let smoothed = moving_average(&mean_actors, window);
    ComplexityTrace {
        updates,
        mean_actors,
        smoothed,
    }
}

/// Update-to-update variability: half the mean squared successive difference.
pub fn successive_difference_variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let ss: f64 = xs.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum();
    ss / (2.0 * (xs.len() - 1) as f64)
}
