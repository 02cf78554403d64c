//! Training loops: curriculum replay with editing, domain randomization, and a fixed scenario set.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curriculum::{decide_replay, CurriculumError, EntryId, ReplayConfig, ScenarioBuffer};
use crate::layouts::{generate_layouts, split_library, LayoutError, LayoutLibrary, RoadLayout};
use crate::learning_potential::{positive_value_loss, td_errors, PotentialError};
use crate::scenario::{LayoutId, ScenarioBounds, ScenarioGraph};
use crate::sim::{SimConfig, SimError, Simulator, TerminalCause, OBS_DIM};
use crate::student::{
    Learner, Policy, PpoConfig, Rollout, StudentConfig, StudentError, UpdateStats,
};
use crate::teacher::{edit, generate_scenario, GeneratorConfig, TeacherError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("config parse: {0}")]
    ConfigParse(#[from] toml::de::Error),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Teacher(#[from] TeacherError),
    #[error(transparent)]
    Curriculum(#[from] CurriculumError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Student(#[from] StudentError),
    #[error(transparent)]
    Potential(#[from] PotentialError),
    #[error("layout {0} is not in the library")]
    UnknownLayout(LayoutId),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
    #[error("worker pool: {0}")]
    Pool(String),
}

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> TrainError {
    let context = context.into();
    move |source| TrainError::Io { context, source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Framework {
    Fixed,
    Dr,
    Acl,
}

impl Framework {
    pub fn as_str(self) -> &'static str {
        match self {
            Framework::Fixed => "fixed",
            Framework::Dr => "dr",
            Framework::Acl => "acl",
        }
    }
}

impl std::str::FromStr for Framework {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fixed" => Ok(Framework::Fixed),
            "dr" => Ok(Framework::Dr),
            "acl" => Ok(Framework::Acl),
            other => Err(format!("unknown framework `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub framework: Framework,
    pub seed: u64,
    pub workers: usize,
    pub total_env_steps: u64,
    /// Scenarios per policy update for the DR and Fixed baselines; defaults to the replay batch size.
    pub episodes_per_update: Option<usize>,
    pub fixed_set_size: usize,
    /// Checkpoint every this many policy updates (0 disables periodic checkpoints).
    pub checkpoint_every: usize,
    pub layout_count: usize,
    pub layout_seed: u64,
    pub holdout_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            framework: Framework::Acl,
            seed: 0,
            workers: 8,
            total_env_steps: 200_000,
            episodes_per_update: None,
            fixed_set_size: 64,
            checkpoint_every: 10,
            layout_count: 24,
            layout_seed: 7,
            holdout_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub replay: ReplayConfig,
    pub generator: GeneratorConfig,
    pub sim: SimConfig,
    pub student: StudentConfig,
    pub run: RunConfig,
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let cfg: TrainConfig = toml::from_str(text)?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn check(&self) -> Result<(), TrainError> {
        self.replay.check()?;
        self.generator.check(&ScenarioBounds::default())?;
        if self.run.workers == 0 {
            return Err(TrainError::Config("workers must be at least 1".into()));
        }
        if self.run.total_env_steps == 0 {
            return Err(TrainError::Config(
                "total_env_steps must be positive".into(),
            ));
        }
        if self.run.framework == Framework::Fixed && self.run.fixed_set_size == 0 {
            return Err(TrainError::Config("fixed_set_size must be positive".into()));
        }
        if self.run.episodes_per_update == Some(0) {
            return Err(TrainError::Config(
                "episodes_per_update must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn episodes_per_update(&self) -> usize {
        self.run
            .episodes_per_update
            .unwrap_or(self.replay.batch_size)
    }

    /// Layout library shared by every framework and seed.
    pub fn library(&self) -> Result<LayoutLibrary, TrainError> {
        let layouts = generate_layouts(self.run.layout_count, self.run.layout_seed);
        Ok(split_library(
            layouts,
            self.run.holdout_fraction,
            self.run.layout_seed,
        )?)
    }
}

/// Result of one simulated episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutcome {
    pub rollout: Rollout,
    /// Positive value loss of the episode.
    pub score: f64,
    pub episode_return: f64,
    pub cause: TerminalCause,
    pub progress: f64,
    pub mean_speed: f64,
    pub steps: usize,
}

/// Run one episode with `policy`. Observations and actions are retained only
/// when `train` is set; the score is computed either way.
#[allow(clippy::too_many_arguments)]
pub fn collect_rollout<R: Rng + ?Sized>(
    policy: &Policy,
    layout: &RoadLayout,
    scenario: &ScenarioGraph,
    sim_cfg: &SimConfig,
    ppo: &PpoConfig,
    train: bool,
    deterministic: bool,
    rng: &mut R,
) -> Result<EpisodeOutcome, TrainError> {
    let (mut sim, mut obs) = Simulator::reset(layout, scenario, sim_cfg)?;
    let mut r = Rollout::default();
    let mut speed_sum = 0.0;
    let mut ret = 0.0;
    loop {
        let out = policy.act(&obs, rng, deterministic)?;
        let action = out.frenet(&policy.bounds);
        let step = sim.step(action)?;
        if train {
            r.obs.push(std::mem::take(&mut obs));
            r.actions.push(out.raw);
            r.log_probs.push(out.log_prob);
        }
        r.values.push(out.value);
        r.rewards.push(step.reward);
        r.dones.push(step.done);
        ret += step.reward;
        speed_sum += sim.state().ego.speed;
        obs = step.observation;
        if step.done {
            r.bootstrap_value = if step.cause == TerminalCause::Timeout {
                policy.value(&obs)?
            } else {
                0.0
            };
            let deltas = td_errors(&r.trajectory(), ppo.gamma)?;
            let score = positive_value_loss(&deltas, ppo.gamma, ppo.lambda)?;
            let steps = r.rewards.len();
            if !train {
                r.values.clear();
                r.rewards.clear();
                r.dones.clear();
            }
            return Ok(EpisodeOutcome {
                rollout: r,
                score,
                episode_return: ret,
                cause: step.cause,
                progress: sim.progress(),
                mean_speed: speed_sum / steps as f64,
                steps,
            });
        }
    }
}

/// One episode request for the worker pool.
#[derive(Debug, Clone)]
pub struct EpisodeJob {
    pub scenario: ScenarioGraph,
    pub seed: u64,
}

/// Run `jobs` in parallel; results keep job order and depend only on each job's seed.
pub fn run_episodes(
    policy: &Policy,
    library: &[RoadLayout],
    jobs: &[EpisodeJob],
    sim_cfg: &SimConfig,
    ppo: &PpoConfig,
    train: bool,
    deterministic: bool,
) -> Result<Vec<EpisodeOutcome>, TrainError> {
    jobs.par_iter()
        .map(|job| {
            let layout = library
                .iter()
                .find(|l| l.id == job.scenario.layout_id)
                .ok_or(TrainError::UnknownLayout(job.scenario.layout_id))?;
            let mut rng = ChaCha8Rng::seed_from_u64(job.seed);
            collect_rollout(
                policy,
                layout,
                &job.scenario,
                sim_cfg,
                ppo,
                train,
                deterministic,
                &mut rng,
            )
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeKind {
    Init,
    Explore,
    Train,
    Score,
}

impl EpisodeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EpisodeKind::Init => "init",
            EpisodeKind::Explore => "explore",
            EpisodeKind::Train => "train",
            EpisodeKind::Score => "score",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: u64,
    pub iteration: usize,
    pub kind: EpisodeKind,
    pub scenario_id: u64,
    pub actors: usize,
    pub episode_return: f64,
    pub cause: TerminalCause,
    pub score: f64,
    pub steps: usize,
}

/// One loop iteration; `stats` is present only when the policy was updated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub iteration: usize,
    pub update: Option<usize>,
    pub decision: Option<bool>,
    pub env_steps: u64,
    pub scenario_ids: Vec<u64>,
    pub mean_actor_count: Option<f64>,
    pub buffer_size: usize,
    pub buffer_mean_score: f64,
    pub buffer_min_score: f64,
    pub train_return_mean: Option<f64>,
    pub train_success_rate: Option<f64>,
    pub stats: Option<UpdateStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub framework: Framework,
    pub seed: u64,
    /// Environment steps consumed by the whole run.
    pub env_steps: u64,
    pub updates: Vec<UpdateRecord>,
    pub episodes: Vec<EpisodeRecord>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "iteration,update,decision,env_steps,scenario_ids,mean_actor_count,buffer_size,buffer_mean_score,buffer_min_score,train_return_mean,train_success_rate,policy_loss,value_loss,entropy,approx_kl,clip_fraction";

    /// Records that trained the policy.
    pub fn training_updates(&self) -> impl Iterator<Item = &UpdateRecord> {
        self.updates.iter().filter(|u| u.update.is_some())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for u in &self.updates {
            let ids: Vec<String> = u.scenario_ids.iter().map(u64::to_string).collect();
            let s = u.stats.as_ref();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{:.6},{:.6},{},{},{},{},{},{},{}",
                u.iteration,
                u.update.map(|x| x.to_string()).unwrap_or_default(),
                u.decision
                    .map(|d| (d as u8).to_string())
                    .unwrap_or_default(),
                u.env_steps,
                ids.join(";"),
                fmt_opt(u.mean_actor_count),
                u.buffer_size,
                u.buffer_mean_score,
                u.buffer_min_score,
                fmt_opt(u.train_return_mean),
                fmt_opt(u.train_success_rate),
                fmt_opt(s.map(|s| s.policy_loss)),
                fmt_opt(s.map(|s| s.value_loss)),
                fmt_opt(s.map(|s| s.entropy)),
                fmt_opt(s.map(|s| s.approx_kl)),
                fmt_opt(s.map(|s| s.clip_fraction)),
            );
        }
        out
    }

    /// Parse the per-iteration CSV back; episode records are not included.
    pub fn from_csv(text: &str, framework: Framework, seed: u64) -> Result<Self, TrainError> {
        let mut rdr = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let bad = |m: String| TrainError::Config(format!("trainlog: {m}"));
        let mut updates = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let get = |i: usize| rec.get(i).unwrap_or("");
            let opt_f = |i: usize| -> Result<Option<f64>, TrainError> {
                let s = get(i);
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse()
                        .map(Some)
                        .map_err(|_| bad(format!("bad number `{s}`")))
                }
            };
            let num = |i: usize| -> Result<f64, TrainError> {
                get(i)
                    .parse()
                    .map_err(|_| bad(format!("bad number `{}`", get(i))))
            };
            let stats = match (opt_f(11)?, opt_f(12)?, opt_f(13)?, opt_f(14)?, opt_f(15)?) {
                (Some(p), Some(v), Some(e), Some(k), Some(c)) => Some(UpdateStats {
                    policy_loss: p,
                    value_loss: v,
                    entropy: e,
                    approx_kl: k,
                    clip_fraction: c,
                    ..Default::default()
                }),
                _ => None,
            };
            updates.push(UpdateRecord {
                iteration: num(0)? as usize,
                update: opt_f(1)?.map(|x| x as usize),
                decision: opt_f(2)?.map(|x| x != 0.0),
                env_steps: num(3)? as u64,
                scenario_ids: get(4)
                    .split(';')
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse().map_err(|_| bad(format!("bad id `{s}`"))))
                    .collect::<Result<_, _>>()?,
                mean_actor_count: opt_f(5)?,
                buffer_size: num(6)? as usize,
                buffer_mean_score: num(7)?,
                buffer_min_score: num(8)?,
                train_return_mean: opt_f(9)?,
                train_success_rate: opt_f(10)?,
                stats,
            });
        }
        Ok(Self {
            framework,
            seed,
            env_steps: updates.last().map_or(0, |u| u.env_steps),
            updates,
            episodes: Vec::new(),
        })
    }

    pub fn episodes_csv(&self) -> String {
        let mut out =
            String::from("episode,iteration,kind,scenario_id,actors,return,cause,score,steps\n");
        for e in &self.episodes {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.6},{},{:.6},{}",
                e.episode,
                e.iteration,
                e.kind.as_str(),
                e.scenario_id,
                e.actors,
                e.episode_return,
                e.cause.as_str(),
                e.score,
                e.steps
            );
        }
        out
    }
}

/// Run metadata written next to the training outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub framework: Framework,
    pub seed: u64,
    pub max_actors: usize,
    pub updates: usize,
    pub env_steps: u64,
}

/// Training state: policy learner, scenario buffer, counters and log.
pub struct Trainer {
    cfg: TrainConfig,
    library: LayoutLibrary,
    learner: Learner,
    rng: ChaCha8Rng,
    buffer: ScenarioBuffer,
    /// Buffer entry id to scenario id.
    entry_scenarios: HashMap<EntryId, u64>,
    fixed_set: Vec<(u64, ScenarioGraph)>,
    fixed_cursor: usize,
    next_scenario_id: u64,
    env_steps: u64,
    episode_clock: u64,
    updates: usize,
    iteration: usize,
    log: TrainLog,
    out_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.check()?;
        let library = cfg.library()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);
        let policy = Policy::new(OBS_DIM, 2, &cfg.student, &mut rng);
        let learner = Learner::new(policy, cfg.student.ppo.clone());
        let buffer = ScenarioBuffer::new(cfg.replay.capacity);
        let log = TrainLog {
            framework: cfg.run.framework,
            seed: cfg.run.seed,
            env_steps: 0,
            updates: Vec::new(),
            episodes: Vec::new(),
        };
        Ok(Self {
            cfg,
            library,
            learner,
            rng,
            buffer,
            entry_scenarios: HashMap::new(),
            fixed_set: Vec::new(),
            fixed_cursor: 0,
            next_scenario_id: 0,
            env_steps: 0,
            episode_clock: 0,
            updates: 0,
            iteration: 0,
            log,
            out_dir: None,
        })
    }

    /// Train the Fixed framework on these scenarios instead of generated ones.
    pub fn with_fixed_set(mut self, scenarios: Vec<ScenarioGraph>) -> Self {
        self.fixed_set = scenarios
            .into_iter()
            .map(|s| {
                let id = self.next_scenario_id;
                self.next_scenario_id += 1;
                (id, s)
            })
            .collect();
        self
    }

    /// Write logs and checkpoints into `dir`.
    pub fn with_output(mut self, dir: &Path) -> Self {
        self.out_dir = Some(dir.to_path_buf());
        self
    }

    pub fn library(&self) -> &LayoutLibrary {
        &self.library
    }

    pub fn policy(&self) -> &Policy {
        &self.learner.policy
    }

    pub fn buffer(&self) -> &ScenarioBuffer {
        &self.buffer
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    fn budget_left(&self) -> bool {
        self.env_steps < self.cfg.run.total_env_steps
    }

    fn new_scenario_id(&mut self) -> u64 {
        let id = self.next_scenario_id;
        self.next_scenario_id += 1;
        id
    }

    fn generate(&mut self, n: usize) -> Result<Vec<(u64, ScenarioGraph)>, TrainError> {
        (0..n)
            .map(|_| {
                let g = generate_scenario(&self.library.train, &self.cfg.generator, &mut self.rng)?;
                Ok((self.new_scenario_id(), g))
            })
            .collect()
    }

    fn layout(&self, id: LayoutId) -> Result<&RoadLayout, TrainError> {
        self.library
            .train
            .iter()
            .chain(&self.library.holdout)
            .find(|l| l.id == id)
            .ok_or(TrainError::UnknownLayout(id))
    }

    /// Run episodes and account for their steps and the episode clock.
    fn episodes(
        &mut self,
        scenarios: &[(u64, ScenarioGraph)],
        kind: EpisodeKind,
    ) -> Result<Vec<EpisodeOutcome>, TrainError> {
        let jobs: Vec<EpisodeJob> = scenarios
            .iter()
            .map(|(_, s)| EpisodeJob {
                scenario: s.clone(),
                seed: self.rng.random(),
            })
            .collect();
        let train = kind == EpisodeKind::Train;
        let all: Vec<RoadLayout> = self
            .library
            .train
            .iter()
            .chain(&self.library.holdout)
            .cloned()
            .collect();
        let outcomes = run_episodes(
            &self.learner.policy,
            &all,
            &jobs,
            &self.cfg.sim,
            &self.cfg.student.ppo,
            train,
            false,
        )?;
        for ((id, s), o) in scenarios.iter().zip(&outcomes) {
            self.env_steps += o.steps as u64;
            self.log.env_steps = self.env_steps;
            self.log.episodes.push(EpisodeRecord {
                episode: self.episode_clock,
                iteration: self.iteration,
                kind,
                scenario_id: *id,
                actors: s.actor_count(),
                episode_return: o.episode_return,
                cause: o.cause,
                score: o.score,
                steps: o.steps,
            });
            self.episode_clock += 1;
        }
        Ok(outcomes)
    }

    fn insert(&mut self, id: u64, scenario: ScenarioGraph, score: f64) -> Result<(), TrainError> {
        let before: Vec<EntryId> = self.buffer.entries().iter().map(|e| e.id).collect();
        if self
            .buffer
            .maybe_insert(scenario, score, self.episode_clock)?
        {
            let new_id = self.buffer.entries().last().expect("inserted").id;
            self.entry_scenarios.insert(new_id, id);
            if before.len() == self.buffer.len() {
                let alive: std::collections::HashSet<EntryId> =
                    self.buffer.entries().iter().map(|e| e.id).collect();
                for old in before.into_iter().filter(|e| !alive.contains(e)) {
                    self.entry_scenarios.remove(&old);
                }
            }
        }
        Ok(())
    }

    /// Fill the buffer to `ρ·N` with scored random scenarios.
    pub fn init_buffer(&mut self) -> Result<(), TrainError> {
        let target = self.cfg.replay.initial_fill();
        while self.buffer.len() < target && self.budget_left() {
            let n = (target - self.buffer.len()).min(self.cfg.replay.batch_size);
            let batch = self.generate(n)?;
            let outcomes = self.episodes(&batch, EpisodeKind::Init)?;
            for ((id, s), o) in batch.into_iter().zip(outcomes) {
                self.insert(id, s, o.score)?;
            }
        }
        Ok(())
    }

    fn train_on(
        &mut self,
        scenarios: &[(u64, ScenarioGraph)],
    ) -> Result<(Vec<EpisodeOutcome>, UpdateStats), TrainError> {
        let outcomes = self.episodes(scenarios, EpisodeKind::Train)?;
        let rollouts: Vec<Rollout> = outcomes
            .iter()
            .zip(scenarios)
            .map(|(o, (id, _))| {
                let mut r = o.rollout.clone();
                r.scenario_id = Some(*id);
                r
            })
            .collect();
        let stats = self.learner.update(&rollouts, &mut self.rng)?;
        self.updates += 1;
        Ok((outcomes, stats))
    }

    fn record(
        &mut self,
        decision: Option<bool>,
        trained: Option<(&[(u64, ScenarioGraph)], &[EpisodeOutcome], UpdateStats)>,
    ) {
        let (ids, mean_actors, ret, succ, stats) = match trained {
            Some((sc, out, stats)) => {
                let n = sc.len() as f64;
                (
                    sc.iter().map(|(id, _)| *id).collect(),
                    Some(sc.iter().map(|(_, s)| s.actor_count() as f64).sum::<f64>() / n),
                    Some(out.iter().map(|o| o.episode_return).sum::<f64>() / n),
                    Some(
                        out.iter()
                            .filter(|o| o.cause == TerminalCause::Success)
                            .count() as f64
                            / n,
                    ),
                    Some(stats),
                )
            }
            None => (Vec::new(), None, None, None, None),
        };
        self.log.updates.push(UpdateRecord {
            iteration: self.iteration,
            update: stats.as_ref().map(|_| self.updates),
            decision,
            env_steps: self.env_steps,
            scenario_ids: ids,
            mean_actor_count: mean_actors,
            buffer_size: self.buffer.len(),
            buffer_mean_score: self.buffer.mean_score(),
            buffer_min_score: self.buffer.min_score().unwrap_or(0.0),
            train_return_mean: ret,
            train_success_rate: succ,
            stats,
        });
    }

    fn acl_iteration(&mut self) -> Result<(), TrainError> {
        let d = decide_replay(self.cfg.replay.replay_prob, &mut self.rng);
        if !d || self.buffer.is_empty() {
            let batch = self.generate(self.cfg.run.workers)?;
            let outcomes = self.episodes(&batch, EpisodeKind::Explore)?;
            for ((id, s), o) in batch.into_iter().zip(outcomes) {
                self.insert(id, s, o.score)?;
            }
            self.record(Some(false), None);
            return Ok(());
        }
        let now = self.episode_clock;
        let entry_ids = self
            .buffer
            .sample_batch(&self.cfg.replay, &mut self.rng, now)?;
        let sampled: Vec<(u64, ScenarioGraph)> = entry_ids
            .iter()
            .map(|e| {
                let entry = self.buffer.get(*e).expect("sampled entry exists");
                (self.entry_scenarios[e], entry.scenario.clone())
            })
            .collect();
        let (outcomes, stats) = self.train_on(&sampled)?;
        for (e, o) in entry_ids.iter().zip(&outcomes) {
            self.buffer.update_score(*e, o.score)?;
        }
        self.record(Some(true), Some((&sampled, &outcomes, stats)));

        let mut edited = Vec::with_capacity(sampled.len());
        for (_, s) in &sampled {
            let layout = self.layout(s.layout_id)?.clone();
            match edit(
                s,
                self.cfg.replay.edits,
                &layout,
                &self.cfg.generator,
                &mut self.rng,
            ) {
                Ok(g) => {
                    let id = self.new_scenario_id();
                    edited.push((id, g));
                }
                Err(TeacherError::NoApplicableMutation) => {}
                Err(e) => return Err(e.into()),
            }
        }
        if self.budget_left() && !edited.is_empty() {
            let outcomes = self.episodes(&edited, EpisodeKind::Score)?;
            for ((id, s), o) in edited.into_iter().zip(outcomes) {
                self.insert(id, s, o.score)?;
            }
        }
        Ok(())
    }

    fn baseline_iteration(&mut self) -> Result<(), TrainError> {
        let n = self.cfg.episodes_per_update();
        let batch = match self.cfg.run.framework {
            Framework::Dr => self.generate(n)?,
            Framework::Fixed => {
                if self.fixed_set.is_empty() {
                    self.fixed_set = self.generate(self.cfg.run.fixed_set_size)?;
                }
                let k = self.fixed_set.len();
                (0..n)
                    .map(|i| self.fixed_set[(self.fixed_cursor + i) % k].clone())
                    .collect::<Vec<_>>()
            }
            Framework::Acl => unreachable!("handled by acl_iteration"),
        };
        if self.cfg.run.framework == Framework::Fixed {
            self.fixed_cursor = (self.fixed_cursor + n) % self.fixed_set.len();
        }
        let (outcomes, stats) = self.train_on(&batch)?;
        self.record(None, Some((&batch, &outcomes, stats)));
        Ok(())
    }

    /// One loop iteration of the configured framework.
    pub fn iteration(&mut self) -> Result<(), TrainError> {
        let before = self.updates;
        match self.cfg.run.framework {
            Framework::Acl => self.acl_iteration()?,
            _ => self.baseline_iteration()?,
        }
        self.iteration += 1;
        let every = self.cfg.run.checkpoint_every;
        if self.updates > before && every > 0 && self.updates.is_multiple_of(every) {
            self.checkpoint(self.updates)?;
        }
        Ok(())
    }

    /// Train until the step budget is consumed; outputs are flushed even when
    /// a component fails.
    pub fn run(mut self) -> Result<(Policy, TrainLog), TrainError> {
        let result = self.run_loop();
        let flushed = self.finish();
        result?;
        flushed?;
        Ok((self.learner.policy, self.log))
    }

    fn run_loop(&mut self) -> Result<(), TrainError> {
        if let Some(dir) = &self.out_dir {
            fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))?;
            let write = |name: &str, text: String| {
                let p = dir.join(name);
                fs::write(&p, text).map_err(io_err(format!("writing {}", p.display())))
            };
            write("config.toml", self.cfg.to_toml())?;
            write(
                "layouts_train.json",
                serde_json::to_string(&self.library.train)?,
            )?;
            write(
                "layouts_holdout.json",
                serde_json::to_string(&self.library.holdout)?,
            )?;
        }
        if self.cfg.run.framework == Framework::Acl {
            self.init_buffer()?;
        }
        while self.budget_left() {
            self.iteration()?;
        }
        Ok(())
    }

    fn checkpoint(&self, update: usize) -> Result<(), TrainError> {
        let Some(dir) = &self.out_dir else {
            return Ok(());
        };
        let p = dir.join(format!("policy_{update}.ckpt"));
        fs::write(&p, self.learner.policy.to_json()?)
            .map_err(io_err(format!("writing {}", p.display())))?;
        if self.cfg.run.framework == Framework::Acl {
            let p = dir.join(format!("buffer_{update}.json"));
            fs::write(&p, self.buffer.to_json()?)
                .map_err(io_err(format!("writing {}", p.display())))?;
        }
        Ok(())
    }

    fn finish(&self) -> Result<(), TrainError> {
        let Some(dir) = &self.out_dir else {
            return Ok(());
        };
        self.checkpoint(self.updates)?;
        let p = dir.join("policy_final.ckpt");
        fs::write(&p, self.learner.policy.to_json()?)
            .map_err(io_err(format!("writing {}", p.display())))?;
        let write = |name: &str, text: String| {
            let p = dir.join(name);
            fs::write(&p, text).map_err(io_err(format!("writing {}", p.display())))
        };
        write("trainlog.csv", self.log.to_csv())?;
        write("episodes.csv", self.log.episodes_csv())?;
        let meta = RunMeta {
            framework: self.cfg.run.framework,
            seed: self.cfg.run.seed,
            max_actors: self.cfg.generator.max_actors,
            updates: self.updates,
            env_steps: self.env_steps,
        };
        write("run.json", serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }
}

/// Train with `cfg`, using a worker pool of `cfg.run.workers` threads.
pub fn train(cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<(Policy, TrainLog), TrainError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.run.workers)
        .build()
        .map_err(|e| TrainError::Pool(e.to_string()))?;
    pool.install(|| {
        let mut t = Trainer::new(cfg.clone())?;
        if let Some(dir) = out_dir {
            t = t.with_output(dir);
        }
        t.run()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(framework: Framework, steps: u64) -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.run.framework = framework;
        cfg.run.total_env_steps = steps;
        cfg.run.workers = 2;
        cfg.run.layout_count = 6;
        cfg.run.fixed_set_size = 4;
        cfg.replay.capacity = 16;
        cfg.replay.batch_size = 4;
        cfg.student.hidden = 16;
        cfg.student.ppo.minibatch = 64;
        cfg.student.ppo.epochs = 1;
        cfg
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = small(Framework::Dr, 1234);
        let back = TrainConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        let partial = TrainConfig::from_toml("[run]\nseed = 5\nframework = \"fixed\"\n").unwrap();
        assert_eq!(partial.run.seed, 5);
        assert_eq!(partial.run.framework, Framework::Fixed);
        assert_eq!(partial.replay, ReplayConfig::default());
        assert!(TrainConfig::from_toml("[bogus]\nx = 1\n").is_err());
        assert!(TrainConfig::from_toml("[run]\nworkers = 0\n").is_err());
    }

    #[test]
    fn budget_counts_every_episode() {
        for fw in [Framework::Acl, Framework::Dr, Framework::Fixed] {
            let (_, log) = train(&small(fw, 1500), None).unwrap();
            let total: u64 = log.episodes.iter().map(|e| e.steps as u64).sum();
            assert_eq!(log.env_steps, total, "{fw:?}");
            assert!(log.updates.iter().all(|u| u.env_steps <= total));
            assert!(total >= 1500);
            if fw != Framework::Acl {
                assert!(log.episodes.iter().all(|e| e.kind == EpisodeKind::Train));
                assert!(log.updates.iter().all(|u| u.update.is_some()));
            }
        }
    }

    #[test]
    fn acl_without_replay_never_updates() {
        let mut cfg = small(Framework::Acl, 1500);
        cfg.replay.replay_prob = 0.0;
        let (policy, log) = train(&cfg, None).unwrap();
        assert_eq!(log.training_updates().count(), 0);
        assert!(log.episodes.iter().all(|e| e.kind != EpisodeKind::Train));
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);
        let fresh = Policy::new(OBS_DIM, 2, &cfg.student, &mut rng);
        assert_eq!(policy.flat_params(), fresh.flat_params());
    }

    #[test]
    fn acl_loop_fills_and_edits() {
        let cfg = small(Framework::Acl, 3000);
        let (_, log) = train(&cfg, None).unwrap();
        let init = log
            .episodes
            .iter()
            .filter(|e| e.kind == EpisodeKind::Init)
            .count();
        assert_eq!(init, cfg.replay.initial_fill());
        for u in log.training_updates() {
            assert_eq!(u.scenario_ids.len(), cfg.replay.batch_size);
            assert!(u.buffer_size <= cfg.replay.capacity);
            assert_eq!(u.decision, Some(true));
        }
        assert!(log.episodes.iter().any(|e| e.kind == EpisodeKind::Score));
    }

    #[test]
    fn training_is_deterministic_across_worker_counts() {
        let cfg = small(Framework::Acl, 2000);
        let (p1, l1) = train(&cfg, None).unwrap();
        let mut single = cfg.clone();
        single.run.workers = 1;
        let (p2, l2) = train(&single, None).unwrap();
        assert_eq!(p1.flat_params(), p2.flat_params());
        assert_eq!(l1.to_csv(), l2.to_csv());
        let (p3, _) = rayon::ThreadPoolBuilder::new()
            .num_threads(3)
            .build()
            .unwrap()
            .install(|| Trainer::new(cfg.clone()).unwrap().run())
            .unwrap();
        assert_eq!(p1.flat_params(), p3.flat_params());
    }

    #[test]
    fn fixed_set_cycles() {
        let cfg = small(Framework::Fixed, 2000);
        let (_, log) = train(&cfg, None).unwrap();
        let ids: std::collections::BTreeSet<u64> =
            log.episodes.iter().map(|e| e.scenario_id).collect();
        assert!(ids.len() <= cfg.run.fixed_set_size);
    }

    #[test]
    fn csv_round_trip() {
        let (_, log) = train(&small(Framework::Acl, 1500), None).unwrap();
        let back = TrainLog::from_csv(&log.to_csv(), log.framework, log.seed).unwrap();
        assert_eq!(back.updates.len(), log.updates.len());
        assert_eq!(back.to_csv(), log.to_csv());
    }

    #[test]
    fn writes_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(Framework::Acl, 1500);
        cfg.run.checkpoint_every = 1;
        let (_, log) = train(&cfg, Some(dir.path())).unwrap();
        let updates = log.training_updates().count();
        for name in [
            "trainlog.csv",
            "episodes.csv",
            "run.json",
            "config.toml",
            "policy_final.ckpt",
            "layouts_holdout.json",
        ] {
            assert!(dir.path().join(name).exists(), "{name}");
        }
        for u in 1..=updates {
            assert!(dir.path().join(format!("policy_{u}.ckpt")).exists());
            assert!(dir.path().join(format!("buffer_{u}.json")).exists());
        }
        let text = fs::read_to_string(dir.path().join("buffer_1.json")).unwrap();
        assert!(ScenarioBuffer::from_json(&text, cfg.replay.capacity).is_ok());
    }
}
