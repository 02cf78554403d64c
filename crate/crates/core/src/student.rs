//! Actor-critic student: Gaussian policy over Frenet terminal conditions and
//! a clipped-surrogate policy-gradient update.

use std::f64::consts::PI;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frenet::{ActionBounds, FrenetAction};
use crate::learning_potential::{gae, td_errors, PotentialError, Trajectory};
use crate::nn::{clip_grad_norm, Adam, Mlp};

pub const LOG_STD_RANGE: (f64, f64) = (-5.0, 1.0);
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StudentError {
    #[error("observation has {got} entries, expected {expected}")]
    ObsDim { expected: usize, got: usize },
    #[error("non-finite observation entry at index {0}")]
    NonFiniteObs(usize),
    #[error("no rollouts to learn from")]
    EmptyBatch,
    #[error("rollout {index} is inconsistent: {reason}")]
    BadRollout { index: usize, reason: String },
    #[error("non-finite gradient (norm {norm}) in epoch {epoch}, minibatch {minibatch}; policy loss {policy_loss}, value loss {value_loss}")]
    NonFiniteGradient {
        epoch: usize,
        minibatch: usize,
        norm: f64,
        policy_loss: f64,
        value_loss: f64,
    },
    #[error(transparent)]
    Potential(#[from] PotentialError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub clip: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub learning_rate: f64,
    pub gamma: f64,
    pub lambda: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            epochs: 4,
            minibatch: 256,
            entropy_coef: 0.01,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            learning_rate: 3e-4,
            gamma: 0.99,
            lambda: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudentConfig {
    pub hidden: usize,
    pub hidden_layers: usize,
    pub log_std_init: f64,
    /// Critic outputs are multiplied by this to give values in reward units.
    pub value_scale: f64,
    pub normalize_obs: bool,
    pub ppo: PpoConfig,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            hidden_layers: 2,
            log_std_init: -0.5,
            value_scale: 10.0,
            normalize_obs: true,
            ppo: PpoConfig::default(),
        }
    }
}

/// Running per-feature mean and variance of observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningNorm {
    pub enabled: bool,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: f64,
    pub clip: f64,
}

impl RunningNorm {
    const VAR_FLOOR: f64 = 1e-2;

    pub fn new(dim: usize, enabled: bool) -> Self {
        Self {
            enabled,
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
            count: 0.0,
            clip: 5.0,
        }
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        if !self.enabled || self.count == 0.0 {
            return x.to_vec();
        }
        x.iter()
            .zip(self.mean.iter().zip(&self.var))
            .map(|(v, (m, s2))| {
                ((v - m) / (s2 + Self::VAR_FLOOR).sqrt()).clamp(-self.clip, self.clip)
            })
            .collect()
    }

    /// Merge a batch of rows with the parallel-variance formula.
    pub fn update<'a, I: IntoIterator<Item = &'a Vec<f64>>>(&mut self, rows: I) {
        if !self.enabled {
            return;
        }
        let dim = self.mean.len();
        let mut n = 0.0;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        let rows: Vec<&Vec<f64>> = rows.into_iter().collect();
        for r in &rows {
            n += 1.0;
            for j in 0..dim {
                sum[j] += r[j];
            }
        }
        if n == 0.0 {
            return;
        }
        let bmean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        for r in &rows {
            for j in 0..dim {
                let d = r[j] - bmean[j];
                sq[j] += d * d;
            }
        }
        let total = self.count + n;
        for j in 0..dim {
            let bvar = sq[j] / n;
            let delta = bmean[j] - self.mean[j];
            let m2 = self.var[j] * self.count + bvar * n + delta * delta * self.count * n / total;
            self.mean[j] += delta * n / total;
            self.var[j] = m2 / total;
        }
        self.count = total;
    }
}

/// Actor mean network, state-independent log standard deviations, critic and
/// observation statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub actor: Mlp,
    pub log_std: Vec<f64>,
    pub critic: Mlp,
    pub norm: RunningNorm,
    pub value_scale: f64,
    pub bounds: ActionBounds,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActOutput {
    /// Pre-squash Gaussian sample (or mean when deterministic).
    pub raw: Vec<f64>,
    pub log_prob: f64,
    pub value: f64,
}

impl ActOutput {
    pub fn frenet(&self, bounds: &ActionBounds) -> FrenetAction {
        bounds.squash([self.raw[0], self.raw[1]])
    }
}

fn gaussian_log_prob(u: &[f64], mu: &[f64], log_std: &[f64]) -> f64 {
    u.iter()
        .zip(mu)
        .zip(log_std)
        .map(|((u, m), ls)| {
            let z = (u - m) / ls.exp();
            -0.5 * z * z - ls - 0.5 * (2.0 * PI).ln()
        })
        .sum()
}

impl Policy {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        act_dim: usize,
        cfg: &StudentConfig,
        rng: &mut R,
    ) -> Self {
        let mut sizes = vec![obs_dim];
        sizes.extend(std::iter::repeat_n(cfg.hidden, cfg.hidden_layers));
        let mut actor_sizes = sizes.clone();
        actor_sizes.push(act_dim);
        sizes.push(1);
        Self {
            actor: Mlp::new(&actor_sizes, 0.01, rng),
            log_std: vec![cfg.log_std_init; act_dim],
            critic: Mlp::new(&sizes, 1.0, rng),
            norm: RunningNorm::new(obs_dim, cfg.normalize_obs),
            value_scale: cfg.value_scale,
            bounds: ActionBounds::default(),
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.actor.input_dim()
    }

    pub fn act_dim(&self) -> usize {
        self.actor.output_dim()
    }

    fn check_obs(&self, obs: &[f64]) -> Result<(), StudentError> {
        if obs.len() != self.obs_dim() {
            return Err(StudentError::ObsDim {
                expected: self.obs_dim(),
                got: obs.len(),
            });
        }
        match obs.iter().position(|x| !x.is_finite()) {
            Some(i) => Err(StudentError::NonFiniteObs(i)),
            None => Ok(()),
        }
    }

    /// Critic estimate in reward units.
    pub fn value(&self, obs: &[f64]) -> Result<f64, StudentError> {
        self.check_obs(obs)?;
        Ok(self.value_scale * self.critic.predict(&self.norm.normalize(obs))[0])
    }

    pub fn act<R: Rng + ?Sized>(
        &self,
        obs: &[f64],
        rng: &mut R,
        deterministic: bool,
    ) -> Result<ActOutput, StudentError> {
        self.check_obs(obs)?;
        let x = self.norm.normalize(obs);
        let mu = self.actor.predict(&x);
        let raw: Vec<f64> = if deterministic {
            mu.clone()
        } else {
            mu.iter()
                .zip(&self.log_std)
                .map(|(m, ls)| {
                    let eps: f64 = StandardNormal.sample(rng);
                    m + ls.exp() * eps
                })
                .collect()
        };
        let log_prob = gaussian_log_prob(&raw, &mu, &self.log_std);
        let value = self.value_scale * self.critic.predict(&x)[0];
        Ok(ActOutput {
            raw,
            log_prob,
            value,
        })
    }

    pub fn param_count(&self) -> usize {
        self.actor.param_count() + self.log_std.len() + self.critic.param_count()
    }

    /// All trainable parameters: actor, log-std, critic.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = self.actor.flat_params();
        v.extend(&self.log_std);
        v.extend(self.critic.flat_params());
        v
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let k = self.actor.set_flat_params(flat);
        let a = self.log_std.len();
        self.log_std.copy_from_slice(&flat[k..k + a]);
        self.critic.set_flat_params(&flat[k + a..]);
    }

    pub fn is_finite(&self) -> bool {
        self.actor.is_finite()
            && self.critic.is_finite()
            && self.log_std.iter().all(|x| x.is_finite())
    }

    pub fn to_json(&self) -> Result<String, StudentError> {
        #[derive(Serialize)]
        struct Ckpt<'a> {
            version: u32,
            policy: &'a Policy,
        }
        serde_json::to_string(&Ckpt {
            version: CHECKPOINT_VERSION,
            policy: self,
        })
        .map_err(|e| StudentError::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, StudentError> {
        #[derive(Deserialize)]
        struct Ckpt {
            version: u32,
            policy: Policy,
        }
        let c: Ckpt =
            serde_json::from_str(text).map_err(|e| StudentError::Checkpoint(e.to_string()))?;
        if c.version != CHECKPOINT_VERSION {
            return Err(StudentError::Checkpoint(format!(
                "unsupported checkpoint version {}",
                c.version
            )));
        }
        if !c.policy.is_finite() {
            return Err(StudentError::Checkpoint("non-finite weights".into()));
        }
        Ok(c.policy)
    }
}

/// One episode of on-policy experience.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Rollout {
    /// Raw (unnormalized) observations.
    pub obs: Vec<Vec<f64>>,
    /// Pre-squash actions.
    pub actions: Vec<Vec<f64>>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    /// V of the state after the last step; 0 when the episode terminated.
    pub bootstrap_value: f64,
    pub scenario_id: Option<u64>,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn trajectory(&self) -> Trajectory {
        Trajectory {
            rewards: self.rewards.clone(),
            values: self.values.clone(),
            bootstrap_value: self.bootstrap_value,
        }
    }

    fn check(&self, index: usize) -> Result<(), StudentError> {
        let n = self.rewards.len();
        let bad = |reason: &str| StudentError::BadRollout {
            index,
            reason: reason.to_string(),
        };
        if n == 0 {
            return Err(bad("empty"));
        }
        if [
            self.obs.len(),
            self.actions.len(),
            self.log_probs.len(),
            self.values.len(),
            self.dones.len(),
        ]
        .iter()
        .any(|&l| l != n)
        {
            return Err(bad("field lengths differ"));
        }
        if self.dones[..n - 1].iter().any(|d| *d) {
            return Err(bad("done before the final step"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    pub samples: usize,
}

/// Flattened training batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Array2<f64>,
    pub u: Array2<f64>,
    pub old_log_prob: Array1<f64>,
    pub advantages: Array1<f64>,
    /// Returns divided by the policy's value scale.
    pub targets: Array1<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Batch {
        let ax = ndarray::Axis(0);
        Batch {
            x: self.x.select(ax, idx),
            u: self.u.select(ax, idx),
            old_log_prob: self.old_log_prob.select(ax, idx),
            advantages: self.advantages.select(ax, idx),
            targets: self.targets.select(ax, idx),
        }
    }
}

/// GAE advantages (normalized over the whole batch) and value targets.
pub fn build_batch(
    policy: &Policy,
    rollouts: &[Rollout],
    cfg: &PpoConfig,
) -> Result<Batch, StudentError> {
    if rollouts.is_empty() {
        return Err(StudentError::EmptyBatch);
    }
    let obs_dim = policy.obs_dim();
    let act_dim = policy.act_dim();
    let n: usize = rollouts.iter().map(Rollout::len).sum();
    let mut x = Array2::zeros((n, obs_dim));
    let mut u = Array2::zeros((n, act_dim));
    let mut old = Array1::zeros(n);
    let mut adv = Array1::zeros(n);
    let mut targets = Array1::zeros(n);
    let mut row = 0;
    for (ri, r) in rollouts.iter().enumerate() {
        r.check(ri)?;
        let deltas = td_errors(&r.trajectory(), cfg.gamma)?;
        let a = gae(&deltas, cfg.gamma, cfg.lambda)?;
        for t in 0..r.len() {
            if r.obs[t].len() != obs_dim || r.actions[t].len() != act_dim {
                return Err(StudentError::BadRollout {
                    index: ri,
                    reason: "observation or action width mismatch".into(),
                });
            }
            let xn = policy.norm.normalize(&r.obs[t]);
            x.row_mut(row).assign(&Array1::from(xn));
            u.row_mut(row).assign(&Array1::from(r.actions[t].clone()));
            old[row] = r.log_probs[t];
            adv[row] = a[t];
            targets[row] = (a[t] + r.values[t]) / policy.value_scale;
            row += 1;
        }
    }
    let mean = adv.mean().unwrap_or(0.0);
    let std = adv
        .mapv(|v: f64| (v - mean) * (v - mean))
        .mean()
        .unwrap_or(0.0)
        .sqrt();
    adv.mapv_inplace(|v| (v - mean) / (std + 1e-8));
    Ok(Batch {
        x,
        u,
        old_log_prob: old,
        advantages: adv,
        targets,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

/// Clipped-surrogate loss on a minibatch and its gradient with respect to
/// [`Policy::flat_params`].
pub fn loss_and_grad(policy: &Policy, mb: &Batch, cfg: &PpoConfig) -> (LossParts, Vec<f64>) {
    let m = mb.len() as f64;
    let act_dim = policy.act_dim();
    let sigma: Vec<f64> = policy.log_std.iter().map(|l| l.exp()).collect();

    let a_cache = policy.actor.forward(&mb.x);
    let mu = a_cache.output();
    let mut d_mu = Array2::zeros(mu.raw_dim());
    let mut d_log_std = vec![0.0; act_dim];
    let mut parts = LossParts::default();
    let log_norm = 0.5 * (2.0 * PI).ln();
    for i in 0..mb.len() {
        let mut logp = 0.0;
        for j in 0..act_dim {
            let z = (mb.u[[i, j]] - mu[[i, j]]) / sigma[j];
            logp += -0.5 * z * z - policy.log_std[j] - log_norm;
        }
        let ratio = (logp - mb.old_log_prob[i]).exp();
        let a = mb.advantages[i];
        let s1 = ratio * a;
        let s2 = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip) * a;
        parts.policy -= s1.min(s2) / m;
        parts.approx_kl += (mb.old_log_prob[i] - logp) / m;
        if (ratio - 1.0).abs() > cfg.clip {
            parts.clip_fraction += 1.0 / m;
        }
        let g = if s1 <= s2 { a * ratio } else { 0.0 };
        let d_logp = -g / m;
        for j in 0..act_dim {
            let z = (mb.u[[i, j]] - mu[[i, j]]) / sigma[j];
            d_mu[[i, j]] = d_logp * z / sigma[j];
            d_log_std[j] += d_logp * (z * z - 1.0);
        }
    }
    parts.entropy = policy
        .log_std
        .iter()
        .map(|l| l + 0.5 * (1.0 + (2.0 * PI).ln()))
        .sum();
    for d in &mut d_log_std {
        *d -= cfg.entropy_coef;
    }

    let c_cache = policy.critic.forward(&mb.x);
    let c = c_cache.output();
    let mut d_c = Array2::zeros(c.raw_dim());
    for i in 0..mb.len() {
        let e = c[[i, 0]] - mb.targets[i];
        parts.value += e * e / m;
        d_c[[i, 0]] = cfg.value_coef * 2.0 * e / m;
    }
    parts.total = parts.policy - cfg.entropy_coef * parts.entropy + cfg.value_coef * parts.value;

    let mut grad = Vec::with_capacity(policy.param_count());
    policy
        .actor
        .backward(&a_cache, &d_mu)
        .flatten_into(&mut grad);
    grad.extend(&d_log_std);
    policy
        .critic
        .backward(&c_cache, &d_c)
        .flatten_into(&mut grad);
    (parts, grad)
}

/// Optimizer state owned by the single updater.
#[derive(Debug, Clone)]
pub struct Learner {
    pub policy: Policy,
    pub opt: Adam,
    pub cfg: PpoConfig,
}

impl Learner {
    pub fn new(policy: Policy, cfg: PpoConfig) -> Self {
        let opt = Adam::new(policy.param_count(), cfg.learning_rate);
        Self { policy, opt, cfg }
    }

    pub fn update<R: Rng + ?Sized>(
        &mut self,
        rollouts: &[Rollout],
        rng: &mut R,
    ) -> Result<UpdateStats, StudentError> {
        ppo_update(&mut self.policy, &mut self.opt, rollouts, &self.cfg, rng)
    }
}

/// Several epochs of shuffled minibatch descent on the clipped surrogate,
/// then fold the batch's observations into the normalizer.
pub fn ppo_update<R: Rng + ?Sized>(
    policy: &mut Policy,
    opt: &mut Adam,
    rollouts: &[Rollout],
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<UpdateStats, StudentError> {
    let batch = build_batch(policy, rollouts, cfg)?;
    let n = batch.len();
    let mb_size = cfg.minibatch.clamp(1, n);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut stats = UpdateStats {
        samples: n,
        ..Default::default()
    };
    let mut count = 0.0;
    for epoch in 0..cfg.epochs {
        idx.shuffle(rng);
        for (k, chunk) in idx.chunks(mb_size).enumerate() {
            let mb = batch.select(chunk);
            let (parts, mut grad) = loss_and_grad(policy, &mb, cfg);
            let norm = clip_grad_norm(&mut grad, cfg.max_grad_norm);
            if !norm.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(StudentError::NonFiniteGradient {
                    epoch,
                    minibatch: k,
                    norm,
                    policy_loss: parts.policy,
                    value_loss: parts.value,
                });
            }
            let mut params = policy.flat_params();
            opt.step(&mut params, &grad);
            policy.set_flat_params(&params);
            for l in &mut policy.log_std {
                *l = l.clamp(LOG_STD_RANGE.0, LOG_STD_RANGE.1);
            }
            stats.policy_loss += parts.policy;
            stats.value_loss += parts.value;
            stats.entropy += parts.entropy;
            stats.approx_kl += parts.approx_kl;
            stats.clip_fraction += parts.clip_fraction;
            stats.grad_norm += norm;
            count += 1.0;
        }
    }
    if count > 0.0 {
        stats.policy_loss /= count;
        stats.value_loss /= count;
        stats.entropy /= count;
        stats.approx_kl /= count;
        stats.clip_fraction /= count;
        stats.grad_norm /= count;
    }
    policy
        .norm
        .update(rollouts.iter().flat_map(|r| r.obs.iter()));
    Ok(stats)
}
