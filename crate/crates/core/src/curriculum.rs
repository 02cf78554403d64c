//! Scenario buffer with rank- and staleness-based prioritized replay.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scenario::{serde_scenario, ScenarioGraph};

pub type EntryId = u64;

#[derive(Debug, Error)]
pub enum CurriculumError {
    #[error("scenario buffer is empty")]
    EmptyBuffer,
    #[error("invalid replay config: {0}")]
    InvalidConfig(String),
    #[error("invalid score {0}")]
    InvalidScore(f64),
    #[error("no buffer entry with id {0}")]
    UnknownEntry(EntryId),
    #[error("buffer checkpoint: {0}")]
    Checkpoint(#[from] serde_json::Error),
    #[error("checkpoint holds {len} entries, capacity is {capacity}")]
    OverCapacity { len: usize, capacity: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReplayConfig {
    /// Buffer capacity N.
    pub capacity: usize,
    /// Replay probability D.
    pub replay_prob: f64,
    /// Mixing weight ω between rank and staleness terms.
    pub mixing: f64,
    /// Rank temperature β.
    pub rank_temperature: f64,
    /// Batch size B.
    pub batch_size: usize,
    /// Initial fill ratio ρ.
    pub fill_ratio: f64,
    /// Edits per replayed scenario N_m.
    pub edits: usize,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            capacity: 1000,
            replay_prob: 0.8,
            mixing: 0.7,
            rank_temperature: 1.0,
            batch_size: 32,
            fill_ratio: 0.5,
            edits: 2,
        }
    }
}

impl ReplayConfig {
    pub fn check(&self) -> Result<(), CurriculumError> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(CurriculumError::InvalidConfig(format!(
                    "{name} = {v} outside [0, 1]"
                )))
            }
        };
        unit("replay_prob", self.replay_prob)?;
        unit("mixing", self.mixing)?;
        unit("fill_ratio", self.fill_ratio)?;
        if !(self.rank_temperature > 0.0) {
            return Err(CurriculumError::InvalidConfig(format!(
                "rank_temperature = {} must be positive",
                self.rank_temperature
            )));
        }
        if self.batch_size == 0 || self.capacity == 0 || self.edits == 0 {
            return Err(CurriculumError::InvalidConfig(
                "capacity, batch_size and edits must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Entries required before the replay loop starts.
    pub fn initial_fill(&self) -> usize {
        ((self.fill_ratio * self.capacity as f64).round() as usize).clamp(1, self.capacity)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferEntry {
    pub id: EntryId,
    #[serde(with = "serde_scenario")]
    pub scenario: ScenarioGraph,
    pub score: f64,
    pub last_sampled: u64,
    pub inserted_at: u64,
}

/// Bernoulli(D) replay decision.
pub fn decide_replay<R: Rng + ?Sized>(d: f64, rng: &mut R) -> bool {
    rng.random_bool(d.clamp(0.0, 1.0))
}

/// Rank-based priorities: descending by score, ties to the earlier index,
/// weight `(1/rank)^(1/β)`.
pub fn rank_probabilities(scores: &[f64], beta: f64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut weights = vec![0.0; scores.len()];
    for (rank0, &i) in order.iter().enumerate() {
        weights[i] = (1.0 / (rank0 + 1) as f64).powf(1.0 / beta);
    }
    normalize(weights)
}

/// Ages `now - last_sampled` normalized; uniform when every age is zero.
pub fn staleness_probabilities(last_sampled: &[u64], now: u64) -> Vec<f64> {
    let ages: Vec<f64> = last_sampled
        .iter()
        .map(|&t| now.saturating_sub(t) as f64)
        .collect();
    if ages.iter().all(|&a| a == 0.0) {
        let n = ages.len() as f64;
        return vec![1.0 / n; ages.len()];
    }
    normalize(ages)
}

fn normalize(mut w: Vec<f64>) -> Vec<f64> {
    let total: f64 = w.iter().sum();
    for x in &mut w {
        *x /= total;
    }
    w
}

pub fn mix_distributions(p_u: &[f64], p_c: &[f64], omega: f64) -> Vec<f64> {
    p_u.iter()
        .zip(p_c)
        .map(|(u, c)| omega * u + (1.0 - omega) * c)
        .collect()
}

/// Bounded buffer of scenarios, kept in insertion order.
#[derive(Debug, Clone)]
pub struct ScenarioBuffer {
    entries: Vec<BufferEntry>,
    capacity: usize,
    next_id: EntryId,
}

impl ScenarioBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "buffer capacity must be positive");
        Self {
            entries: Vec::with_capacity(capacity.min(4096)),
            capacity,
            next_id: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> &[BufferEntry] {
        &self.entries
    }

    pub fn get(&self, id: EntryId) -> Option<&BufferEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn min_score(&self) -> Option<f64> {
        self.entries.iter().map(|e| e.score).min_by(f64::total_cmp)
    }

    pub fn mean_score(&self) -> f64 {
        if self.entries.is_empty() {
            0.0
        } else {
            self.entries.iter().map(|e| e.score).sum::<f64>() / self.entries.len() as f64
        }
    }

    pub fn replay_distribution(
        &self,
        cfg: &ReplayConfig,
        now: u64,
    ) -> Result<Vec<f64>, CurriculumError> {
        if self.entries.is_empty() {
            return Err(CurriculumError::EmptyBuffer);
        }
        let scores: Vec<f64> = self.entries.iter().map(|e| e.score).collect();
        let stamps: Vec<u64> = self.entries.iter().map(|e| e.last_sampled).collect();
        Ok(mix_distributions(
            &rank_probabilities(&scores, cfg.rank_temperature),
            &staleness_probabilities(&stamps, now),
            cfg.mixing,
        ))
    }

    /// Draw `min(B, len)` distinct entries from the replay distribution and
    /// mark them as sampled at `now`.
    pub fn sample_batch<R: Rng + ?Sized>(
        &mut self,
        cfg: &ReplayConfig,
        rng: &mut R,
        now: u64,
    ) -> Result<Vec<EntryId>, CurriculumError> {
        let mut probs = self.replay_distribution(cfg, now)?;
        let k = cfg.batch_size.min(self.entries.len());
        let mut picked = Vec::with_capacity(k);
        for _ in 0..k {
            let total: f64 = probs.iter().sum();
            let idx = if total > 0.0 {
                let mut u = rng.random::<f64>() * total;
                let mut chosen = None;
                for (i, &p) in probs.iter().enumerate() {
                    if p <= 0.0 {
                        continue;
                    }
                    chosen = Some(i);
                    if u < p {
                        break;
                    }
                    u -= p;
                }
                chosen.expect("positive mass")
            } else {
                // Only zero-probability entries remain; take them uniformly.
                let rest: Vec<usize> = (0..probs.len()).filter(|i| !picked.contains(i)).collect();
                rest[rng.random_range(0..rest.len())]
            };
            probs[idx] = 0.0;
            picked.push(idx);
        }
        for &i in &picked {
            self.entries[i].last_sampled = now;
        }
        Ok(picked.into_iter().map(|i| self.entries[i].id).collect())
    }

    /// Insert below capacity; when full, insert only if `score` beats the
    /// minimum, evicting the oldest minimum-score entry.
    pub fn maybe_insert(
        &mut self,
        scenario: ScenarioGraph,
        score: f64,
        now: u64,
    ) -> Result<bool, CurriculumError> {
        if !(score.is_finite() && score >= 0.0) {
            return Err(CurriculumError::InvalidScore(score));
        }
        if self.entries.len() >= self.capacity {
            let (victim, min) = self
                .entries
                .iter()
                .enumerate()
                .min_by(|(ia, a), (ib, b)| a.score.total_cmp(&b.score).then(ia.cmp(ib)))
                .map(|(i, e)| (i, e.score))
                .expect("full buffer is non-empty");
            if score <= min {
                return Ok(false);
            }
            self.entries.remove(victim);
        }
        let id = self.next_id;
        self.next_id += 1;
        self.entries.push(BufferEntry {
            id,
            scenario,
            score,
            last_sampled: now,
            inserted_at: now,
        });
        Ok(true)
    }

    pub fn update_score(&mut self, id: EntryId, score: f64) -> Result<(), CurriculumError> {
        if !(score.is_finite() && score >= 0.0) {
            return Err(CurriculumError::InvalidScore(score));
        }
        let entry = self
            .entries
            .iter_mut()
            .find(|e| e.id == id)
            .ok_or(CurriculumError::UnknownEntry(id))?;
        entry.score = score;
        Ok(())
    }

    /// JSON array of entries.
    pub fn to_json(&self) -> Result<String, CurriculumError> {
        Ok(serde_json::to_string(&self.entries)?)
    }

    pub fn from_json(text: &str, capacity: usize) -> Result<Self, CurriculumError> {
        let entries: Vec<BufferEntry> = serde_json::from_str(text)?;
        if entries.len() > capacity {
            return Err(CurriculumError::OverCapacity {
                len: entries.len(),
                capacity,
            });
        }
        for e in &entries {
            if !(e.score.is_finite() && e.score >= 0.0) {
                return Err(CurriculumError::InvalidScore(e.score));
            }
        }
        let next_id = entries.iter().map(|e| e.id + 1).max().unwrap_or(0);
        Ok(Self {
            entries,
            capacity,
            next_id,
        })
    }
}
