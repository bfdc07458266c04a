//! Configuration proposer: uniform global sampling blended with randomized
//! direct-search threads, chosen by an upper-confidence score.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pruning::TrialResult;
use crate::space::{perturb, sample, Configuration, SearchSpace};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearcherParams {
    pub step_init: f64,
    pub step_min: f64,
    pub exploration: f64,
    /// Resampling attempts before a duplicate proposal is returned anyway.
    pub max_retries: u32,
}

impl Default for SearcherParams {
    fn default() -> Self {
        Self {
            step_init: 0.5,
            step_min: 1.0 / 64.0,
            exploration: 0.5,
            max_retries: 32,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SearchError {
    #[error("an invalid result must carry utility 0, got {0}")]
    InconsistentResult(f64),
    #[error("no valid configuration was found")]
    NoValidTrial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Global,
    Thread(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub config: Configuration,
    pub source: Source,
    /// False when every retry produced an already-seen configuration.
    pub fresh: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalThread {
    pub incumbent: Configuration,
    pub incumbent_utility: f64,
    pub step: f64,
    pub consecutive_failures: u32,
    pub created_at_trial: usize,
    pub trials: usize,
}

impl LocalThread {
    pub fn converged(&self, step_min: f64) -> bool {
        self.step < step_min
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryEntry {
    pub config: Configuration,
    pub result: TrialResult,
    pub source: Source,
}

pub struct Searcher {
    space: SearchSpace,
    params: SearcherParams,
    seed: u64,
    failure_threshold: u32,
    history: Vec<HistoryEntry>,
    threads: Vec<LocalThread>,
    seen: BTreeSet<String>,
    pending: BTreeMap<String, Source>,
    proposals_made: u64,
    global_trials: usize,
    global_best: f64,
}

impl Searcher {
    pub fn new(space: SearchSpace, params: SearcherParams, seed: u64) -> Self {
        let failure_threshold = (2 * space.dimensions()).max(1) as u32;
        Self {
            space,
            params,
            seed,
            failure_threshold,
            history: Vec::new(),
            threads: Vec::new(),
            seen: BTreeSet::new(),
            pending: BTreeMap::new(),
            proposals_made: 0,
            global_trials: 0,
            global_best: 0.0,
        }
    }

    pub fn params(&self) -> &SearcherParams {
        &self.params
    }

    pub fn history(&self) -> &[HistoryEntry] {
        &self.history
    }

    pub fn threads(&self) -> &[LocalThread] {
        &self.threads
    }

    pub fn trial_counter(&self) -> usize {
        self.history.len()
    }

    pub fn failure_threshold(&self) -> u32 {
        self.failure_threshold
    }

    fn bonus(&self, own_trials: usize) -> f64 {
        let total = self.trial_counter() as f64;
        self.params.exploration * ((total + 1.0).ln() / (own_trials as f64 + 1.0)).sqrt()
    }

    /// Picks the proposer with the highest score. Ties favor global, then
    /// the lower thread index.
    pub fn prioritize(&self) -> Source {
        let mut best = (
            Source::Global,
            self.global_best + self.bonus(self.global_trials),
        );
        for (i, t) in self.threads.iter().enumerate() {
            if t.converged(self.params.step_min) {
                continue;
            }
            let score = t.incumbent_utility + self.bonus(t.trials);
            if score > best.1 {
                best = (Source::Thread(i), score);
            }
        }
        best.0
    }

    pub fn propose(&mut self) -> Proposal {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.proposals_made);
        self.proposals_made += 1;

        let source = self.prioritize();
        let draw = |rng: &mut ChaCha8Rng| match source {
            Source::Global => sample(&self.space, rng),
            Source::Thread(i) => {
                let t = &self.threads[i];
                perturb(&t.incumbent, &self.space, t.step, rng)
            }
        };
        let mut config = draw(&mut rng);
        let mut fresh = !self.is_known(&config);
        for _ in 0..self.params.max_retries {
            if fresh {
                break;
            }
            config = draw(&mut rng);
            fresh = !self.is_known(&config);
        }
        if fresh {
            self.pending.insert(config.key(), source);
        }
        Proposal {
            config,
            source,
            fresh,
        }
    }

    fn is_known(&self, config: &Configuration) -> bool {
        let key = config.key();
        self.seen.contains(&key) || self.pending.contains_key(&key)
    }

    /// Withdraws a proposal that will not be evaluated. A thread proposal
    /// counts as a non-improvement for its thread.
    pub fn discard(&mut self, proposal: &Proposal) {
        if proposal.fresh {
            self.pending.remove(&proposal.config.key());
        }
        if let Source::Thread(i) = proposal.source {
            self.fail(i);
        }
    }

    fn fail(&mut self, i: usize) {
        let threshold = self.failure_threshold;
        let t = &mut self.threads[i];
        t.consecutive_failures += 1;
        if t.consecutive_failures >= threshold {
            t.step /= 2.0;
            t.consecutive_failures = 0;
        }
    }

    /// Records a trial. Configurations that were not proposed by this
    /// searcher count as global.
    pub fn report(
        &mut self,
        config: &Configuration,
        result: &TrialResult,
    ) -> Result<(), SearchError> {
        if !result.valid && result.utility != 0.0 {
            return Err(SearchError::InconsistentResult(result.utility));
        }
        let key = config.key();
        let source = self.pending.remove(&key).unwrap_or(Source::Global);
        self.seen.insert(key);
        let utility = result.valid.then_some(result.utility);

        match source {
            Source::Thread(i) => {
                self.threads[i].trials += 1;
                match utility {
                    Some(u) if u > self.threads[i].incumbent_utility => {
                        let t = &mut self.threads[i];
                        t.incumbent = config.clone();
                        t.incumbent_utility = u;
                        t.consecutive_failures = 0;
                    }
                    _ => self.fail(i),
                }
            }
            Source::Global => {
                self.global_trials += 1;
                if let Some(u) = utility {
                    self.global_best = self.global_best.max(u);
                    let threshold = self
                        .threads
                        .iter()
                        .filter(|t| !t.converged(self.params.step_min))
                        .map(|t| t.incumbent_utility)
                        .fold(None, |acc: Option<f64>, u| {
                            Some(acc.map_or(u, |a| a.max(u)))
                        });
                    if threshold.is_none_or(|best| u > best) {
                        self.threads.push(LocalThread {
                            incumbent: config.clone(),
                            incumbent_utility: u,
                            step: self.params.step_init,
                            consecutive_failures: 0,
                            created_at_trial: self.history.len(),
                            trials: 0,
                        });
                    }
                }
            }
        }
        self.history.push(HistoryEntry {
            config: config.clone(),
            result: result.clone(),
            source,
        });
        Ok(())
    }

    /// The valid trial with the highest utility; ties go to the lower
    /// average cost, then the earlier trial.
    pub fn best(&self) -> Result<&HistoryEntry, SearchError> {
        best_of_history(&self.history)
    }
}

pub fn best_of_history(history: &[HistoryEntry]) -> Result<&HistoryEntry, SearchError> {
    let mut best: Option<&HistoryEntry> = None;
    for entry in history.iter().filter(|e| e.result.valid) {
        let better = match best {
            None => true,
            Some(b) => {
                entry.result.utility > b.result.utility
                    || (entry.result.utility == b.result.utility
                        && entry.result.avg_cost < b.result.avg_cost)
            }
        };
        if better {
            best = Some(entry);
        }
    }
    best.ok_or(SearchError::NoValidTrial)
}
