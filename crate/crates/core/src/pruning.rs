//! Configuration evaluation with cost-based pruning.
//!
//! A configuration is *valid* when its average per-example cost over the
//! tuning data does not exceed the inference budget. The simple evaluator
//! measures that directly. The pruned evaluator reaches the same verdict
//! while spending far less on invalid configurations:
//!
//! * Before any request, costs already observed for the same model, prompt
//!   and stop list bound the verdict under the monotone-cost assumption
//!   (more responses and a larger `max_tokens` never cost less).
//! * The response count doubles from a known-valid starting point up to the
//!   configuration's own count.
//! * For each response count, the data prefix doubles from one example to
//!   all of them. After each prefix, a Hoeffding-Serfling style band around
//!   the budget decides whether to stop (invalid), skip ahead to the next
//!   response count (valid so far), or keep sampling.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    render_prompt, Backend, BackendError, CompletionRequest, ResponseSet, TemplateError, Usage,
};
use crate::data::TuningSet;
use crate::metrics::{MetricsError, Pricing, Response, Utility};
use crate::space::Configuration;

/// Default half-width multiplier of the pruning band.
pub const DEFAULT_BOUND_WIDTH: f64 = 0.1;

/// Configurations sharing a key share cost observations.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RegistryKey {
    pub model: String,
    pub prompt: String,
    pub stop: Option<Vec<String>>,
}

impl RegistryKey {
    pub fn of(config: &Configuration) -> Self {
        Self {
            model: config.model.clone(),
            prompt: config.prompt.clone(),
            stop: config.stop.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Valid,
    Invalid,
}

/// A cost observation at a response count and `max_tokens`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryUpdate {
    pub verdict: Verdict,
    pub n: u32,
    pub max_tokens: u32,
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Observations {
    valid: Vec<(u32, u32)>,
    invalid: Vec<(u32, u32)>,
}

/// Known-valid and known-invalid `(n, max_tokens)` pairs per
/// [`RegistryKey`]. Only grows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidityRegistry {
    groups: BTreeMap<RegistryKey, Observations>,
}

impl ValidityRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, key: &RegistryKey, update: RegistryUpdate) {
        let group = self.groups.entry(key.clone()).or_default();
        let pair = (update.n, update.max_tokens);
        match update.verdict {
            Verdict::Valid => group.valid.push(pair),
            Verdict::Invalid => group.invalid.push(pair),
        }
    }

    pub fn valid_pairs(&self, key: &RegistryKey) -> &[(u32, u32)] {
        self.groups.get(key).map_or(&[], |g| &g.valid)
    }

    pub fn invalid_pairs(&self, key: &RegistryKey) -> &[(u32, u32)] {
        self.groups.get(key).map_or(&[], |g| &g.invalid)
    }

    /// Largest valid count observed at a `max_tokens` at least `x`'s; 1 when
    /// there is none.
    pub fn max_valid_n(&self, x: &Configuration) -> u32 {
        self.valid_pairs(&RegistryKey::of(x))
            .iter()
            .filter(|(_, mt)| *mt >= x.max_tokens)
            .map(|(n, _)| *n)
            .max()
            .unwrap_or(1)
    }

    /// Smallest invalid count observed at a `max_tokens` at most `x`'s;
    /// `None` stands for +∞.
    pub fn min_invalid_n(&self, x: &Configuration) -> Option<u32> {
        self.invalid_pairs(&RegistryKey::of(x))
            .iter()
            .filter(|(_, mt)| *mt <= x.max_tokens)
            .map(|(n, _)| *n)
            .min()
    }
}

/// Bound factor after `k` of `d` examples.
pub fn rho(k: usize, d: usize) -> f64 {
    debug_assert!(1 <= k && k <= d, "rho needs 1 <= k <= d, got k={k} d={d}");
    let (k, d) = (k as f64, d as f64);
    if 2.0 * k > d {
        (1.0 - k / d) * (1.0 + 1.0 / k)
    } else {
        1.0 - (k - 1.0) / d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PreCheck {
    Evaluate { start_n: u32 },
    Prune,
}

/// Decides from the registry alone whether to evaluate `x`, and from which
/// response count. The "known valid" test runs first so that an
/// inconsistent registry still lets the trial run.
pub fn pre_check(x: &Configuration, registry: &ValidityRegistry) -> PreCheck {
    let target = x.response_count();
    let max_valid = registry.max_valid_n(x);
    if target <= max_valid {
        return PreCheck::Evaluate { start_n: target };
    }
    match registry.min_invalid_n(x) {
        Some(min_invalid) if target >= min_invalid => PreCheck::Prune,
        _ => PreCheck::Evaluate { start_n: max_valid },
    }
}

/// Where a trial stopped early.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneStage {
    /// Ran to a full measurement.
    None,
    /// Rejected from the registry without any request.
    PreCheck,
    /// Rejected by the upper bound after `k` examples at `n` responses.
    Bound { n: u32, k: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub valid: bool,
    /// Mean utility over the tuning data; 0 when invalid.
    pub utility: f64,
    /// Mean per-example cost: over all data when measured fully, over the
    /// evaluated prefix when pruned.
    pub avg_cost: f64,
    pub tokens_spent: u64,
    pub examples_touched: usize,
    pub prune_stage: PruneStage,
}

impl TrialResult {
    pub fn is_pruned(&self) -> bool {
        self.prune_stage != PruneStage::None
    }
}

/// A finished evaluation with everything the driver logs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub result: TrialResult,
    pub usage: Usage,
    /// Registry entries written, in order.
    pub registry_updates: Vec<RegistryUpdate>,
    pub requests: usize,
}

#[derive(Debug, Error)]
pub enum TrialErrorKind {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Utility(#[from] MetricsError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

/// An operational failure. Tokens spent before it are still reported.
#[derive(Debug, Error)]
#[error("{kind} (after spending {} tokens)", usage.total_tokens)]
pub struct TrialError {
    pub kind: TrialErrorKind,
    pub usage: Usage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_backoff_secs: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            initial_backoff_secs: 1.0,
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            max_retries: 0,
            initial_backoff_secs: 0.0,
        }
    }

    /// Calls `backend`, retrying retryable errors with doubling backoff.
    pub fn call(
        &self,
        backend: &dyn Backend,
        request: &CompletionRequest,
    ) -> Result<ResponseSet, BackendError> {
        let mut delay = self.initial_backoff_secs;
        let mut attempt = 0;
        loop {
            match backend.complete(request) {
                Err(e) if e.is_retryable() && attempt < self.max_retries => {
                    attempt += 1;
                    log::warn!("request failed ({e}); retry {attempt} in {delay}s");
                    if delay > 0.0 {
                        std::thread::sleep(Duration::from_secs_f64(delay));
                    }
                    delay *= 2.0;
                }
                other => return other,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    /// Inference budget: maximum average cost per example.
    pub budget_per_example: f64,
    pub bound_width: f64,
    /// Concurrent requests within one batch.
    pub parallelism: usize,
    pub retry: RetryPolicy,
    pub pricing: Pricing,
}

impl EvalSettings {
    pub fn new(budget_per_example: f64) -> Self {
        Self {
            budget_per_example,
            bound_width: DEFAULT_BOUND_WIDTH,
            parallelism: 1,
            retry: RetryPolicy::default(),
            pricing: Pricing::default(),
        }
    }
}

/// Responses gathered for one example within a trial.
#[derive(Debug, Clone, Default)]
struct ExampleMemo {
    prompt: Option<String>,
    /// Responses `[0, have)`; in best_of mode, the single best candidate so
    /// far while `have` counts candidates.
    responses: Vec<Response>,
    have: u32,
    /// Input tokens of one request for this example.
    input_tokens: u64,
    output_tokens: u64,
}

struct Fetch {
    position: usize,
    request: CompletionRequest,
}

/// Evaluates configurations on a tuning set through a backend.
pub struct Evaluator<'a> {
    backend: &'a dyn Backend,
    utility: &'a dyn Utility,
    data: &'a TuningSet,
    settings: EvalSettings,
}

/// Mutable state of one pruned trial.
struct Trial<'t> {
    config: &'t Configuration,
    order: &'t [usize],
    memo: Vec<ExampleMemo>,
    usage: Usage,
    requests: usize,
}

impl<'a> Evaluator<'a> {
    pub fn new(
        backend: &'a dyn Backend,
        utility: &'a dyn Utility,
        data: &'a TuningSet,
        settings: EvalSettings,
    ) -> Self {
        Self {
            backend,
            utility,
            data,
            settings,
        }
    }

    pub fn settings(&self) -> &EvalSettings {
        &self.settings
    }

    fn wants_logprobs(&self, config: &Configuration) -> bool {
        self.utility.needs_logprobs() || config.best_of > 1
    }

    fn fail<E: Into<TrialErrorKind>>(trial: &Trial<'_>, e: E) -> TrialError {
        TrialError {
            kind: e.into(),
            usage: trial.usage,
        }
    }

    /// Brings examples at `positions` (indices into `order`) up to `n`
    /// responses each, fetching only the missing windows.
    fn ensure(
        &self,
        trial: &mut Trial<'_>,
        positions: std::ops::Range<usize>,
        n: u32,
    ) -> Result<(), TrialError> {
        let logprobs = self.wants_logprobs(trial.config);
        let mut fetches = Vec::new();
        for position in positions {
            let example = self.data.get(trial.order[position]);
            let memo = &mut trial.memo[position];
            if memo.have >= n {
                continue;
            }
            let prompt = match &memo.prompt {
                Some(p) => p.clone(),
                None => {
                    let p = render_prompt(&trial.config.prompt, &example.fields).map_err(|e| {
                        TrialError {
                            kind: e.into(),
                            usage: trial.usage,
                        }
                    })?;
                    memo.prompt = Some(p.clone());
                    p
                }
            };
            fetches.push(Fetch {
                position,
                request: CompletionRequest::for_window(
                    trial.config,
                    prompt,
                    &example.id,
                    memo.have,
                    n - memo.have,
                    logprobs,
                ),
            });
        }

        let best_of = trial.config.best_of > 1;
        let results = self.fetch_all(&fetches);
        let mut first_error = None;
        for (fetch, result) in fetches.iter().zip(results) {
            trial.requests += 1;
            match result {
                Ok(set) => {
                    trial.usage += set.usage;
                    absorb(
                        &mut trial.memo[fetch.position],
                        &fetch.request,
                        best_of,
                        set,
                    );
                }
                Err(e) => {
                    first_error.get_or_insert(e);
                }
            }
        }
        match first_error {
            Some(e) => Err(Self::fail(trial, e)),
            None => Ok(()),
        }
    }

    fn fetch_all(&self, fetches: &[Fetch]) -> Vec<Result<ResponseSet, BackendError>> {
        let call = |f: &Fetch| -> Result<ResponseSet, BackendError> {
            let set = self.settings.retry.call(self.backend, &f.request)?;
            if set.texts.len() != f.request.expected_texts() {
                return Err(BackendError::Malformed(format!(
                    "expected {} responses, got {}",
                    f.request.expected_texts(),
                    set.texts.len()
                )));
            }
            if f.request.logprobs
                && set.mean_logprobs.as_ref().map(Vec::len) != Some(set.texts.len())
            {
                return Err(BackendError::Malformed("missing logprobs".into()));
            }
            Ok(set)
        };
        let cap = self.settings.parallelism.max(1);
        if cap == 1 || fetches.len() <= 1 {
            return fetches.iter().map(call).collect();
        }
        let mut out = Vec::with_capacity(fetches.len());
        for chunk in fetches.chunks(cap) {
            std::thread::scope(|s| {
                let handles: Vec<_> = chunk.iter().map(|f| s.spawn(move || call(f))).collect();
                out.extend(
                    handles
                        .into_iter()
                        .map(|h| h.join().expect("request thread panicked")),
                );
            });
        }
        out
    }

    /// Deployment cost of one example at its current response count: one
    /// request's input plus the output of every response held.
    fn example_cost(&self, config: &Configuration, memo: &ExampleMemo) -> f64 {
        self.settings
            .pricing
            .cost(&config.model, memo.input_tokens, memo.output_tokens)
    }

    fn mean_cost(&self, trial: &Trial<'_>, k: usize) -> f64 {
        let total: f64 = trial.memo[..k]
            .iter()
            .map(|m| self.example_cost(trial.config, m))
            .sum();
        total / k as f64
    }

    fn mean_utility(&self, trial: &Trial<'_>) -> Result<f64, TrialError> {
        let mut total = 0.0;
        for (position, memo) in trial.memo.iter().enumerate() {
            let example = self.data.get(trial.order[position]);
            let u = self
                .utility
                .score(example, &memo.responses, trial.config)
                .map_err(|e| Self::fail(trial, e))?;
            total += u;
        }
        Ok(total / trial.memo.len() as f64)
    }

    fn new_trial<'t>(&self, config: &'t Configuration, order: &'t [usize]) -> Trial<'t> {
        assert_eq!(
            order.len(),
            self.data.len(),
            "order must cover the tuning data"
        );
        Trial {
            config,
            order,
            memo: vec![ExampleMemo::default(); order.len()],
            usage: Usage::default(),
            requests: 0,
        }
    }

    fn finish(
        trial: &Trial<'_>,
        valid: bool,
        utility: f64,
        avg_cost: f64,
        prune_stage: PruneStage,
        registry_updates: Vec<RegistryUpdate>,
    ) -> TrialOutcome {
        TrialOutcome {
            result: TrialResult {
                valid,
                utility: if valid { utility } else { 0.0 },
                avg_cost,
                tokens_spent: trial.usage.total_tokens,
                examples_touched: trial.memo.iter().filter(|m| m.have > 0).count(),
                prune_stage,
            },
            usage: trial.usage,
            registry_updates,
            requests: trial.requests,
        }
    }

    /// Evaluates `config` with registry pre-check, response-count doubling
    /// and data-prefix doubling. `order` is the permutation of the tuning
    /// data to consume; prefixes of it form the subsets.
    pub fn evaluate_pruned(
        &self,
        config: &Configuration,
        registry: &mut ValidityRegistry,
        order: &[usize],
    ) -> Result<TrialOutcome, TrialError> {
        let mut trial = self.new_trial(config, order);
        let key = RegistryKey::of(config);
        let mut updates = Vec::new();
        let mut record = |registry: &mut ValidityRegistry, verdict, n| {
            let update = RegistryUpdate {
                verdict,
                n,
                max_tokens: config.max_tokens,
            };
            registry.record(&key, update);
            updates.push(update);
        };

        let target = config.response_count();
        let mut n = match pre_check(config, registry) {
            PreCheck::Prune => {
                return Ok(Self::finish(
                    &trial,
                    false,
                    0.0,
                    0.0,
                    PruneStage::PreCheck,
                    updates,
                ))
            }
            PreCheck::Evaluate { start_n } => start_n,
        };

        let size = self.data.len();
        let budget = self.settings.budget_per_example;
        let width = self.settings.bound_width;
        loop {
            let mut k = 1;
            let mut fetched = 0;
            loop {
                self.ensure(&mut trial, fetched..k, n)?;
                fetched = k;
                let cost = self.mean_cost(&trial, k);
                let band = width * (rho(k, size) / k as f64).sqrt();
                if cost > budget * (1.0 + band) {
                    record(registry, Verdict::Invalid, n);
                    let stage = if n < target || k < size {
                        PruneStage::Bound { n, k }
                    } else {
                        PruneStage::None
                    };
                    return Ok(Self::finish(&trial, false, 0.0, cost, stage, updates));
                }
                if cost <= budget * (1.0 - band) && (n < target || k == size) {
                    record(registry, Verdict::Valid, n);
                    if n < target {
                        // Valid at this count: skip the remaining examples.
                        break;
                    }
                }
                if k < size {
                    k = (2 * k).min(size);
                } else {
                    break;
                }
            }
            if n < target {
                n = (2 * n).min(target);
            } else {
                let cost = self.mean_cost(&trial, size);
                let utility = self.mean_utility(&trial)?;
                return Ok(Self::finish(
                    &trial,
                    true,
                    utility,
                    cost,
                    PruneStage::None,
                    updates,
                ));
            }
        }
    }

    /// Requests every example's full response count in one call each and
    /// compares the average cost with the budget.
    pub fn evaluate_simple(
        &self,
        config: &Configuration,
        order: &[usize],
    ) -> Result<TrialOutcome, TrialError> {
        let mut trial = self.new_trial(config, order);
        let size = self.data.len();
        self.ensure(&mut trial, 0..size, config.response_count())?;
        let cost = self.mean_cost(&trial, size);
        let valid = cost <= self.settings.budget_per_example;
        let utility = if valid {
            self.mean_utility(&trial)?
        } else {
            0.0
        };
        Ok(Self::finish(
            &trial,
            valid,
            utility,
            cost,
            PruneStage::None,
            Vec::new(),
        ))
    }
}

/// Folds one reply into an example's memo.
fn absorb(memo: &mut ExampleMemo, request: &CompletionRequest, best_of: bool, set: ResponseSet) {
    memo.input_tokens = set.usage.input_tokens;
    memo.output_tokens += set.usage.output_tokens;
    let logprobs = set.mean_logprobs.unwrap_or_default();
    let fresh = set.texts.into_iter().enumerate().map(|(i, text)| Response {
        text,
        mean_logprob: logprobs.get(i).copied(),
    });
    let count = request.n.max(request.best_of);
    if best_of {
        // Keep the best candidate across windows; earlier wins ties.
        for candidate in fresh {
            let better = match memo.responses.first() {
                Some(current) => {
                    candidate.mean_logprob.unwrap_or(f64::NEG_INFINITY)
                        > current.mean_logprob.unwrap_or(f64::NEG_INFINITY)
                }
                None => true,
            };
            if better {
                memo.responses = vec![candidate];
            }
        }
    } else {
        memo.responses.extend(fresh);
    }
    memo.have += count;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockBackend, MockProfile, ModelProfile};
    use crate::data::Example;
    use crate::metrics::MetricsError;
    use crate::space::Sampling;
    use proptest::prelude::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;

    fn config(n: u32, max_tokens: u32) -> Configuration {
        Configuration {
            model: "m".into(),
            prompt: "{prompt}".into(),
            max_tokens,
            sampling: Sampling::Temperature(0.5),
            n,
            stop: None,
            presence_penalty: 0.0,
            frequency_penalty: 0.0,
            best_of: 1,
        }
    }

    fn data(size: usize) -> TuningSet {
        TuningSet::new(
            (0..size)
                .map(|i| Example::new(i.to_string(), &[("prompt", "a question")]))
                .collect(),
        )
        .unwrap()
    }

    /// Fraction of responses that mention the right answer's marker.
    struct AnswerRate;

    impl Utility for AnswerRate {
        fn score(
            &self,
            _: &Example,
            responses: &[Response],
            _: &Configuration,
        ) -> Result<f64, MetricsError> {
            let hits = responses
                .iter()
                .filter(|r| r.text.contains("ANSWER:correct"))
                .count();
            Ok(hits as f64 / responses.len() as f64)
        }
    }

    /// Records every request it forwards.
    struct Recording<B> {
        inner: B,
        seen: Mutex<Vec<CompletionRequest>>,
    }

    impl<B: Backend> Backend for Recording<B> {
        fn identity(&self) -> String {
            self.inner.identity()
        }
        fn complete(&self, r: &CompletionRequest) -> Result<ResponseSet, BackendError> {
            self.seen.lock().unwrap().push(r.clone());
            self.inner.complete(r)
        }
    }

    fn recording(profile: ModelProfile) -> Recording<MockBackend> {
        Recording {
            inner: MockBackend::new(MockProfile::uniform(profile)),
            seen: Mutex::new(Vec::new()),
        }
    }

    fn identity(size: usize) -> Vec<usize> {
        (0..size).collect()
    }

    fn registry_with(valid: &[(u32, u32)], invalid: &[(u32, u32)]) -> ValidityRegistry {
        let mut reg = ValidityRegistry::new();
        let key = RegistryKey::of(&config(1, 1));
        for &(n, max_tokens) in valid {
            reg.record(
                &key,
                RegistryUpdate {
                    verdict: Verdict::Valid,
                    n,
                    max_tokens,
                },
            );
        }
        for &(n, max_tokens) in invalid {
            reg.record(
                &key,
                RegistryUpdate {
                    verdict: Verdict::Invalid,
                    n,
                    max_tokens,
                },
            );
        }
        reg
    }

    #[test]
    fn registry_defaults() {
        let reg = ValidityRegistry::new();
        assert_eq!(reg.max_valid_n(&config(4, 500)), 1);
        assert_eq!(reg.min_invalid_n(&config(4, 500)), None);
    }

    #[test]
    fn max_valid_filters_on_max_tokens() {
        assert_eq!(
            registry_with(&[(8, 600)], &[]).max_valid_n(&config(1, 500)),
            8
        );
        assert_eq!(
            registry_with(&[(8, 600), (16, 400)], &[]).max_valid_n(&config(1, 500)),
            8
        );
    }

    #[test]
    fn min_invalid_filters_on_max_tokens() {
        assert_eq!(
            registry_with(&[], &[(32, 400)]).min_invalid_n(&config(1, 500)),
            Some(32)
        );
        assert_eq!(
            registry_with(&[], &[(32, 800)]).min_invalid_n(&config(1, 500)),
            None
        );
    }

    #[test]
    fn registry_is_keyed_by_model_prompt_and_stop() {
        let reg = registry_with(&[(8, 600)], &[(2, 100)]);
        let mut other = config(4, 500);
        other.stop = Some(vec!["\n".into()]);
        assert_eq!(reg.max_valid_n(&other), 1);
        assert_eq!(reg.min_invalid_n(&other), None);
    }

    #[test]
    fn rho_values() {
        assert_eq!(rho(1, 20), 1.0);
        assert_eq!(rho(20, 20), 0.0);
        assert!((rho(11, 20) - 0.490_909_090_909_090_9).abs() < 1e-12);
        assert!((rho(10, 20) - 0.55).abs() < 1e-12);
    }

    #[test]
    fn pre_check_cases() {
        // violation: max_valid 8 >= min_invalid 4, condition 1 wins
        let reg = registry_with(&[(8, 1000)], &[(4, 100)]);
        assert_eq!(
            pre_check(&config(6, 500), &reg),
            PreCheck::Evaluate { start_n: 6 }
        );
        assert_eq!(
            pre_check(&config(16, 500), &ValidityRegistry::new()),
            PreCheck::Evaluate { start_n: 1 }
        );
        let reg = registry_with(&[], &[(8, 100)]);
        assert_eq!(pre_check(&config(10, 500), &reg), PreCheck::Prune);
        assert_eq!(
            pre_check(&config(7, 500), &reg),
            PreCheck::Evaluate { start_n: 1 }
        );
    }

    #[test]
    fn pre_check_prune_spends_nothing() {
        let backend = recording(ModelProfile::constant_cost(0, 10));
        let data = data(4);
        let eval = Evaluator::new(&backend, &AnswerRate, &data, EvalSettings::new(100.0));
        let mut reg = registry_with(&[], &[(2, 100)]);
        let out = eval
            .evaluate_pruned(&config(3, 500), &mut reg, &identity(4))
            .unwrap();
        assert_eq!(out.result.prune_stage, PruneStage::PreCheck);
        assert!(!out.result.valid);
        assert_eq!(out.result.tokens_spent, 0);
        assert!(backend.seen.lock().unwrap().is_empty());
    }

    #[test]
    fn doubly_expensive_config_stops_after_one_example() {
        let budget = 50.0;
        let backend = recording(ModelProfile::constant_cost(0, 100));
        let data = data(20);
        let eval = Evaluator::new(&backend, &AnswerRate, &data, EvalSettings::new(budget));
        let mut reg = ValidityRegistry::new();
        let out = eval
            .evaluate_pruned(&config(1, 500), &mut reg, &identity(20))
            .unwrap();
        assert!(!out.result.valid);
        assert_eq!(out.result.prune_stage, PruneStage::Bound { n: 1, k: 1 });
        assert_eq!(out.result.examples_touched, 1);
        assert_eq!(out.result.avg_cost, 100.0);
        assert_eq!(
            reg.invalid_pairs(&RegistryKey::of(&config(1, 1))),
            &[(1, 500)]
        );
    }

    #[test]
    fn single_response_walks_prefixes_to_full_data() {
        let backend = recording(ModelProfile::constant_cost(0, 10));
        let data = data(10);
        // cost 10 == budget: never below the lower band until k = |D|
        let eval = Evaluator::new(&backend, &AnswerRate, &data, EvalSettings::new(10.0));
        let mut reg = ValidityRegistry::new();
        let out = eval
            .evaluate_pruned(&config(1, 500), &mut reg, &identity(10))
            .unwrap();
        assert!(out.result.valid);
        assert_eq!(out.result.prune_stage, PruneStage::None);
        assert_eq!(out.requests, 10);
        let seen = backend.seen.lock().unwrap();
        let ids: Vec<&str> = seen.iter().map(|r| r.example_id.as_str()).collect();
        assert_eq!(ids, ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"]);
        assert_eq!(
            reg.valid_pairs(&RegistryKey::of(&config(1, 1))),
            &[(1, 500)]
        );
    }

    #[test]
    fn cheap_counts_skip_data_and_reuse_responses() {
        let backend = recording(ModelProfile::constant_cost(5, 1));
        let data = data(16);
        let eval = Evaluator::new(&backend, &AnswerRate, &data, EvalSettings::new(100.0));
        let mut reg = ValidityRegistry::new();
        let x = config(8, 500);
        let out = eval.evaluate_pruned(&x, &mut reg, &identity(16)).unwrap();
        assert!(out.result.valid);
        // each of n = 1, 2, 4 passes the lower bound on the first example
        let pairs = reg.valid_pairs(&RegistryKey::of(&x)).to_vec();
        assert_eq!(pairs, [(1, 500), (2, 500), (4, 500), (8, 500)]);

        let seen = backend.seen.lock().unwrap();
        let mut per_example: BTreeMap<&str, u32> = BTreeMap::new();
        for r in seen.iter() {
            *per_example.entry(r.example_id.as_str()).or_default() += r.n;
        }
        assert!(
            per_example.values().all(|&total| total == 8),
            "{per_example:?}"
        );
        // deployment cost of a single 8-response request
        assert_eq!(out.result.avg_cost, 13.0);
        let spent: u64 = seen.iter().map(|r| 5 + u64::from(r.n)).sum();
        assert_eq!(out.result.tokens_spent, spent);
        assert_eq!(out.usage.total_tokens, spent);
    }

    #[test]
    fn simple_evaluator_boundaries() {
        let data = data(5);
        let free = recording(ModelProfile::constant_cost(0, 0));
        let eval = Evaluator::new(&free, &AnswerRate, &data, EvalSettings::new(1.0));
        let out = eval.evaluate_simple(&config(2, 100), &identity(5)).unwrap();
        assert!(out.result.valid);
        assert_eq!(out.result.avg_cost, 0.0);

        let backend = recording(ModelProfile::constant_cost(0, 10));
        let exact = Evaluator::new(&backend, &AnswerRate, &data, EvalSettings::new(20.0));
        assert!(
            exact
                .evaluate_simple(&config(2, 100), &identity(5))
                .unwrap()
                .result
                .valid
        );
        let over = Evaluator::new(&backend, &AnswerRate, &data, EvalSettings::new(19.0));
        let out = over.evaluate_simple(&config(2, 100), &identity(5)).unwrap();
        assert!(!out.result.valid);
        assert_eq!(out.result.utility, 0.0);
        assert_eq!(out.result.examples_touched, 5);
    }

    #[test]
    fn best_of_counts_candidates() {
        let backend = recording(ModelProfile::default());
        let data = data(3);
        let eval = Evaluator::new(&backend, &AnswerRate, &data, EvalSettings::new(1e9));
        let mut x = config(1, 300);
        x.best_of = 4;
        let mut reg = ValidityRegistry::new();
        let pruned = eval.evaluate_pruned(&x, &mut reg, &identity(3)).unwrap();
        let simple = eval.evaluate_simple(&x, &identity(3)).unwrap();
        assert_eq!(pruned.result.utility, simple.result.utility);
        assert_eq!(pruned.result.avg_cost, simple.result.avg_cost);
        let seen = backend.seen.lock().unwrap();
        assert!(seen.iter().all(|r| r.n == 1));
        assert!(seen.iter().any(|r| r.best_of == 4 && r.window_start == 0));
    }

    struct Flaky {
        failures_left: AtomicUsize,
        error: BackendError,
    }

    impl Backend for Flaky {
        fn identity(&self) -> String {
            "flaky".into()
        }
        fn complete(&self, r: &CompletionRequest) -> Result<ResponseSet, BackendError> {
            if self
                .failures_left
                .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |f| f.checked_sub(1))
                .is_ok()
            {
                return Err(self.error.clone());
            }
            MockBackend::new(MockProfile::uniform(ModelProfile::constant_cost(1, 1))).complete(r)
        }
    }

    #[test]
    fn retries_transient_failures() {
        let backend = Flaky {
            failures_left: AtomicUsize::new(3),
            error: BackendError::Transport("reset".into()),
        };
        let data = data(2);
        let mut settings = EvalSettings::new(10.0);
        settings.retry = RetryPolicy {
            max_retries: 3,
            initial_backoff_secs: 0.0,
        };
        let eval = Evaluator::new(&backend, &AnswerRate, &data, settings);
        assert!(eval.evaluate_simple(&config(1, 10), &identity(2)).is_ok());
    }

    #[test]
    fn exhausted_retries_abort_with_partial_spend() {
        let backend = Flaky {
            failures_left: AtomicUsize::new(usize::MAX),
            error: BackendError::Service {
                status: 500,
                message: "down".into(),
            },
        };
        let data = data(2);
        let eval = Evaluator::new(&backend, &AnswerRate, &data, EvalSettings::new(10.0));
        let err = eval
            .evaluate_simple(&config(1, 10), &identity(2))
            .unwrap_err();
        assert!(matches!(
            err.kind,
            TrialErrorKind::Backend(BackendError::Service { .. })
        ));
        assert_eq!(err.usage.total_tokens, 0);
    }

    #[test]
    fn parallel_batches_match_sequential() {
        let profile = ModelProfile::default();
        let data = data(9);
        let seq_backend = recording(profile.clone());
        let par_backend = recording(profile);
        let seq = Evaluator::new(&seq_backend, &AnswerRate, &data, EvalSettings::new(1e9));
        let mut par_settings = EvalSettings::new(1e9);
        par_settings.parallelism = 4;
        let par = Evaluator::new(&par_backend, &AnswerRate, &data, par_settings);
        let x = config(3, 200);
        let a = seq.evaluate_simple(&x, &identity(9)).unwrap();
        let b = par.evaluate_simple(&x, &identity(9)).unwrap();
        assert_eq!(a.result, b.result);
    }

    fn brute_max_valid(pairs: &[(u32, u32)], mt: u32) -> u32 {
        let mut best = None;
        for &(n, m) in pairs {
            if m >= mt && best.is_none_or(|b| n > b) {
                best = Some(n);
            }
        }
        best.unwrap_or(1)
    }

    fn brute_min_invalid(pairs: &[(u32, u32)], mt: u32) -> Option<u32> {
        let mut best = None;
        for &(n, m) in pairs {
            if m <= mt && best.is_none_or(|b| n < b) {
                best = Some(n);
            }
        }
        best
    }

    proptest! {
        #[test]
        fn registry_queries_match_scans(
            valid in proptest::collection::vec((1u32..64, 1u32..1000), 0..32),
            invalid in proptest::collection::vec((1u32..64, 1u32..1000), 0..32),
            mt in 1u32..1000,
        ) {
            let reg = registry_with(&valid, &invalid);
            let x = config(1, mt);
            prop_assert_eq!(reg.max_valid_n(&x), brute_max_valid(&valid, mt));
            prop_assert_eq!(reg.min_invalid_n(&x), brute_min_invalid(&invalid, mt));
        }

        #[test]
        fn rho_is_bounded_and_decreasing(d in 2usize..512) {
            let mut prev = f64::INFINITY;
            for k in 1..=d {
                let r = rho(k, d);
                prop_assert!((0.0..=1.0).contains(&r));
                prop_assert!(r < prev);
                prev = r;
            }
            prop_assert_eq!(rho(d, d), 0.0);
        }

        #[test]
        fn pruned_requests_stay_within_target(
            n in 1u32..12,
            size in 1usize..12,
            input in 0u64..20,
            per_response in 0u64..20,
            budget in 1.0f64..200.0,
        ) {
            let backend = recording(ModelProfile::constant_cost(input, per_response));
            let data = data(size);
            let eval = Evaluator::new(&backend, &AnswerRate, &data, EvalSettings::new(budget));
            let out = eval
                .evaluate_pruned(&config(n, 500), &mut ValidityRegistry::new(), &identity(size))
                .unwrap();
            let seen = backend.seen.lock().unwrap();
            let mut per_example: BTreeMap<&str, u32> = BTreeMap::new();
            let mut per_count: BTreeMap<u32, usize> = BTreeMap::new();
            for r in seen.iter() {
                *per_example.entry(r.example_id.as_str()).or_default() += r.n;
                *per_count.entry(r.window_start + r.n).or_default() += 1;
            }
            prop_assert!(per_example.values().all(|&t| t <= n));
            prop_assert!(per_count.values().all(|&c| c <= size));
            let spent: u64 = seen.iter().map(|r| input + per_response * u64::from(r.n)).sum();
            prop_assert_eq!(out.result.tokens_spent, spent);
            if out.result.valid {
                prop_assert!(out.result.avg_cost <= budget);
                prop_assert_eq!(out.result.examples_touched, size);
            } else {
                prop_assert_eq!(out.result.utility, 0.0);
            }
        }
    }
}
