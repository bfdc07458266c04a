//! The optimization loop: run specs, trial logs, resume and summaries.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{
    Backend, CachedBackend, FileCache, HttpBackend, HttpSettings, MockBackend, MockProfile, Usage,
};
use crate::data::{DataError, TuningSet};
use crate::metrics::{CostLedger, Pricing, Utility, UtilityBinding, UtilityFn};
use crate::pruning::{
    EvalSettings, Evaluator, PruneStage, RegistryKey, RegistryUpdate, RetryPolicy, TrialError,
    TrialOutcome, TrialResult, ValidityRegistry, DEFAULT_BOUND_WIDTH,
};
use crate::searcher::{Proposal, Searcher, SearcherParams, Source};
use crate::space::{check_prompt_fields, validate_space, Configuration, SearchSpace};

/// Consecutive already-seen global proposals after which a space counts as
/// exhausted.
pub const MAX_STALE_PROPOSALS: u32 = 3;

/// Consecutive trials pruned without spending anything after which the run
/// stops; guards against looping forever on a space whose every point is
/// known to be invalid.
pub const MAX_FREE_TRIALS: u32 = 1000;

/// Spec keys that do not influence the trial sequence.
const OPERATIONAL_KEYS: [&str; 5] = ["max_trials", "parallelism", "cache_dir", "retry", "data"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    /// Maximum average cost per example for a valid configuration.
    pub inference: f64,
    /// Total spend allowed for the whole run.
    pub optimization: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvaluatorKind {
    #[default]
    Pruned,
    Simple,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    Mock {
        #[serde(default)]
        profile: MockProfile,
        /// Tuning-data field holding each example's correct answer.
        #[serde(default)]
        answer_field: Option<String>,
    },
    Http(HttpSettings),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub space: SearchSpace,
    pub data: PathBuf,
    pub utility: UtilityBinding,
    pub budget: Budget,
    pub backend: BackendSpec,
    #[serde(default)]
    pub evaluator: EvaluatorKind,
    #[serde(default)]
    pub searcher: SearcherParams,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub parallelism: usize,
    #[serde(default = "default_bound_width")]
    pub bound_width: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_trials: Option<usize>,
    #[serde(default)]
    pub pricing: Pricing,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn one() -> usize {
    1
}

fn default_bound_width() -> f64 {
    DEFAULT_BOUND_WIDTH
}

#[derive(Debug, Error)]
pub enum DriverError {
    #[error("invalid run spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("log {path}: {message}")]
    Log { path: String, message: String },
    #[error("log does not match the run spec: {0}")]
    Mismatch(String),
    #[error("trial {index} failed: {source}")]
    Backend { index: usize, source: TrialError },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl DriverError {
    /// Process exit code for the command line.
    pub fn exit_code(&self) -> i32 {
        match self {
            DriverError::Backend { .. } => 4,
            _ => 2,
        }
    }
}

impl RunSpec {
    /// Parses JSON, or TOML when `path` ends in `.toml`. Relative paths are
    /// resolved against the spec's directory.
    pub fn load(path: &Path) -> Result<Self, DriverError> {
        let text = fs::read_to_string(path)
            .map_err(|e| DriverError::Spec(format!("cannot read {}: {e}", path.display())))?;
        let mut spec: RunSpec = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| DriverError::Spec(e.to_string()))?
        } else {
            serde_json::from_str(&text).map_err(|e| DriverError::Spec(e.to_string()))?
        };
        let base = path.parent().unwrap_or(Path::new("."));
        spec.data = base.join(&spec.data);
        spec.cache_dir = spec.cache_dir.map(|d| base.join(d));
        Ok(spec)
    }

    // Negated comparisons so that NaN budgets are rejected.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn check(&self) -> Result<(), DriverError> {
        let b = self.budget;
        if !(b.inference > 0.0) {
            return Err(DriverError::Spec(
                "budget.inference must be positive".into(),
            ));
        }
        if !(b.optimization >= b.inference) {
            return Err(DriverError::Spec(
                "budget.optimization must be at least budget.inference".into(),
            ));
        }
        if !(self.bound_width >= 0.0) {
            return Err(DriverError::Spec("bound_width must be non-negative".into()));
        }
        validate_space(&self.space).map_err(|violations| {
            DriverError::Spec(
                violations
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join("; "),
            )
        })
    }

    /// The spec as it bears on results: operational settings removed.
    fn fingerprint(&self) -> Json {
        let mut value = serde_json::to_value(self).expect("spec serializes");
        if let Json::Object(map) = &mut value {
            for key in OPERATIONAL_KEYS {
                map.remove(key);
            }
        }
        value
    }

    fn eval_settings(&self) -> EvalSettings {
        EvalSettings {
            budget_per_example: self.budget.inference,
            bound_width: self.bound_width,
            parallelism: self.parallelism.max(1),
            retry: self.retry,
            pricing: self.pricing.clone(),
        }
    }
}

/// Backend named by the spec, wrapped in a cache when one is configured.
pub fn build_backend(spec: &RunSpec, data: &TuningSet) -> Result<Box<dyn Backend>, DriverError> {
    let backend: Box<dyn Backend> = match &spec.backend {
        BackendSpec::Mock {
            profile,
            answer_field,
        } => {
            let mut profile = profile.clone();
            if let Some(field) = answer_field {
                for ex in data.examples() {
                    let answer = ex.field(field).ok_or_else(|| {
                        DriverError::Spec(format!("tuning data has no field `{field}`"))
                    })?;
                    profile.answers.insert(ex.id.clone(), answer.to_string());
                }
            }
            Box::new(MockBackend::new(profile))
        }
        BackendSpec::Http(settings) => Box::new(HttpBackend::from_env(settings.clone())),
    };
    Ok(match &spec.cache_dir {
        Some(dir) => Box::new(CachedBackend::new(backend, FileCache::new(dir))),
        None => backend,
    })
}

/// First line of every trial log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub spec: Json,
    pub data_size: usize,
    pub data_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub index: usize,
    pub configuration: Configuration,
    pub source: Source,
    pub result: TrialResult,
    pub registry_updates: Vec<RegistryUpdate>,
    pub usage: Usage,
    pub cumulative_tokens: u64,
    pub wall_time_ms: u64,
}

/// A trial cut short by a backend failure. Its spend is charged on resume;
/// the configuration is proposed and evaluated again.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbortRecord {
    pub configuration: Configuration,
    pub usage: Usage,
    pub error: String,
    pub cumulative_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LogLine {
    Header(LogHeader),
    Trial(TrialRecord),
    Aborted(AbortRecord),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    BudgetExhausted,
    SpaceExhausted,
    MaxTrials,
    NothingAffordable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestTrial {
    pub index: usize,
    pub configuration: Configuration,
    pub result: TrialResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationReport {
    pub best: Option<BestTrial>,
    pub trials: usize,
    pub tokens_spent: u64,
    pub budget_spent: f64,
    pub pre_check_prunes: usize,
    /// Bound prunes keyed by `"n=<n>,k=<k>"`.
    pub bound_prunes: BTreeMap<String, usize>,
    pub stop_reason: StopReason,
    /// When nothing was valid: the invalid trial with the lowest observed
    /// average cost.
    pub cheapest_invalid: Option<BestTrial>,
}

fn data_hash(data: &TuningSet) -> String {
    let json = serde_json::to_string(data.examples()).expect("examples serialize");
    hex::encode(Sha256::digest(json.as_bytes()))
}

/// Example order of trial `index`.
pub fn trial_order(seed: u64, index: usize, size: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6f72_6465_725f_7365);
    rng.set_stream(index as u64);
    let mut order: Vec<usize> = (0..size).collect();
    order.shuffle(&mut rng);
    order
}

/// Best row of a trial list: max utility, then min cost, then earliest.
pub fn best_record(records: &[TrialRecord]) -> Option<&TrialRecord> {
    let mut best: Option<&TrialRecord> = None;
    for r in records.iter().filter(|r| r.result.valid) {
        if best.is_none_or(|b| {
            r.result.utility > b.result.utility
                || (r.result.utility == b.result.utility && r.result.avg_cost < b.result.avg_cost)
        }) {
            best = Some(r);
        }
    }
    best
}

/// Live state of a tuning run.
pub struct Tuner {
    spec: RunSpec,
    data: TuningSet,
    backend: Box<dyn Backend>,
    utility: Box<dyn Utility>,
    searcher: Searcher,
    registry: ValidityRegistry,
    ledger: CostLedger,
    records: Vec<TrialRecord>,
    log: Option<File>,
    stale: u32,
    free_trials: u32,
    stopped: Option<StopReason>,
}

impl Tuner {
    /// Loads data and builds backend and utility from the spec.
    pub fn new(spec: RunSpec) -> Result<Self, DriverError> {
        spec.check()?;
        let data = TuningSet::load(&spec.data)?;
        let backend = build_backend(&spec, &data)?;
        let utility =
            UtilityFn::new(spec.utility.clone()).map_err(|e| DriverError::Spec(e.to_string()))?;
        Self::from_parts(spec, data, backend, Box::new(utility))
    }

    /// Uses the given data, backend and utility instead of the spec's.
    pub fn from_parts(
        spec: RunSpec,
        data: TuningSet,
        backend: Box<dyn Backend>,
        utility: Box<dyn Utility>,
    ) -> Result<Self, DriverError> {
        spec.check()?;
        let violations = check_prompt_fields(&spec.space, data.fields());
        if !violations.is_empty() {
            return Err(DriverError::Spec(
                violations
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join("; "),
            ));
        }
        let searcher = Searcher::new(spec.space.clone(), spec.searcher, spec.seed);
        let ledger = CostLedger::new(spec.budget.optimization, spec.pricing.clone());
        Ok(Self {
            spec,
            data,
            backend,
            utility,
            searcher,
            registry: ValidityRegistry::new(),
            ledger,
            records: Vec::new(),
            log: None,
            stale: 0,
            free_trials: 0,
            stopped: None,
        })
    }

    pub fn header(&self) -> LogHeader {
        LogHeader {
            spec: self.spec.fingerprint(),
            data_size: self.data.len(),
            data_hash: data_hash(&self.data),
        }
    }

    /// Starts a new log at `path`, replacing any existing file.
    pub fn create_log(&mut self, path: &Path) -> Result<(), DriverError> {
        let mut file = File::create(path)?;
        write_line(&mut file, &LogLine::Header(self.header()))?;
        self.log = Some(file);
        Ok(())
    }

    /// Replays the log at `path` and keeps appending to it. An empty or
    /// missing log starts fresh.
    pub fn resume_log(&mut self, path: &Path) -> Result<(), DriverError> {
        let lines = if path.exists() {
            read_log(path)?
        } else {
            Vec::new()
        };
        if lines.is_empty() {
            return self.create_log(path);
        }
        let mut lines = lines.into_iter();
        match lines.next() {
            Some(LogLine::Header(h)) => self.check_header(&h)?,
            _ => {
                return Err(DriverError::Log {
                    path: path.display().to_string(),
                    message: "first record is not a header".into(),
                })
            }
        }
        for line in lines {
            match line {
                LogLine::Header(_) => {
                    return Err(DriverError::Log {
                        path: path.display().to_string(),
                        message: "repeated header".into(),
                    })
                }
                LogLine::Trial(record) => self.replay(record)?,
                LogLine::Aborted(a) => {
                    self.ledger.charge(&a.configuration.model, &a.usage);
                }
            }
        }
        self.log = Some(OpenOptions::new().append(true).open(path)?);
        Ok(())
    }

    fn check_header(&self, found: &LogHeader) -> Result<(), DriverError> {
        let expected = self.header();
        let mut diffs = Vec::new();
        if found.data_size != expected.data_size || found.data_hash != expected.data_hash {
            diffs.push(format!(
                "tuning data differs ({} examples logged, {} given)",
                found.data_size, expected.data_size
            ));
        }
        if let (Json::Object(a), Json::Object(b)) = (&found.spec, &expected.spec) {
            let mut keys: Vec<&String> = a.keys().chain(b.keys()).collect();
            keys.sort();
            keys.dedup();
            for key in keys {
                if a.get(key) != b.get(key) {
                    diffs.push(format!(
                        "`{key}`: logged {} vs spec {}",
                        a.get(key).unwrap_or(&Json::Null),
                        b.get(key).unwrap_or(&Json::Null)
                    ));
                }
            }
        } else if found.spec != expected.spec {
            diffs.push("spec differs".into());
        }
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(DriverError::Mismatch(diffs.join("; ")))
        }
    }

    fn replay(&mut self, record: TrialRecord) -> Result<(), DriverError> {
        let Some(proposal) = self.next_proposal() else {
            return Err(DriverError::Mismatch(format!(
                "trial {} was logged but the searcher has nothing left to propose",
                record.index
            )));
        };
        if proposal.config != record.configuration || record.index != self.records.len() {
            return Err(DriverError::Mismatch(format!(
                "trial {} logged {} but the searcher proposes {}",
                record.index,
                record.configuration.key(),
                proposal.config.key()
            )));
        }
        let key = RegistryKey::of(&record.configuration);
        for update in &record.registry_updates {
            self.registry.record(&key, *update);
        }
        self.account(&proposal, record);
        Ok(())
    }

    /// Next configuration to evaluate; `None` when the space is exhausted.
    fn next_proposal(&mut self) -> Option<Proposal> {
        loop {
            let p = self.searcher.propose();
            if p.fresh {
                return Some(p);
            }
            self.searcher.discard(&p);
            if p.source == Source::Global {
                self.stale += 1;
                if self.stale >= MAX_STALE_PROPOSALS {
                    return None;
                }
            }
        }
    }

    /// Bookkeeping shared by live trials and replay.
    fn account(&mut self, proposal: &Proposal, record: TrialRecord) {
        self.stale = 0;
        if record.usage.total_tokens == 0 && record.result.prune_stage == PruneStage::PreCheck {
            self.free_trials += 1;
        } else {
            self.free_trials = 0;
        }
        self.ledger.charge(&proposal.config.model, &record.usage);
        self.searcher
            .report(&proposal.config, &record.result)
            .expect("evaluator results are consistent");
        self.records.push(record);
    }

    pub fn records(&self) -> &[TrialRecord] {
        &self.records
    }

    pub fn registry(&self) -> &ValidityRegistry {
        &self.registry
    }

    pub fn ledger(&self) -> &CostLedger {
        &self.ledger
    }

    pub fn data(&self) -> &TuningSet {
        &self.data
    }

    fn evaluate(
        &mut self,
        config: &Configuration,
        index: usize,
    ) -> Result<TrialOutcome, TrialError> {
        let order = trial_order(self.spec.seed, index, self.data.len());
        let evaluator = Evaluator::new(
            self.backend.as_ref(),
            self.utility.as_ref(),
            &self.data,
            self.spec.eval_settings(),
        );
        match self.spec.evaluator {
            EvaluatorKind::Pruned => evaluator.evaluate_pruned(config, &mut self.registry, &order),
            EvaluatorKind::Simple => evaluator.evaluate_simple(config, &order),
        }
    }

    /// Why the loop should not admit another trial, if it should not.
    fn stop_reason(&self) -> Option<StopReason> {
        if let Some(reason) = self.stopped {
            return Some(reason);
        }
        if self.ledger.exhausted() {
            return Some(StopReason::BudgetExhausted);
        }
        if self
            .spec
            .max_trials
            .is_some_and(|m| self.records.len() >= m)
        {
            return Some(StopReason::MaxTrials);
        }
        if self.free_trials >= MAX_FREE_TRIALS {
            return Some(StopReason::NothingAffordable);
        }
        None
    }

    /// Runs one trial. `Ok(None)` means the run is over.
    pub fn step(&mut self) -> Result<Option<&TrialRecord>, DriverError> {
        if self.stop_reason().is_some() {
            return Ok(None);
        }
        let Some(proposal) = self.next_proposal() else {
            self.stopped = Some(StopReason::SpaceExhausted);
            return Ok(None);
        };
        let index = self.records.len();
        let started = Instant::now();
        let outcome = match self.evaluate(&proposal.config, index) {
            Ok(outcome) => outcome,
            Err(source) => {
                self.ledger.charge(&proposal.config.model, &source.usage);
                let abort = AbortRecord {
                    configuration: proposal.config.clone(),
                    usage: source.usage,
                    error: source.to_string(),
                    cumulative_tokens: self.ledger.tokens(),
                };
                self.append(&LogLine::Aborted(abort))?;
                return Err(DriverError::Backend { index, source });
            }
        };
        let record = TrialRecord {
            index,
            configuration: proposal.config.clone(),
            source: proposal.source,
            result: outcome.result,
            registry_updates: outcome.registry_updates,
            usage: outcome.usage,
            cumulative_tokens: self.ledger.tokens() + outcome.usage.total_tokens,
            wall_time_ms: started.elapsed().as_millis() as u64,
        };
        log::info!(
            "trial {index}: valid={} utility={:.4} avg_cost={:.1} tokens={}",
            record.result.valid,
            record.result.utility,
            record.result.avg_cost,
            record.usage.total_tokens
        );
        self.append(&LogLine::Trial(record.clone()))?;
        self.account(&proposal, record);
        Ok(self.records.last())
    }

    fn append(&mut self, line: &LogLine) -> Result<(), DriverError> {
        if let Some(file) = &mut self.log {
            write_line(file, line)?;
        }
        Ok(())
    }

    /// Runs trials until a stop condition holds.
    pub fn run(&mut self) -> Result<OptimizationReport, DriverError> {
        while self.step()?.is_some() {}
        Ok(self.report())
    }

    pub fn report(&self) -> OptimizationReport {
        let as_best = |r: &TrialRecord| BestTrial {
            index: r.index,
            configuration: r.configuration.clone(),
            result: r.result.clone(),
        };
        let best = best_record(&self.records).map(as_best);
        let cheapest_invalid = if best.is_none() {
            self.records
                .iter()
                .filter(|r| !r.result.valid && r.result.prune_stage != PruneStage::PreCheck)
                .min_by(|a, b| a.result.avg_cost.total_cmp(&b.result.avg_cost))
                .map(as_best)
        } else {
            None
        };
        let (pre_check_prunes, bound_prunes) = prune_counts(&self.records);
        OptimizationReport {
            best,
            trials: self.records.len(),
            tokens_spent: self.ledger.tokens(),
            budget_spent: self.ledger.spent(),
            pre_check_prunes,
            bound_prunes,
            stop_reason: self.stop_reason().unwrap_or(StopReason::BudgetExhausted),
            cheapest_invalid,
        }
    }

    /// Evaluates one fixed configuration with a fresh registry.
    pub fn evaluate_once(&mut self, config: &Configuration) -> Result<TrialOutcome, DriverError> {
        if let Err(e) = config.check_invariants() {
            return Err(DriverError::Spec(e));
        }
        self.evaluate(config, 0)
            .map_err(|source| DriverError::Backend { index: 0, source })
    }
}

fn prune_counts(records: &[TrialRecord]) -> (usize, BTreeMap<String, usize>) {
    let mut pre_check = 0;
    let mut bound = BTreeMap::new();
    for r in records {
        match r.result.prune_stage {
            PruneStage::PreCheck => pre_check += 1,
            PruneStage::Bound { n, k } => *bound.entry(format!("n={n},k={k}")).or_insert(0) += 1,
            PruneStage::None => {}
        }
    }
    (pre_check, bound)
}

fn write_line(file: &mut File, line: &LogLine) -> Result<(), DriverError> {
    let mut text = serde_json::to_string(line).expect("log line serializes");
    text.push('\n');
    file.write_all(text.as_bytes())?;
    file.flush()?;
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<LogLine>, DriverError> {
    let file = File::open(path).map_err(|e| DriverError::Log {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str(&line).map_err(|e| DriverError::Log {
            path: path.display().to_string(),
            message: format!("line {}: {e}", i + 1),
        })?;
        out.push(parsed);
    }
    Ok(out)
}

/// Fresh run of `spec`, logging to `log` when given.
pub fn run(spec: RunSpec, log: Option<&Path>) -> Result<OptimizationReport, DriverError> {
    let mut tuner = Tuner::new(spec)?;
    if let Some(path) = log {
        tuner.create_log(path)?;
    }
    tuner.run()
}

/// Continues the run recorded at `log`.
pub fn resume(spec: RunSpec, log: &Path) -> Result<OptimizationReport, DriverError> {
    let mut tuner = Tuner::new(spec)?;
    tuner.resume_log(log)?;
    tuner.run()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub index: usize,
    pub valid: bool,
    pub utility: f64,
    pub avg_cost: f64,
    pub tokens_spent: u64,
    pub prune_stage: PruneStage,
    /// Estimated tokens a full measurement would have spent beyond this
    /// trial's actual spend.
    pub savings: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogSummary {
    pub rows: Vec<SummaryRow>,
    pub best: Option<BestTrial>,
    pub tokens_spent: u64,
    pub pre_check_prunes: usize,
    pub bound_prunes: BTreeMap<String, usize>,
    pub estimated_savings: f64,
}

/// Savings of a bound prune: scale the observed per-example average at
/// `n` responses up to the full response count and all examples, minus
/// what was actually spent.
pub fn savings_estimate(record: &TrialRecord, data_size: usize) -> f64 {
    match record.result.prune_stage {
        PruneStage::Bound { n, .. } => {
            let full = record.configuration.response_count() as f64;
            let per_response = record.result.avg_cost / n as f64;
            (data_size as f64 * full * per_response - record.result.tokens_spent as f64).max(0.0)
        }
        _ => 0.0,
    }
}

pub fn summarize(path: &Path) -> Result<LogSummary, DriverError> {
    let lines = read_log(path)?;
    let mut data_size = 0;
    let mut records = Vec::new();
    for line in lines {
        match line {
            LogLine::Header(h) => data_size = h.data_size,
            LogLine::Trial(r) => records.push(r),
            LogLine::Aborted(_) => {}
        }
    }
    let rows: Vec<SummaryRow> = records
        .iter()
        .map(|r| SummaryRow {
            index: r.index,
            valid: r.result.valid,
            utility: r.result.utility,
            avg_cost: r.result.avg_cost,
            tokens_spent: r.result.tokens_spent,
            prune_stage: r.result.prune_stage,
            savings: savings_estimate(r, data_size),
        })
        .collect();
    let (pre_check_prunes, bound_prunes) = prune_counts(&records);
    Ok(LogSummary {
        estimated_savings: rows.iter().map(|r| r.savings).sum(),
        best: best_record(&records).map(|r| BestTrial {
            index: r.index,
            configuration: r.configuration.clone(),
            result: r.result.clone(),
        }),
        tokens_spent: records.last().map_or(0, |r| r.cumulative_tokens),
        rows,
        pre_check_prunes,
        bound_prunes,
    })
}

pub fn render_summary(summary: &LogSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>5}  {:>5}  {:>8}  {:>10}  {:>10}  {:<14}  {:>10}",
        "trial", "valid", "utility", "avg_cost", "tokens", "pruned", "savings"
    );
    for r in &summary.rows {
        let stage = match r.prune_stage {
            PruneStage::None => "-".to_string(),
            PruneStage::PreCheck => "pre-check".to_string(),
            PruneStage::Bound { n, k } => format!("n={n},k={k}"),
        };
        let _ = writeln!(
            out,
            "{:>5}  {:>5}  {:>8.4}  {:>10.1}  {:>10}  {:<14}  {:>10.0}",
            r.index,
            if r.valid { "yes" } else { "no" },
            r.utility,
            r.avg_cost,
            r.tokens_spent,
            stage,
            r.savings
        );
    }
    let _ = writeln!(out);
    match &summary.best {
        Some(b) => {
            let _ = writeln!(
                out,
                "best: trial {} utility {:.4} avg_cost {:.1}\n  {}",
                b.index,
                b.result.utility,
                b.result.avg_cost,
                b.configuration.key()
            );
        }
        None => {
            let _ = writeln!(out, "best: none valid");
        }
    }
    let _ = writeln!(
        out,
        "tokens spent: {}  pre-check prunes: {}  bound prunes: {}  estimated savings: {:.0}",
        summary.tokens_spent,
        summary.pre_check_prunes,
        summary.bound_prunes.values().sum::<usize>(),
        summary.estimated_savings
    );
    out
}
