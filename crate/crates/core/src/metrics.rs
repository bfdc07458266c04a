//! Utility scoring of response sets and token accounting.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::Usage;
use crate::data::Example;
use crate::space::Configuration;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("checker failed: {0}")]
    Checker(String),
    #[error("checker score {0} is outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("responses carry no log probabilities; request them with logprobs enabled")]
    MissingLogprobs,
    #[error("no responses to score")]
    NoResponses,
    #[error("example {id} has no field `{field}`")]
    MissingField { id: String, field: String },
    #[error("invalid utility binding: {0}")]
    Binding(String),
}

/// One generated text with its mean per-token log probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub text: String,
    pub mean_logprob: Option<f64>,
}

impl Response {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            mean_logprob: None,
        }
    }
}

/// Scores the responses a configuration produced for one example.
pub trait Utility: Send + Sync {
    /// Whether scoring needs `mean_logprob` on every response.
    fn needs_logprobs(&self) -> bool {
        false
    }

    fn score(
        &self,
        example: &Example,
        responses: &[Response],
        config: &Configuration,
    ) -> Result<f64, MetricsError>;
}

/// Max over per-response scores. Zero for an empty list.
pub fn best_of_scores(scores: &[f64]) -> f64 {
    scores.iter().copied().fold(0.0, f64::max)
}

/// Most frequent answer; among equally frequent answers, the one extracted
/// first. `None` when nothing was extracted.
pub fn majority_answer(answers: &[Option<String>]) -> Option<&str> {
    let mut counts: Vec<(&str, usize)> = Vec::new();
    for answer in answers.iter().flatten() {
        match counts.iter_mut().find(|(a, _)| *a == answer) {
            Some((_, c)) => *c += 1,
            None => counts.push((answer, 1)),
        }
    }
    // max_by_key keeps the last maximum; iterate in reverse so the first wins.
    counts.iter().rev().max_by_key(|(_, c)| *c).map(|(a, _)| *a)
}

/// Index of the response with the highest mean logprob, first on ties.
pub fn rerank_top(responses: &[Response]) -> Result<usize, MetricsError> {
    if responses.is_empty() {
        return Err(MetricsError::NoResponses);
    }
    let mut best = 0;
    let mut best_lp = f64::NEG_INFINITY;
    for (i, r) in responses.iter().enumerate() {
        let lp = r.mean_logprob.ok_or(MetricsError::MissingLogprobs)?;
        if i == 0 || lp > best_lp {
            best = i;
            best_lp = lp;
        }
    }
    Ok(best)
}

/// Whitespace-collapsed form used for answer equality.
pub fn normalize(answer: &str) -> String {
    answer.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Rule for pulling a final answer out of a response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extraction {
    /// Regex; capture group 1 if present, else the whole match. The last
    /// match in the response wins.
    Pattern(String),
    /// Content of the last `\boxed{...}`, braces balanced.
    Boxed,
}

#[derive(Debug, Clone)]
enum Extractor {
    Pattern(Regex),
    Boxed,
}

impl Extractor {
    fn compile(rule: &Extraction) -> Result<Self, MetricsError> {
        Ok(match rule {
            Extraction::Pattern(p) => {
                Extractor::Pattern(Regex::new(p).map_err(|e| MetricsError::Binding(e.to_string()))?)
            }
            Extraction::Boxed => Extractor::Boxed,
        })
    }

    fn extract(&self, text: &str) -> Option<String> {
        match self {
            Extractor::Pattern(re) => re.captures_iter(text).last().map(|caps| {
                caps.get(1)
                    .or_else(|| caps.get(0))
                    .map_or(String::new(), |m| m.as_str().to_string())
            }),
            Extractor::Boxed => last_boxed(text),
        }
    }
}

fn last_boxed(text: &str) -> Option<String> {
    const OPEN: &str = "\\boxed{";
    let start = text.rfind(OPEN)? + OPEN.len();
    let mut depth = 1;
    for (i, ch) in text[start..].char_indices() {
        match ch {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(text[start..start + i].to_string());
                }
            }
            _ => {}
        }
    }
    None
}

/// External scoring program: receives `{"example": .., "response": ..}` as
/// one JSON line on stdin and prints a score in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalChecker {
    pub program: PathBuf,
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(default = "default_checker_timeout")]
    pub timeout_secs: f64,
}

fn default_checker_timeout() -> f64 {
    30.0
}

impl ExternalChecker {
    pub fn score(&self, example: &Example, response: &str) -> Result<f64, MetricsError> {
        let payload = serde_json::json!({ "example": example, "response": response });
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| {
                MetricsError::Checker(format!("cannot start {}: {e}", self.program.display()))
            })?;
        let mut stdin = child.stdin.take().expect("stdin is piped");
        let mut stdout = child.stdout.take().expect("stdout is piped");
        let reader = std::thread::spawn(move || {
            let mut out = String::new();
            stdout.read_to_string(&mut out).map(|_| out)
        });
        // A checker that ignores its input may close stdin early.
        let _ = writeln!(stdin, "{payload}");
        drop(stdin);

        let deadline = Instant::now() + Duration::from_secs_f64(self.timeout_secs);
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break status,
                Ok(None) if Instant::now() >= deadline => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(MetricsError::Checker(format!(
                        "timed out after {}s",
                        self.timeout_secs
                    )));
                }
                Ok(None) => std::thread::sleep(Duration::from_millis(5)),
                Err(e) => return Err(MetricsError::Checker(e.to_string())),
            }
        };
        let out = reader
            .join()
            .map_err(|_| MetricsError::Checker("output reader panicked".into()))?
            .map_err(|e| MetricsError::Checker(e.to_string()))?;
        if !status.success() {
            return Err(MetricsError::Checker(format!("exited with {status}")));
        }
        let score: f64 = out
            .trim()
            .parse()
            .map_err(|_| MetricsError::Checker(format!("unparseable score {:?}", out.trim())))?;
        if !(0.0..=1.0).contains(&score) {
            return Err(MetricsError::ScoreOutOfRange(score));
        }
        Ok(score)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Checker {
    /// 1 iff the (extracted) answer equals the field after whitespace
    /// normalization.
    ExactMatch {
        field: String,
    },
    /// 1 iff the (extracted) answer contains the field's text.
    Contains {
        field: String,
    },
    External(ExternalChecker),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UtilityMode {
    /// Best score among all responses.
    #[default]
    BestOf,
    /// Modal extracted answer compared with the ground truth.
    MajorityVote,
    /// Score of the response with the highest mean logprob.
    RerankedTop,
}

/// Run-spec declaration of the utility function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityBinding {
    #[serde(default)]
    pub mode: UtilityMode,
    pub checker: Checker,
    #[serde(default)]
    pub extraction: Option<Extraction>,
    /// Concurrent checker invocations per example.
    #[serde(default = "one")]
    pub checker_parallelism: usize,
}

fn one() -> usize {
    1
}

/// Outcome of a majority vote over one response set.
#[derive(Debug, Clone, PartialEq)]
pub struct VoteOutcome {
    pub score: f64,
    /// Set when no response yielded an answer.
    pub no_answer: bool,
}

/// A compiled [`UtilityBinding`].
#[derive(Debug, Clone)]
pub struct UtilityFn {
    binding: UtilityBinding,
    extractor: Option<Extractor>,
}

impl UtilityFn {
    pub fn new(binding: UtilityBinding) -> Result<Self, MetricsError> {
        if binding.mode == UtilityMode::MajorityVote && binding.extraction.is_none() {
            return Err(MetricsError::Binding(
                "majority_vote needs an answer extraction rule".into(),
            ));
        }
        let extractor = binding
            .extraction
            .as_ref()
            .map(Extractor::compile)
            .transpose()?;
        Ok(Self { binding, extractor })
    }

    pub fn binding(&self) -> &UtilityBinding {
        &self.binding
    }

    fn truth<'e>(example: &'e Example, field: &str) -> Result<&'e str, MetricsError> {
        example
            .field(field)
            .ok_or_else(|| MetricsError::MissingField {
                id: example.id.clone(),
                field: field.to_string(),
            })
    }

    /// Checker score of one response text.
    pub fn check(&self, example: &Example, text: &str) -> Result<f64, MetricsError> {
        let answer = || match &self.extractor {
            Some(x) => x.extract(text),
            None => Some(text.to_string()),
        };
        match &self.binding.checker {
            Checker::ExactMatch { field } => {
                let truth = Self::truth(example, field)?;
                Ok(f64::from(
                    answer().is_some_and(|a| normalize(&a) == normalize(truth)),
                ))
            }
            Checker::Contains { field } => {
                let truth = Self::truth(example, field)?;
                Ok(f64::from(answer().is_some_and(|a| a.contains(truth))))
            }
            Checker::External(ext) => ext.score(example, text),
        }
    }

    pub fn best_of(&self, example: &Example, responses: &[Response]) -> Result<f64, MetricsError> {
        if responses.is_empty() {
            return Err(MetricsError::NoResponses);
        }
        let cap = self.binding.checker_parallelism.max(1);
        let mut scores = Vec::with_capacity(responses.len());
        for chunk in responses.chunks(cap) {
            if chunk.len() == 1 {
                scores.push(self.check(example, &chunk[0].text)?);
                continue;
            }
            let results: Vec<Result<f64, MetricsError>> = std::thread::scope(|s| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|r| s.spawn(move || self.check(example, &r.text)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("checker thread panicked"))
                    .collect()
            });
            for r in results {
                scores.push(r?);
            }
        }
        Ok(best_of_scores(&scores))
    }

    pub fn majority_vote(
        &self,
        example: &Example,
        responses: &[Response],
    ) -> Result<VoteOutcome, MetricsError> {
        let extractor = self.extractor.as_ref().ok_or_else(|| {
            MetricsError::Binding("majority_vote needs an answer extraction rule".into())
        })?;
        let answers: Vec<Option<String>> = responses
            .iter()
            .map(|r| extractor.extract(&r.text).map(|a| normalize(&a)))
            .collect();
        let Some(modal) = majority_answer(&answers) else {
            log::debug!("example {}: no extractable answer", example.id);
            return Ok(VoteOutcome {
                score: 0.0,
                no_answer: true,
            });
        };
        let equivalent = match &self.binding.checker {
            Checker::ExactMatch { field } => modal == normalize(Self::truth(example, field)?),
            Checker::Contains { field } => modal.contains(Self::truth(example, field)?),
            Checker::External(ext) => ext.score(example, modal)? >= 0.5,
        };
        Ok(VoteOutcome {
            score: f64::from(equivalent),
            no_answer: false,
        })
    }

    pub fn reranked_top(
        &self,
        example: &Example,
        responses: &[Response],
    ) -> Result<f64, MetricsError> {
        let top = rerank_top(responses)?;
        self.check(example, &responses[top].text)
    }
}

impl Utility for UtilityFn {
    fn needs_logprobs(&self) -> bool {
        self.binding.mode == UtilityMode::RerankedTop
    }

    fn score(
        &self,
        example: &Example,
        responses: &[Response],
        _config: &Configuration,
    ) -> Result<f64, MetricsError> {
        match self.binding.mode {
            UtilityMode::BestOf => self.best_of(example, responses),
            UtilityMode::MajorityVote => Ok(self.majority_vote(example, responses)?.score),
            UtilityMode::RerankedTop => self.reranked_top(example, responses),
        }
    }
}

/// Per-token prices of one model, in budget units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Price {
    pub input: f64,
    pub output: f64,
}

/// Converts token usage into budget units. Unlisted models cost one unit
/// per token, so an empty table measures plain tokens.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Pricing {
    pub models: BTreeMap<String, Price>,
}

impl Pricing {
    pub fn cost(&self, model: &str, input_tokens: u64, output_tokens: u64) -> f64 {
        match self.models.get(model) {
            Some(p) => p.input * input_tokens as f64 + p.output * output_tokens as f64,
            None => (input_tokens + output_tokens) as f64,
        }
    }

    pub fn usage_cost(&self, model: &str, usage: &Usage) -> f64 {
        match self.models.get(model) {
            Some(_) => self.cost(model, usage.input_tokens, usage.output_tokens),
            None => usage.total_tokens as f64,
        }
    }
}

/// Running spend against the optimization budget.
#[derive(Debug, Clone, PartialEq)]
pub struct CostLedger {
    budget: f64,
    pricing: Pricing,
    spent: f64,
    tokens: u64,
    per_trial: Vec<u64>,
}

impl CostLedger {
    pub fn new(budget: f64, pricing: Pricing) -> Self {
        Self {
            budget,
            pricing,
            spent: 0.0,
            tokens: 0,
            per_trial: Vec::new(),
        }
    }

    /// Adds one trial's usage; returns whether the budget is now exhausted.
    pub fn charge(&mut self, model: &str, usage: &Usage) -> bool {
        self.spent += self.pricing.usage_cost(model, usage);
        self.tokens += usage.total_tokens;
        self.per_trial.push(usage.total_tokens);
        self.exhausted()
    }

    pub fn exhausted(&self) -> bool {
        self.spent >= self.budget
    }

    pub fn spent(&self) -> f64 {
        self.spent
    }

    pub fn remaining(&self) -> f64 {
        (self.budget - self.spent).max(0.0)
    }

    pub fn tokens(&self) -> u64 {
        self.tokens
    }

    pub fn per_trial(&self) -> &[u64] {
        &self.per_trial
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn example(answer: &str) -> Example {
        Example::new("0", &[("answer", answer)])
    }

    fn voter() -> UtilityFn {
        UtilityFn::new(UtilityBinding {
            mode: UtilityMode::MajorityVote,
            checker: Checker::ExactMatch {
                field: "answer".into(),
            },
            extraction: Some(Extraction::Pattern(r"ANSWER:(\S+)".into())),
            checker_parallelism: 1,
        })
        .unwrap()
    }

    fn answers(xs: &[&str]) -> Vec<Response> {
        xs.iter()
            .map(|a| Response::text(format!("work ANSWER:{a}")))
            .collect()
    }

    #[test]
    fn best_of_takes_the_max() {
        assert_eq!(best_of_scores(&[0.0, 0.0, 1.0, 0.0]), 1.0);
        assert_eq!(best_of_scores(&[0.0, 0.0]), 0.0);
        assert_eq!(best_of_scores(&[0.0, 0.0, 1.0]), 1.0);
    }

    #[test]
    fn majority_vote_cases() {
        let v = voter();
        let truth = example("7");
        assert_eq!(
            v.majority_vote(&truth, &answers(&["7", "7", "3"]))
                .unwrap()
                .score,
            1.0
        );
        assert_eq!(
            v.majority_vote(&truth, &answers(&["7", "3"]))
                .unwrap()
                .score,
            1.0
        );
        assert_eq!(
            v.majority_vote(&truth, &answers(&["3", "7"]))
                .unwrap()
                .score,
            0.0
        );
        assert_eq!(
            v.majority_vote(&truth, &answers(&["3", "3", "7"]))
                .unwrap()
                .score,
            0.0
        );
    }

    #[test]
    fn majority_vote_without_answers_flags() {
        let out = voter()
            .majority_vote(&example("7"), &[Response::text("no idea")])
            .unwrap();
        assert_eq!(
            out,
            VoteOutcome {
                score: 0.0,
                no_answer: true
            }
        );
    }

    #[test]
    fn majority_vote_requires_extraction() {
        let err = UtilityFn::new(UtilityBinding {
            mode: UtilityMode::MajorityVote,
            checker: Checker::ExactMatch { field: "a".into() },
            extraction: None,
            checker_parallelism: 1,
        })
        .unwrap_err();
        assert!(matches!(err, MetricsError::Binding(_)));
    }

    #[test]
    fn modal_answer_tie_goes_to_first_extracted() {
        let xs = |v: &[&str]| v.iter().map(|s| Some(s.to_string())).collect::<Vec<_>>();
        assert_eq!(majority_answer(&xs(&["b", "a", "a", "b"])), Some("b"));
        assert_eq!(majority_answer(&xs(&["b", "a", "a"])), Some("a"));
        assert_eq!(majority_answer(&[None, Some("z".into())]), Some("z"));
        assert_eq!(majority_answer(&[None, None]), None);
    }

    #[test]
    fn rerank_picks_highest_mean_logprob() {
        let r = |lp: f64| Response {
            text: lp.to_string(),
            mean_logprob: Some(lp),
        };
        assert_eq!(rerank_top(&[r(-1.0), r(-0.5)]).unwrap(), 1);
        assert_eq!(rerank_top(&[r(-3.0)]).unwrap(), 0);
        assert_eq!(rerank_top(&[r(-0.5), r(-0.5), r(-0.5)]).unwrap(), 0);
        assert_eq!(
            rerank_top(&[r(-0.5), Response::text("x")]).unwrap_err(),
            MetricsError::MissingLogprobs
        );
    }

    #[test]
    fn boxed_extraction_balances_braces() {
        assert_eq!(
            last_boxed(r"so \boxed{1} or \boxed{\frac{1}{2}} done"),
            Some(r"\frac{1}{2}".into())
        );
        assert_eq!(last_boxed(r"\boxed{open"), None);
    }

    #[test]
    fn exact_match_normalizes_whitespace() {
        let u = UtilityFn::new(UtilityBinding {
            mode: UtilityMode::BestOf,
            checker: Checker::ExactMatch {
                field: "answer".into(),
            },
            extraction: None,
            checker_parallelism: 2,
        })
        .unwrap();
        let ex = example("a  b");
        assert_eq!(
            u.best_of(&ex, &[Response::text("x"), Response::text(" a b\n")])
                .unwrap(),
            1.0
        );
        let missing = Example::new("9", &[("other", "x")]);
        assert!(matches!(
            u.best_of(&missing, &[Response::text("x")]),
            Err(MetricsError::MissingField { .. })
        ));
    }

    #[cfg(unix)]
    #[test]
    fn external_checker_protocol() {
        let ok = ExternalChecker {
            program: "/bin/sh".into(),
            args: vec!["-c".into(), "cat >/dev/null; echo 0.25".into()],
            timeout_secs: 10.0,
        };
        assert_eq!(ok.score(&example("1"), "r").unwrap(), 0.25);

        let crash = ExternalChecker {
            args: vec!["-c".into(), "exit 3".into()],
            ..ok.clone()
        };
        assert!(matches!(
            crash.score(&example("1"), "r"),
            Err(MetricsError::Checker(_))
        ));

        let wild = ExternalChecker {
            args: vec!["-c".into(), "echo 2".into()],
            ..ok.clone()
        };
        assert_eq!(
            wild.score(&example("1"), "r").unwrap_err(),
            MetricsError::ScoreOutOfRange(2.0)
        );

        let slow = ExternalChecker {
            args: vec!["-c".into(), "sleep 5".into()],
            timeout_secs: 0.2,
            ..ok
        };
        assert!(matches!(
            slow.score(&example("1"), "r"),
            Err(MetricsError::Checker(_))
        ));
    }

    #[test]
    fn ledger_exhausts_at_fiftieth_trial() {
        let mut ledger = CostLedger::new(1_000_000.0, Pricing::default());
        for trial in 1..=50 {
            let exhausted = ledger.charge("m", &Usage::new(20_000, 0));
            assert_eq!(exhausted, trial == 50, "trial {trial}");
        }
        assert_eq!(ledger.tokens(), 1_000_000);
    }

    #[test]
    fn zero_charge_changes_nothing_but_the_trial_list() {
        let mut ledger = CostLedger::new(10.0, Pricing::default());
        ledger.charge("m", &Usage::new(4, 0));
        let before = ledger.spent();
        assert!(!ledger.charge("m", &Usage::default()));
        assert_eq!(ledger.spent(), before);
    }

    #[test]
    fn overshoot_is_flagged_after_the_trial() {
        let mut ledger = CostLedger::new(100.0, Pricing::default());
        assert!(!ledger.charge("m", &Usage::new(60, 0)));
        assert!(ledger.charge("m", &Usage::new(60, 10)));
        assert_eq!(ledger.tokens(), 130);
        assert_eq!(ledger.remaining(), 0.0);
    }

    #[test]
    fn pricing_weights_tokens() {
        let mut pricing = Pricing::default();
        pricing.models.insert(
            "big".into(),
            Price {
                input: 2.0,
                output: 3.0,
            },
        );
        assert_eq!(pricing.usage_cost("big", &Usage::new(10, 1)), 23.0);
        assert_eq!(pricing.usage_cost("small", &Usage::new(10, 1)), 11.0);
    }

    proptest! {
        #[test]
        fn best_of_is_monotone_under_extension(
            prefix in proptest::collection::vec(0.0f64..=1.0, 1..20),
            extra in proptest::collection::vec(0.0f64..=1.0, 0..20),
        ) {
            let before = best_of_scores(&prefix);
            let mut all = prefix.clone();
            all.extend(extra);
            let after = best_of_scores(&all);
            prop_assert!(after >= before);
            prop_assert!((0.0..=1.0).contains(&after));
        }
    }
}
