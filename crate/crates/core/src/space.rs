//! Hyperparameter search space for completion requests.
//!
//! A [`SearchSpace`] maps hyperparameter names to [`Domain`]s. Sampling a
//! space yields a [`Configuration`], the concrete set of request settings a
//! trial evaluates. The declaration format mirrors the usual HPO vocabulary:
//!
//! ```json
//! {
//!   "model": {"choice": ["gpt-3.5-turbo", "gpt-4"]},
//!   "max_tokens": {"lograndint": [100, 1000]},
//!   "temperature_or_top_p": {"one_of": [
//!       {"temperature": {"uniform": [0, 1]}},
//!       {"top_p": {"uniform": [0, 1]}}
//!   ]}
//! }
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backend::prompt::placeholders;

pub const MODEL: &str = "model";
pub const PROMPT: &str = "prompt";
pub const MAX_TOKENS: &str = "max_tokens";
pub const TEMPERATURE: &str = "temperature";
pub const TOP_P: &str = "top_p";
pub const N: &str = "n";
pub const STOP: &str = "stop";
pub const PRESENCE_PENALTY: &str = "presence_penalty";
pub const FREQUENCY_PENALTY: &str = "frequency_penalty";
pub const BEST_OF: &str = "best_of";

/// Models listed in the default space.
pub const DEFAULT_MODELS: [&str; 5] = [
    "text-ada-001",
    "text-babbage-001",
    "text-davinci-003",
    "gpt-3.5-turbo",
    "gpt-4",
];

/// A hyperparameter value as it appears in a space declaration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Null,
    Int(i64),
    Float(f64),
    Text(String),
    TextList(Vec<String>),
}

impl Value {
    fn as_f64(&self) -> Option<f64> {
        match *self {
            Value::Int(i) => Some(i as f64),
            Value::Float(f) => Some(f),
            _ => None,
        }
    }

    fn as_int(&self) -> Option<i64> {
        match *self {
            Value::Int(i) => Some(i),
            Value::Float(f) if f.fract() == 0.0 && f.is_finite() => Some(f as i64),
            _ => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match serde_json::to_string(self) {
            Ok(s) => f.write_str(&s),
            Err(_) => write!(f, "{self:?}"),
        }
    }
}

/// Sampling distribution of one hyperparameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Domain {
    #[serde(rename = "constant")]
    Constant(Value),
    #[serde(rename = "choice")]
    Choice(Vec<Value>),
    /// Integers in `[lo, hi]`, uniform.
    #[serde(rename = "randint")]
    RandInt(i64, i64),
    /// Integers in `[lo, hi]`, uniform on the log scale.
    #[serde(rename = "lograndint")]
    LogRandInt(i64, i64),
    #[serde(rename = "uniform")]
    Uniform(f64, f64),
    /// Exactly one sub-space is chosen per sample; its keys join the
    /// configuration.
    #[serde(rename = "one_of")]
    Hierarchical(Vec<BTreeMap<String, Domain>>),
}

impl Domain {
    /// Whether sampling can produce more than one value.
    pub fn is_free(&self) -> bool {
        match self {
            Domain::Constant(_) => false,
            Domain::Choice(values) => values.len() > 1,
            Domain::RandInt(lo, hi) | Domain::LogRandInt(lo, hi) => lo < hi,
            Domain::Uniform(lo, hi) => lo < hi,
            Domain::Hierarchical(branches) => {
                branches.len() > 1 || branches.iter().any(|b| b.values().any(Domain::is_free))
            }
        }
    }

    fn dimensions(&self) -> usize {
        match self {
            Domain::Hierarchical(branches) => {
                let inner = branches
                    .iter()
                    .map(|b| b.values().map(Domain::dimensions).sum::<usize>())
                    .max()
                    .unwrap_or(0);
                usize::from(branches.len() > 1) + inner
            }
            d => usize::from(d.is_free()),
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Value {
        match self {
            Domain::Constant(v) => v.clone(),
            Domain::Choice(values) => values[rng.random_range(0..values.len())].clone(),
            Domain::RandInt(lo, hi) => Value::Int(rng.random_range(*lo..=*hi)),
            Domain::LogRandInt(lo, hi) => {
                if lo == hi {
                    return Value::Int(*lo);
                }
                let (a, b) = ((*lo as f64).ln(), (*hi as f64).ln());
                let x = (a + (b - a) * rng.random::<f64>()).exp();
                Value::Int(round_clip(x, *lo, *hi))
            }
            Domain::Uniform(lo, hi) => Value::Float(lo + (hi - lo) * rng.random::<f64>()),
            Domain::Hierarchical(_) => unreachable!("hierarchical domains expand to several keys"),
        }
    }

    fn contains(&self, name: &str, value: &Value) -> bool {
        match self {
            Domain::Constant(c) => same_value(name, c, value),
            Domain::Choice(values) => values.iter().any(|c| same_value(name, c, value)),
            Domain::RandInt(lo, hi) | Domain::LogRandInt(lo, hi) => {
                value.as_int().is_some_and(|v| *lo <= v && v <= *hi)
            }
            Domain::Uniform(lo, hi) => value.as_f64().is_some_and(|v| *lo <= v && v <= *hi),
            Domain::Hierarchical(_) => false,
        }
    }
}

/// Round half up, then clip into `[lo, hi]`.
fn round_clip(x: f64, lo: i64, hi: i64) -> i64 {
    ((x + 0.5).floor() as i64).clamp(lo, hi)
}

fn same_value(name: &str, a: &Value, b: &Value) -> bool {
    match (canonical(name, a), canonical(name, b)) {
        (Ok(a), Ok(b)) => a == b,
        _ => a == b,
    }
}

#[derive(Clone, Copy)]
enum Kind {
    Text,
    Int { min: i64 },
    Real { lo: f64, hi: f64 },
    StopList,
}

fn kind_of(name: &str) -> Option<Kind> {
    Some(match name {
        MODEL | PROMPT => Kind::Text,
        MAX_TOKENS | N | BEST_OF => Kind::Int { min: 1 },
        TEMPERATURE | TOP_P => Kind::Real { lo: 0.0, hi: 1.0 },
        PRESENCE_PENALTY | FREQUENCY_PENALTY => Kind::Real { lo: -2.0, hi: 2.0 },
        STOP => Kind::StopList,
        _ => return None,
    })
}

/// Coerces a declared value to the canonical type of the named
/// hyperparameter, checking its admissible range.
fn canonical(name: &str, value: &Value) -> Result<Value, String> {
    let kind = kind_of(name).ok_or_else(|| format!("unknown hyperparameter `{name}`"))?;
    match (kind, value) {
        (Kind::Text, Value::Text(s)) => Ok(Value::Text(s.clone())),
        (Kind::Int { min }, v) => match v.as_int() {
            Some(i) if i >= min => Ok(Value::Int(i)),
            Some(i) => Err(format!("`{name}` must be ≥ {min}, got {i}")),
            None => Err(format!("`{name}` must be an integer, got {v}")),
        },
        (Kind::Real { lo, hi }, v) => match v.as_f64() {
            Some(x) if (lo..=hi).contains(&x) => Ok(Value::Float(x)),
            Some(x) => Err(format!("`{name}` must lie in [{lo}, {hi}], got {x}")),
            None => Err(format!("`{name}` must be a number, got {v}")),
        },
        (Kind::StopList, Value::Null) => Ok(Value::Null),
        (Kind::StopList, Value::Text(s)) => Ok(Value::TextList(vec![s.clone()])),
        (Kind::StopList, Value::TextList(l)) => Ok(Value::TextList(l.clone())),
        (_, v) => Err(format!("`{name}` has the wrong type: {v}")),
    }
}

/// Either a temperature or a top_p, never both.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    Temperature(f64),
    TopP(f64),
}

impl Sampling {
    pub fn value(&self) -> f64 {
        match *self {
            Sampling::Temperature(v) | Sampling::TopP(v) => v,
        }
    }

    fn key(&self) -> &'static str {
        match self {
            Sampling::Temperature(_) => TEMPERATURE,
            Sampling::TopP(_) => TOP_P,
        }
    }
}

/// One point of the search space: the settings of a completion request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Configuration {
    pub model: String,
    pub prompt: String,
    pub max_tokens: u32,
    #[serde(flatten)]
    pub sampling: Sampling,
    pub n: u32,
    pub stop: Option<Vec<String>>,
    pub presence_penalty: f64,
    pub frequency_penalty: f64,
    pub best_of: u32,
}

impl Configuration {
    /// Number of generations the configuration asks for per example: `best_of`
    /// when it is searched, `n` otherwise.
    pub fn response_count(&self) -> u32 {
        if self.best_of > 1 {
            self.best_of
        } else {
            self.n
        }
    }

    /// Canonical serialization; two configurations are the same trial iff
    /// their keys are equal.
    pub fn key(&self) -> String {
        serde_json::to_string(self).expect("configuration serializes")
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        for (name, v) in self.assignment() {
            canonical(&name, &v)?;
        }
        if self.best_of > 1 && self.n != 1 {
            return Err(format!(
                "best_of = {} requires n = 1, got n = {}",
                self.best_of, self.n
            ));
        }
        Ok(())
    }

    /// Flat name → value view.
    pub fn assignment(&self) -> BTreeMap<String, Value> {
        let mut map = BTreeMap::new();
        map.insert(MODEL.into(), Value::Text(self.model.clone()));
        map.insert(PROMPT.into(), Value::Text(self.prompt.clone()));
        map.insert(MAX_TOKENS.into(), Value::Int(self.max_tokens.into()));
        map.insert(
            self.sampling.key().into(),
            Value::Float(self.sampling.value()),
        );
        map.insert(N.into(), Value::Int(self.n.into()));
        map.insert(
            STOP.into(),
            self.stop.clone().map_or(Value::Null, Value::TextList),
        );
        map.insert(PRESENCE_PENALTY.into(), Value::Float(self.presence_penalty));
        map.insert(
            FREQUENCY_PENALTY.into(),
            Value::Float(self.frequency_penalty),
        );
        map.insert(BEST_OF.into(), Value::Int(self.best_of.into()));
        map
    }

    /// Builds a configuration from a flat assignment, filling the API
    /// defaults for anything unassigned.
    pub fn from_assignment(map: &BTreeMap<String, Value>) -> Result<Self, String> {
        let get = |name: &str| -> Result<Option<Value>, String> {
            map.get(name).map(|v| canonical(name, v)).transpose()
        };
        let text = |name: &str| -> Result<String, String> {
            match get(name)? {
                Some(Value::Text(s)) => Ok(s),
                _ => Err(format!("missing required hyperparameter `{name}`")),
            }
        };
        let int = |name: &str, default: Option<u32>| -> Result<u32, String> {
            match get(name)? {
                Some(Value::Int(i)) => {
                    u32::try_from(i).map_err(|_| format!("`{name}` = {i} is out of range"))
                }
                _ => default.ok_or_else(|| format!("missing required hyperparameter `{name}`")),
            }
        };
        let real = |name: &str| -> Result<Option<f64>, String> {
            Ok(match get(name)? {
                Some(Value::Float(x)) => Some(x),
                _ => None,
            })
        };
        let sampling = match (real(TEMPERATURE)?, real(TOP_P)?) {
            (Some(_), Some(_)) => {
                return Err("a configuration sets either temperature or top_p, not both".into())
            }
            (Some(t), None) => Sampling::Temperature(t),
            (None, Some(p)) => Sampling::TopP(p),
            (None, None) => Sampling::Temperature(1.0),
        };
        let stop = match get(STOP)? {
            Some(Value::TextList(l)) => Some(l),
            _ => None,
        };
        let config = Configuration {
            model: text(MODEL)?,
            prompt: text(PROMPT)?,
            max_tokens: int(MAX_TOKENS, None)?,
            sampling,
            n: int(N, Some(1))?,
            stop,
            presence_penalty: real(PRESENCE_PENALTY)?.unwrap_or(0.0),
            frequency_penalty: real(FREQUENCY_PENALTY)?.unwrap_or(0.0),
            best_of: int(BEST_OF, Some(1))?,
        };
        config.check_invariants()?;
        Ok(config)
    }
}

/// A violated space invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub param: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.param, self.message)
    }
}

/// Named map of hyperparameter domains.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SearchSpace {
    params: BTreeMap<String, Domain>,
}

impl SearchSpace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, domain: Domain) -> Self {
        self.params.insert(name.to_string(), domain);
        self
    }

    pub fn insert(&mut self, name: &str, domain: Domain) {
        self.params.insert(name.to_string(), domain);
    }

    pub fn get(&self, name: &str) -> Option<&Domain> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Domain)> {
        self.params.iter()
    }

    /// Names whose value is fixed for every sample.
    pub fn fixed_keys(&self) -> BTreeSet<String> {
        let mut keys = BTreeSet::new();
        for (name, domain) in &self.params {
            match domain {
                Domain::Hierarchical(branches) if branches.len() == 1 => {
                    keys.extend(
                        branches[0]
                            .iter()
                            .filter(|(_, d)| !d.is_free())
                            .map(|(k, _)| k.clone()),
                    );
                }
                Domain::Hierarchical(_) => {}
                d if !d.is_free() => {
                    keys.insert(name.clone());
                }
                _ => {}
            }
        }
        keys
    }

    /// Number of independently varying dimensions; a hierarchical domain
    /// counts its branch choice plus its widest branch.
    pub fn dimensions(&self) -> usize {
        self.params.values().map(Domain::dimensions).sum()
    }

    /// Whether `config` is a point of this space.
    pub fn contains(&self, config: &Configuration) -> bool {
        let assignment = config.assignment();
        let mut covered: BTreeSet<&str> = BTreeSet::new();
        for (name, domain) in &self.params {
            match domain {
                Domain::Hierarchical(branches) => {
                    let hit = branches.iter().find(|branch| {
                        branch
                            .iter()
                            .all(|(k, d)| assignment.get(k).is_some_and(|v| d.contains(k, v)))
                    });
                    let Some(branch) = hit else { return false };
                    covered.extend(branch.keys().map(String::as_str));
                }
                d => {
                    let Some(v) = assignment.get(name) else {
                        return false;
                    };
                    if !d.contains(name, v) {
                        return false;
                    }
                    covered.insert(name);
                }
            }
        }
        // Unassigned hyperparameters must hold their defaults.
        let defaults = Configuration::from_assignment(
            &[MODEL, PROMPT, MAX_TOKENS]
                .iter()
                .map(|k| (k.to_string(), assignment[*k].clone()))
                .collect(),
        )
        .expect("required keys are present")
        .assignment();
        assignment
            .iter()
            .filter(|(k, _)| !covered.contains(k.as_str()))
            .all(|(k, v)| defaults.get(k) == Some(v))
    }
}

/// The default space: five models, the `{prompt}` template, log-scaled
/// max_tokens, either a temperature or a top_p, and up to 100 responses.
pub fn default_space() -> SearchSpace {
    let unit = || Domain::Uniform(0.0, 1.0);
    SearchSpace::new()
        .with(
            MODEL,
            Domain::Choice(
                DEFAULT_MODELS
                    .iter()
                    .map(|m| Value::Text(m.to_string()))
                    .collect(),
            ),
        )
        .with(PROMPT, Domain::Choice(vec![Value::Text("{prompt}".into())]))
        .with(MAX_TOKENS, Domain::LogRandInt(100, 1000))
        .with(
            "temperature_or_top_p",
            Domain::Hierarchical(vec![
                BTreeMap::from([(TEMPERATURE.to_string(), unit())]),
                BTreeMap::from([(TOP_P.to_string(), unit())]),
            ]),
        )
        .with(N, Domain::RandInt(1, 100))
        .with(STOP, Domain::Constant(Value::Null))
        .with(PRESENCE_PENALTY, Domain::Constant(Value::Float(0.0)))
        .with(FREQUENCY_PENALTY, Domain::Constant(Value::Float(0.0)))
        .with(BEST_OF, Domain::Constant(Value::Int(1)))
}

fn check_domain(name: &str, domain: &Domain, out: &mut Vec<Violation>) {
    let mut push = |message: String| {
        out.push(Violation {
            param: name.to_string(),
            message,
        })
    };
    if kind_of(name).is_none() {
        push(format!("unknown hyperparameter `{name}`"));
        return;
    }
    match domain {
        Domain::Constant(v) => {
            if let Err(e) = canonical(name, v) {
                push(e);
            }
        }
        Domain::Choice(values) => {
            if values.is_empty() {
                push("choice list must be non-empty".into());
            }
            for v in values {
                if let Err(e) = canonical(name, v) {
                    push(e);
                }
            }
        }
        Domain::RandInt(lo, hi) | Domain::LogRandInt(lo, hi) => {
            if lo > hi {
                push(format!("lower bound {lo} exceeds upper bound {hi}"));
            }
            if matches!(domain, Domain::LogRandInt(..)) && *lo < 1 {
                push("LogRandInt lower bound must be ≥ 1".into());
            }
            for bound in [lo, hi] {
                if let Err(e) = canonical(name, &Value::Int(*bound)) {
                    push(e);
                }
            }
        }
        Domain::Uniform(lo, hi) => {
            if lo.partial_cmp(hi).is_none_or(|o| o.is_gt()) {
                push(format!("lower bound {lo} exceeds upper bound {hi}"));
            }
            for bound in [lo, hi] {
                if let Err(e) = canonical(name, &Value::Float(*bound)) {
                    push(e);
                }
            }
        }
        Domain::Hierarchical(_) => push("hierarchical domains nest only one level".into()),
    }
}

/// Upper end of the values a domain can produce, for integer parameters.
fn int_max(domain: &Domain) -> Option<i64> {
    match domain {
        Domain::Constant(v) => v.as_int(),
        Domain::Choice(values) => values.iter().filter_map(Value::as_int).max(),
        Domain::RandInt(_, hi) | Domain::LogRandInt(_, hi) => Some(*hi),
        _ => None,
    }
}

/// Checks every space and domain invariant, collecting all violations.
pub fn validate_space(space: &SearchSpace) -> Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    // Top-level keys plus each hierarchical domain's alternative branches.
    let mut top: BTreeMap<&str, &Domain> = BTreeMap::new();
    let mut groups: Vec<(&str, &Vec<BTreeMap<String, Domain>>)> = Vec::new();
    for (name, domain) in &space.params {
        match domain {
            Domain::Hierarchical(branches) => {
                if branches.is_empty() {
                    out.push(Violation {
                        param: name.clone(),
                        message: "hierarchical domain needs at least one branch".into(),
                    });
                }
                for branch in branches {
                    if branch.is_empty() {
                        out.push(Violation {
                            param: name.clone(),
                            message: "hierarchical branch must name at least one key".into(),
                        });
                    }
                    for (key, d) in branch {
                        check_domain(key, d, &mut out);
                    }
                }
                groups.push((name, branches));
            }
            d => {
                check_domain(name, d, &mut out);
                top.insert(name, d);
            }
        }
    }

    for required in [MODEL, PROMPT, MAX_TOKENS] {
        let in_branch = groups
            .iter()
            .any(|(_, bs)| !bs.is_empty() && bs.iter().all(|b| b.contains_key(required)));
        if !top.contains_key(required) && !in_branch {
            out.push(Violation {
                param: required.into(),
                message: "required hyperparameter is not declared".into(),
            });
        }
    }

    if let (Some(t), Some(p)) = (top.get(TEMPERATURE), top.get(TOP_P)) {
        let message = if t.is_free() && p.is_free() {
            "temperature and top_p must not both vary; declare them as alternatives of a \
             one_of domain"
        } else {
            "a configuration sets either temperature or top_p, not both"
        };
        out.push(Violation {
            param: format!("{TEMPERATURE}/{TOP_P}"),
            message: message.into(),
        });
    }

    // Keys introduced by a branch must not collide with other declarations.
    for (i, (group, branches)) in groups.iter().enumerate() {
        let other_groups: BTreeSet<&str> = groups
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .flat_map(|(_, (_, bs))| bs.iter().flat_map(|b| b.keys().map(String::as_str)))
            .collect();
        for branch in branches.iter() {
            for key in branch.keys() {
                if top.contains_key(key.as_str()) || other_groups.contains(key.as_str()) {
                    out.push(Violation {
                        param: (*group).into(),
                        message: format!("`{key}` is declared more than once"),
                    });
                }
            }
            let sampling_keys = [TEMPERATURE, TOP_P]
                .iter()
                .filter(|k| branch.contains_key(**k) || top.contains_key(**k))
                .count();
            if sampling_keys > 1 {
                out.push(Violation {
                    param: (*group).into(),
                    message: "a branch may set either temperature or top_p, not both".into(),
                });
            }
        }
    }

    let lookup = |key: &str| -> Vec<&Domain> {
        let mut found: Vec<&Domain> = top.get(key).copied().into_iter().collect();
        for (_, branches) in &groups {
            found.extend(branches.iter().filter_map(|b| b.get(key)));
        }
        found
    };
    let best_of_max = lookup(BEST_OF)
        .into_iter()
        .filter_map(int_max)
        .max()
        .unwrap_or(1);
    if best_of_max > 1 {
        let n_is_one = lookup(N).into_iter().all(|d| {
            same_value(
                N,
                &Value::Int(1),
                &match d {
                    Domain::Constant(v) => v.clone(),
                    Domain::Choice(vs) if vs.len() == 1 => vs[0].clone(),
                    Domain::RandInt(1, 1) | Domain::LogRandInt(1, 1) => Value::Int(1),
                    _ => Value::Null,
                },
            )
        });
        if !n_is_one {
            out.push(Violation {
                param: BEST_OF.into(),
                message: "best_of can exceed 1, so n must be the constant 1".into(),
            });
        }
    }

    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

/// Checks that every prompt template only names fields the tuning data has.
pub fn check_prompt_fields(space: &SearchSpace, fields: &BTreeSet<String>) -> Vec<Violation> {
    let mut templates: Vec<&Value> = Vec::new();
    fn collect<'s>(d: &'s Domain, templates: &mut Vec<&'s Value>) {
        match d {
            Domain::Constant(v) => templates.push(v),
            Domain::Choice(vs) => templates.extend(vs),
            _ => {}
        }
    }
    for (name, domain) in &space.params {
        match domain {
            Domain::Hierarchical(branches) => branches
                .iter()
                .filter_map(|b| b.get(PROMPT))
                .for_each(|d| collect(d, &mut templates)),
            d if name == PROMPT => collect(d, &mut templates),
            _ => {}
        }
    }
    let mut out = Vec::new();
    for template in templates {
        let Value::Text(template) = template else {
            continue;
        };
        match placeholders(template) {
            Ok(names) => {
                for name in names.into_iter().filter(|n| !fields.contains(n)) {
                    out.push(Violation {
                        param: PROMPT.into(),
                        message: format!(
                            "template {template:?} uses `{{{name}}}` but the tuning data has no \
                             such field"
                        ),
                    });
                }
            }
            Err(e) => out.push(Violation {
                param: PROMPT.into(),
                message: format!("template {template:?}: {e}"),
            }),
        }
    }
    out
}

/// Draws one configuration. The space must pass [`validate_space`].
pub fn sample<R: Rng + ?Sized>(space: &SearchSpace, rng: &mut R) -> Configuration {
    let mut assignment = BTreeMap::new();
    for (name, domain) in &space.params {
        match domain {
            Domain::Hierarchical(branches) => {
                let branch = &branches[rng.random_range(0..branches.len())];
                for (key, d) in branch {
                    assignment.insert(key.clone(), d.sample(rng));
                }
            }
            d => {
                assignment.insert(name.clone(), d.sample(rng));
            }
        }
    }
    Configuration::from_assignment(&assignment)
        .unwrap_or_else(|e| panic!("sampled from an invalid space: {e}"))
}

/// A numeric coordinate that a local move can shift.
struct Axis {
    key: String,
    domain: Domain,
}

/// Random neighbor of `config`.
///
/// Numeric dimensions move along a random unit direction scaled by `step`
/// times the dimension's range (log range for `LogRandInt`), then clip to
/// bounds. Categorical and hierarchical choices are redrawn with
/// probability `min(step, 1)`.
pub fn perturb<R: Rng + ?Sized>(
    config: &Configuration,
    space: &SearchSpace,
    step: f64,
    rng: &mut R,
) -> Configuration {
    if step <= 0.0 {
        return config.clone();
    }
    let redraw = step.min(1.0);
    let mut assignment = config.assignment();
    let mut axes = Vec::new();

    for (name, domain) in &space.params {
        match domain {
            Domain::Hierarchical(branches) => {
                let current = branches.iter().position(|b| {
                    b.iter()
                        .all(|(k, d)| assignment.get(k).is_some_and(|v| d.contains(k, v)))
                });
                let resample = branches.len() > 1 && rng.random_bool(redraw);
                match current {
                    Some(i) if !resample => {
                        for (key, d) in &branches[i] {
                            match d {
                                Domain::Choice(vs) if vs.len() > 1 && rng.random_bool(redraw) => {
                                    assignment.insert(key.clone(), d.sample(rng));
                                }
                                d if is_numeric(d) && d.is_free() => axes.push(Axis {
                                    key: key.clone(),
                                    domain: d.clone(),
                                }),
                                _ => {}
                            }
                        }
                    }
                    _ => {
                        for branch in branches {
                            for key in branch.keys() {
                                assignment.remove(key);
                            }
                        }
                        let branch = &branches[rng.random_range(0..branches.len())];
                        for (key, d) in branch {
                            assignment.insert(key.clone(), d.sample(rng));
                        }
                    }
                }
            }
            Domain::Choice(vs) if vs.len() > 1 => {
                if rng.random_bool(redraw) {
                    assignment.insert(name.clone(), domain.sample(rng));
                }
            }
            d if is_numeric(d) && d.is_free() => axes.push(Axis {
                key: name.clone(),
                domain: d.clone(),
            }),
            _ => {}
        }
    }

    if !axes.is_empty() {
        let direction: Vec<f64> = axes.iter().map(|_| rng.sample(StandardNormal)).collect();
        let norm = direction.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (axis, u) in axes.iter().zip(&direction) {
            let u = if norm > 0.0 { u / norm } else { 0.0 };
            let moved = shift(&axis.domain, &assignment[&axis.key], step * u);
            assignment.insert(axis.key.clone(), moved);
        }
    }

    Configuration::from_assignment(&assignment)
        .unwrap_or_else(|e| panic!("perturbation left the space: {e}"))
}

fn is_numeric(d: &Domain) -> bool {
    matches!(
        d,
        Domain::RandInt(..) | Domain::LogRandInt(..) | Domain::Uniform(..)
    )
}

/// Moves `value` by `delta` in units of the domain's (log-)range.
fn shift(domain: &Domain, value: &Value, delta: f64) -> Value {
    match *domain {
        Domain::RandInt(lo, hi) => {
            let x = value.as_f64().unwrap_or(lo as f64);
            Value::Int(round_clip(x + delta * (hi - lo) as f64, lo, hi))
        }
        Domain::LogRandInt(lo, hi) => {
            let x = value.as_f64().unwrap_or(lo as f64).max(1.0).ln();
            let span = (hi as f64).ln() - (lo as f64).ln();
            Value::Int(round_clip((x + delta * span).exp(), lo, hi))
        }
        Domain::Uniform(lo, hi) => {
            let x = value.as_f64().unwrap_or(lo);
            Value::Float((x + delta * (hi - lo)).clamp(lo, hi))
        }
        _ => value.clone(),
    }
}
