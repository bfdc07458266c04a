//! Deterministic mock completion service.
//!
//! Response `j` of an example is generated from its own random stream,
//! seeded by everything in the request except `n`, `best_of`, `max_tokens`
//! and the window offset. Splitting a request into windows therefore
//! reproduces the same responses, and usage is non-decreasing in both the
//! response count and `max_tokens` for a fixed model, prompt and stop list.
//!
//! Each response is a run of filler words ending in an `ANSWER:<value>`
//! token. The natural length comes from the model's [`LengthModel`];
//! generation stops early at `max_tokens` or at the first stop string, in
//! which case the answer may be cut off.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, BackendError, CompletionRequest, ResponseSet, Usage};
use crate::space::Sampling;

const FILLER: [&str; 12] = [
    "so", "the", "value", "follows", "from", "step", "one", "then", "we", "check", "each", "case",
];
const WRONG_ANSWERS: u32 = 3;

/// How many input tokens a request is charged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputTokens {
    /// Whitespace-separated words of the rendered prompt, plus a constant.
    Whitespace {
        overhead: u64,
    },
    Fixed(u64),
}

/// Natural (unconstrained) length of one response, in tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthModel {
    Fixed(u64),
    /// Uniform on `[1, 2·mean - 1]`, so the average is `mean`.
    Random {
        mean: f64,
    },
}

/// Probability that a complete response carries the right answer.
///
/// `p = weight(prompt) · base · (1 - randomness_penalty·|r - best_randomness|)`
/// where `r` is the temperature or top_p.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuccessSurface {
    pub base: f64,
    pub best_randomness: f64,
    pub randomness_penalty: f64,
}

impl Default for SuccessSurface {
    fn default() -> Self {
        Self {
            base: 0.5,
            best_randomness: 0.5,
            randomness_penalty: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelProfile {
    pub input_tokens: InputTokens,
    pub length: LengthModel,
    pub success: SuccessSurface,
    /// Multipliers on the success probability, keyed by prompt template.
    pub prompt_weights: BTreeMap<String, f64>,
}

impl Default for ModelProfile {
    fn default() -> Self {
        Self {
            input_tokens: InputTokens::Whitespace { overhead: 0 },
            length: LengthModel::Random { mean: 200.0 },
            success: SuccessSurface::default(),
            prompt_weights: BTreeMap::new(),
        }
    }
}

impl ModelProfile {
    /// A profile whose every request costs `input` tokens plus exactly
    /// `per_response` output tokens for each response.
    pub fn constant_cost(input: u64, per_response: u64) -> Self {
        Self {
            input_tokens: InputTokens::Fixed(input),
            length: LengthModel::Fixed(per_response),
            ..Self::default()
        }
    }

    fn success_probability(&self, template: &str, sampling: Sampling) -> f64 {
        let weight = self.prompt_weights.get(template).copied().unwrap_or(1.0);
        let s = &self.success;
        let shape = 1.0 - s.randomness_penalty * (sampling.value() - s.best_randomness).abs();
        (weight * s.base * shape).clamp(0.0, 1.0)
    }
}

/// Models, answer key and seed of a mock service.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct MockProfile {
    pub seed: u64,
    pub models: BTreeMap<String, ModelProfile>,
    /// Profile of any model not listed in `models`.
    pub fallback: ModelProfile,
    /// Correct answer per example id; examples without one expect
    /// `"correct"`.
    pub answers: BTreeMap<String, String>,
}

impl MockProfile {
    pub fn uniform(model: ModelProfile) -> Self {
        Self {
            fallback: model,
            ..Self::default()
        }
    }

    pub fn model(&self, name: &str) -> &ModelProfile {
        self.models.get(name).unwrap_or(&self.fallback)
    }
}

/// One generated response before windowing.
#[derive(Debug, Clone, PartialEq)]
struct Generation {
    text: String,
    tokens: u64,
    mean_logprob: f64,
}

#[derive(Debug, Clone)]
pub struct MockBackend {
    profile: MockProfile,
}

impl MockBackend {
    pub fn new(profile: MockProfile) -> Self {
        Self { profile }
    }

    pub fn profile(&self) -> &MockProfile {
        &self.profile
    }

    fn stream_seed(&self, request: &CompletionRequest) -> u64 {
        let material = serde_json::json!([
            self.profile.seed,
            request.model,
            request.example_id,
            request.template,
            request.rendered_prompt,
            request.sampling,
            request.stop,
            request.presence_penalty,
            request.frequency_penalty,
        ]);
        let digest = Sha256::digest(material.to_string().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }

    fn generate(&self, request: &CompletionRequest, seed: u64, index: u32) -> Generation {
        let model = self.profile.model(&request.model);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index.into());

        let u_len: f64 = rng.random();
        let u_success: f64 = rng.random();
        let u_logprob: f64 = rng.random();
        let wrong = rng.random_range(0..WRONG_ANSWERS);

        let natural = match model.length {
            LengthModel::Fixed(len) => len,
            LengthModel::Random { mean } => {
                let span = (2.0 * mean - 1.0).max(1.0);
                1 + (u_len * span).floor() as u64
            }
        };
        let success = u_success < model.success_probability(&request.template, request.sampling);
        let answer = if success {
            self.profile
                .answers
                .get(&request.example_id)
                .map_or("correct", String::as_str)
                .to_string()
        } else {
            format!("wrong{wrong}")
        };

        let budget = natural.min(request.max_tokens.into());
        let stops: Vec<&str> = request
            .stop
            .iter()
            .flatten()
            .map(String::as_str)
            .filter(|s| !s.is_empty())
            .collect();
        let longest_stop = stops.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut text = String::new();
        let mut tokens = 0;
        while tokens < budget {
            let before = text.len();
            if tokens > 0 {
                text.push(' ');
            }
            if tokens + 1 == natural {
                text.push_str("ANSWER:");
                text.push_str(&answer);
            } else {
                text.push_str(FILLER[rng.random_range(0..FILLER.len())]);
            }
            tokens += 1;
            if stops.is_empty() {
                continue;
            }
            // A new match must end inside the token just appended.
            let mut from = before.saturating_sub(longest_stop);
            while !text.is_char_boundary(from) {
                from -= 1;
            }
            if let Some(cut) = stops
                .iter()
                .filter_map(|s| text[from..].find(s).map(|at| from + at))
                .min()
            {
                text.truncate(cut);
                break;
            }
        }

        let mean_logprob = -(0.2 + 1.5 * u_logprob) + if success { 0.3 } else { 0.0 };
        Generation {
            text,
            tokens,
            mean_logprob,
        }
    }
}

impl Backend for MockBackend {
    fn identity(&self) -> String {
        let profile = serde_json::to_string(&self.profile).expect("profile serializes");
        format!(
            "mock:{}",
            hex::encode(&Sha256::digest(profile.as_bytes())[..8])
        )
    }

    fn complete(&self, request: &CompletionRequest) -> Result<ResponseSet, BackendError> {
        let seed = self.stream_seed(request);
        let model = self.profile.model(&request.model);
        let input = match model.input_tokens {
            InputTokens::Fixed(t) => t,
            InputTokens::Whitespace { overhead } => {
                request.rendered_prompt.split_whitespace().count() as u64 + overhead
            }
        };

        let count = if request.best_of > 1 {
            request.best_of
        } else {
            request.n
        };
        let generations: Vec<Generation> = (request.window_start..request.window_start + count)
            .map(|j| self.generate(request, seed, j))
            .collect();
        let output: u64 = generations.iter().map(|g| g.tokens).sum();

        let kept: Vec<&Generation> = if request.best_of > 1 {
            // Server-side filtering: keep the highest mean logprob, first on ties.
            let top = generations
                .iter()
                .fold(None::<&Generation>, |best, g| match best {
                    Some(b) if b.mean_logprob >= g.mean_logprob => Some(b),
                    _ => Some(g),
                })
                .into_iter()
                .collect();
            top
        } else {
            generations.iter().collect()
        };

        Ok(ResponseSet {
            texts: kept.iter().map(|g| g.text.clone()).collect(),
            mean_logprobs: (request.logprobs || request.best_of > 1)
                .then(|| kept.iter().map(|g| g.mean_logprob).collect()),
            usage: Usage::new(input, output),
        })
    }
}
