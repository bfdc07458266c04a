//! Completion backends: a wire-protocol HTTP client, a deterministic mock,
//! and a content-addressed response cache that wraps either.

mod cache;
mod http;
mod mock;
pub mod prompt;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::space::{Configuration, Sampling};

pub use cache::{CachedBackend, FileCache};
pub use http::{ApiFamily, HttpBackend, HttpSettings, API_KEY_ENV};
pub use mock::{InputTokens, LengthModel, MockBackend, MockProfile, ModelProfile, SuccessSurface};
pub use prompt::{render_prompt, TemplateError};

/// Token usage of one request, as reported by the service.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub total_tokens: u64,
}

impl Usage {
    pub fn new(input_tokens: u64, output_tokens: u64) -> Self {
        Self {
            input_tokens,
            output_tokens,
            total_tokens: input_tokens + output_tokens,
        }
    }
}

impl std::ops::AddAssign for Usage {
    fn add_assign(&mut self, rhs: Self) {
        self.input_tokens += rhs.input_tokens;
        self.output_tokens += rhs.output_tokens;
        self.total_tokens += rhs.total_tokens;
    }
}

/// One call to a completion service.
///
/// `n` is the number of responses requested by *this* call. `example_id`,
/// `template` and `window_start` are not sent over the wire: they identify
/// the response window `[window_start, window_start + n)` of an example for
/// the mock's seed derivation and for cache keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub rendered_prompt: String,
    pub max_tokens: u32,
    #[serde(flatten)]
    pub sampling: Sampling,
    pub n: u32,
    pub stop: Option<Vec<String>>,
    pub presence_penalty: f64,
    pub frequency_penalty: f64,
    pub best_of: u32,
    pub logprobs: bool,
    pub example_id: String,
    pub template: String,
    pub window_start: u32,
}

impl CompletionRequest {
    /// Request for responses `[window_start, window_start + count)` of one
    /// example. When the configuration searches `best_of`, `count` is the
    /// number of candidates and a single response comes back.
    pub fn for_window(
        config: &Configuration,
        rendered_prompt: String,
        example_id: &str,
        window_start: u32,
        count: u32,
        logprobs: bool,
    ) -> Self {
        let (n, best_of) = if config.best_of > 1 {
            (1, count)
        } else {
            (count, 1)
        };
        Self {
            model: config.model.clone(),
            rendered_prompt,
            max_tokens: config.max_tokens,
            sampling: config.sampling,
            n,
            stop: config.stop.clone(),
            presence_penalty: config.presence_penalty,
            frequency_penalty: config.frequency_penalty,
            best_of,
            logprobs,
            example_id: example_id.to_string(),
            template: config.prompt.clone(),
            window_start,
        }
    }

    /// Responses a successful call returns.
    pub fn expected_texts(&self) -> usize {
        if self.best_of > 1 {
            1
        } else {
            self.n as usize
        }
    }
}

/// Responses of one call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseSet {
    pub texts: Vec<String>,
    /// Mean per-token log probability of each text, when requested.
    pub mean_logprobs: Option<Vec<f64>>,
    pub usage: Usage,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("service returned status {status}: {message}")]
    Service { status: u16, message: String },
    #[error("malformed response: {0}")]
    Malformed(String),
}

impl BackendError {
    /// Transport failures and rate limiting are worth retrying.
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) => true,
            BackendError::Service { status, .. } => *status == 429,
            BackendError::Malformed(_) => false,
        }
    }
}

/// A completion service.
pub trait Backend: Send + Sync {
    /// Stable name used in cache keys.
    fn identity(&self) -> String;

    fn complete(&self, request: &CompletionRequest) -> Result<ResponseSet, BackendError>;
}

impl<B: Backend + ?Sized> Backend for &B {
    fn identity(&self) -> String {
        (**self).identity()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<ResponseSet, BackendError> {
        (**self).complete(request)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn identity(&self) -> String {
        (**self).identity()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<ResponseSet, BackendError> {
        (**self).complete(request)
    }
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn identity(&self) -> String {
        (**self).identity()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<ResponseSet, BackendError> {
        (**self).complete(request)
    }
}
