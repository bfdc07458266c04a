//! Client for OpenAI-style completion and chat-completion endpoints.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use super::{Backend, BackendError, CompletionRequest, ResponseSet, Usage};
use crate::space::Sampling;

/// Environment variable holding the bearer token.
pub const API_KEY_ENV: &str = "ECOTUNE_API_KEY";

/// Wire format family of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApiFamily {
    /// `POST {base}/completions` with a `prompt` body.
    #[default]
    Completion,
    /// `POST {base}/chat/completions`; the prompt becomes one user message.
    Chat,
}

impl ApiFamily {
    pub fn path(self) -> &'static str {
        match self {
            ApiFamily::Completion => "/completions",
            ApiFamily::Chat => "/chat/completions",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpSettings {
    pub base_url: String,
    /// Family per model id; unlisted models use `default_family`.
    #[serde(default)]
    pub models: BTreeMap<String, ApiFamily>,
    #[serde(default)]
    pub default_family: ApiFamily,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_timeout_secs() -> u64 {
    120
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    prompt: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    messages: Option<[WireMessage<'a>; 1]>,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    top_p: Option<f64>,
    n: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    stop: Option<&'a [String]>,
    presence_penalty: f64,
    frequency_penalty: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    best_of: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    logprobs: Option<Json>,
}

#[derive(Deserialize)]
struct WireUsage {
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
    total_tokens: u64,
}

#[derive(Deserialize)]
struct WireChoice {
    #[serde(default)]
    index: usize,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    message: Option<WireChatMessage>,
    #[serde(default)]
    logprobs: Option<Json>,
}

#[derive(Deserialize)]
struct WireChatMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    usage: Option<WireUsage>,
}

/// Serializes the request body exactly as sent.
pub fn request_body(family: ApiFamily, request: &CompletionRequest) -> String {
    let (temperature, top_p) = match request.sampling {
        Sampling::Temperature(t) => (Some(t), None),
        Sampling::TopP(p) => (None, Some(p)),
    };
    let (prompt, messages) = match family {
        ApiFamily::Completion => (Some(request.rendered_prompt.as_str()), None),
        ApiFamily::Chat => (
            None,
            Some([WireMessage {
                role: "user",
                content: &request.rendered_prompt,
            }]),
        ),
    };
    let logprobs = request.logprobs.then(|| match family {
        ApiFamily::Completion => Json::from(1),
        ApiFamily::Chat => Json::from(true),
    });
    let wire = WireRequest {
        model: &request.model,
        prompt,
        messages,
        max_tokens: request.max_tokens,
        temperature,
        top_p,
        n: request.n,
        stop: request.stop.as_deref(),
        presence_penalty: request.presence_penalty,
        frequency_penalty: request.frequency_penalty,
        best_of: (request.best_of > 1).then_some(request.best_of),
        logprobs,
    };
    serde_json::to_string(&wire).expect("request serializes")
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Mean token logprob of one choice, for either family's layout.
fn choice_logprob(logprobs: &Json) -> Option<f64> {
    if let Some(tokens) = logprobs.get("token_logprobs").and_then(Json::as_array) {
        let values: Vec<f64> = tokens.iter().filter_map(Json::as_f64).collect();
        return mean(&values);
    }
    let content = logprobs.get("content")?.as_array()?;
    let values: Vec<f64> = content
        .iter()
        .filter_map(|t| t.get("logprob").and_then(Json::as_f64))
        .collect();
    mean(&values)
}

/// Decodes a service reply. Usage is taken as reported.
pub fn parse_response(
    family: ApiFamily,
    status: u16,
    body: &str,
    wants_logprobs: bool,
) -> Result<ResponseSet, BackendError> {
    if !(200..300).contains(&status) {
        let message = serde_json::from_str::<Json>(body)
            .ok()
            .and_then(|j| {
                j.pointer("/error/message")
                    .and_then(Json::as_str)
                    .map(str::to_string)
            })
            .unwrap_or_else(|| body.trim().to_string());
        return Err(BackendError::Service { status, message });
    }
    let mut reply: WireResponse =
        serde_json::from_str(body).map_err(|e| BackendError::Malformed(e.to_string()))?;
    let usage = reply
        .usage
        .ok_or_else(|| BackendError::Malformed("response carries no usage report".into()))?;
    reply.choices.sort_by_key(|c| c.index);

    let mut texts = Vec::with_capacity(reply.choices.len());
    let mut logprobs = Vec::with_capacity(reply.choices.len());
    for choice in &reply.choices {
        let text = match family {
            ApiFamily::Completion => choice.text.clone(),
            ApiFamily::Chat => choice.message.as_ref().and_then(|m| m.content.clone()),
        }
        .ok_or_else(|| BackendError::Malformed(format!("choice {} has no text", choice.index)))?;
        texts.push(text);
        logprobs.push(choice.logprobs.as_ref().and_then(choice_logprob));
    }
    let mean_logprobs = if wants_logprobs {
        Some(
            logprobs
                .into_iter()
                .collect::<Option<Vec<f64>>>()
                .ok_or_else(|| BackendError::Malformed("missing logprobs".into()))?,
        )
    } else {
        None
    };
    Ok(ResponseSet {
        texts,
        mean_logprobs,
        usage: Usage {
            input_tokens: usage.prompt_tokens,
            output_tokens: usage.completion_tokens,
            total_tokens: usage.total_tokens,
        },
    })
}

pub struct HttpBackend {
    settings: HttpSettings,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpBackend {
    /// Reads the bearer token from [`API_KEY_ENV`].
    pub fn from_env(settings: HttpSettings) -> Self {
        let key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Self::new(settings, key)
    }

    pub fn new(settings: HttpSettings, api_key: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(settings.timeout_secs)))
            .build()
            .into();
        Self {
            settings,
            api_key,
            agent,
        }
    }

    pub fn family(&self, model: &str) -> ApiFamily {
        self.settings
            .models
            .get(model)
            .copied()
            .unwrap_or(self.settings.default_family)
    }
}

impl Backend for HttpBackend {
    fn identity(&self) -> String {
        format!("http:{}", self.settings.base_url.trim_end_matches('/'))
    }

    fn complete(&self, request: &CompletionRequest) -> Result<ResponseSet, BackendError> {
        let family = self.family(&request.model);
        let url = format!(
            "{}{}",
            self.settings.base_url.trim_end_matches('/'),
            family.path()
        );
        let body = request_body(family, request);
        log::debug!("POST {url} n={}", request.n);

        let mut call = self
            .agent
            .post(&url)
            .header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", format!("Bearer {key}"));
        }
        let mut response = call
            .send(body.as_bytes())
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        parse_response(family, status, &text, request.logprobs)
    }
}
