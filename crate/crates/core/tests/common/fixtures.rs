//! Request/response pairs for the HTTP client.

use std::collections::BTreeMap;

use ecotune::backend::{
    ApiFamily, Backend, BackendError, CompletionRequest, HttpBackend, HttpSettings, ResponseSet,
    Usage,
};
use ecotune::space::Sampling;

use super::StubServer;

pub enum Expect {
    Ok(ResponseSet),
    Err {
        status: Option<u16>,
        retryable: bool,
    },
}

pub struct Fixture {
    pub name: &'static str,
    pub family: ApiFamily,
    pub request: CompletionRequest,
    pub body: &'static str,
    pub reply: (u16, &'static str),
    pub expect: Expect,
}

fn request(
    model: &str,
    prompt: &str,
    max_tokens: u32,
    sampling: Sampling,
    n: u32,
) -> CompletionRequest {
    CompletionRequest {
        model: model.into(),
        rendered_prompt: prompt.into(),
        max_tokens,
        sampling,
        n,
        stop: None,
        presence_penalty: 0.0,
        frequency_penalty: 0.0,
        best_of: 1,
        logprobs: false,
        example_id: "e".into(),
        template: "{q}".into(),
        window_start: 0,
    }
}

fn texts(t: &[&str], logprobs: Option<Vec<f64>>, usage: (u64, u64, u64)) -> Expect {
    Expect::Ok(ResponseSet {
        texts: t.iter().map(|s| s.to_string()).collect(),
        mean_logprobs: logprobs,
        usage: Usage {
            input_tokens: usage.0,
            output_tokens: usage.1,
            total_tokens: usage.2,
        },
    })
}

pub fn all() -> Vec<Fixture> {
    let plain = request(
        "text-davinci-003",
        "Q: 2+2?",
        32,
        Sampling::Temperature(0.7),
        2,
    );

    let mut chat = request("gpt-4", "Hi", 100, Sampling::TopP(0.9), 1);
    chat.stop = Some(vec!["\n\n".into()]);
    chat.presence_penalty = 0.5;

    let mut with_logprobs = request("text-davinci-003", "x", 5, Sampling::Temperature(1.0), 2);
    with_logprobs.logprobs = true;

    let mut chat_logprobs = request("gpt-3.5-turbo", "y", 8, Sampling::Temperature(0.0), 1);
    chat_logprobs.logprobs = true;
    chat_logprobs.frequency_penalty = -0.5;

    let mut best_of = request("text-davinci-003", "z", 16, Sampling::Temperature(0.3), 1);
    best_of.best_of = 3;

    vec![
        Fixture {
            name: "completion with two responses",
            family: ApiFamily::Completion,
            request: plain.clone(),
            body: r#"{"model":"text-davinci-003","prompt":"Q: 2+2?","max_tokens":32,"temperature":0.7,"n":2,"presence_penalty":0.0,"frequency_penalty":0.0}"#,
            reply: (
                200,
                r#"{"choices":[{"index":0,"text":" 4"},{"index":1,"text":" four"}],"usage":{"prompt_tokens":6,"completion_tokens":3,"total_tokens":9}}"#,
            ),
            expect: texts(&[" 4", " four"], None, (6, 3, 9)),
        },
        Fixture {
            name: "chat with stop and top_p",
            family: ApiFamily::Chat,
            request: chat,
            body: r#"{"model":"gpt-4","messages":[{"role":"user","content":"Hi"}],"max_tokens":100,"top_p":0.9,"n":1,"stop":["\n\n"],"presence_penalty":0.5,"frequency_penalty":0.0}"#,
            reply: (
                200,
                r#"{"choices":[{"index":0,"message":{"role":"assistant","content":"Hello!"},"finish_reason":"stop"}],"usage":{"prompt_tokens":8,"completion_tokens":2,"total_tokens":10}}"#,
            ),
            expect: texts(&["Hello!"], None, (8, 2, 10)),
        },
        Fixture {
            name: "completion token logprobs",
            family: ApiFamily::Completion,
            request: with_logprobs,
            body: r#"{"model":"text-davinci-003","prompt":"x","max_tokens":5,"temperature":1.0,"n":2,"presence_penalty":0.0,"frequency_penalty":0.0,"logprobs":1}"#,
            reply: (
                200,
                r#"{"choices":[{"index":0,"text":"ab","logprobs":{"tokens":["a","b"],"token_logprobs":[-0.5,-1.5]}},{"index":1,"text":"c","logprobs":{"tokens":["c"],"token_logprobs":[-0.25]}}],"usage":{"prompt_tokens":1,"completion_tokens":3,"total_tokens":4}}"#,
            ),
            expect: texts(&["ab", "c"], Some(vec![-1.0, -0.25]), (1, 3, 4)),
        },
        Fixture {
            name: "chat content logprobs",
            family: ApiFamily::Chat,
            request: chat_logprobs,
            body: r#"{"model":"gpt-3.5-turbo","messages":[{"role":"user","content":"y"}],"max_tokens":8,"temperature":0.0,"n":1,"presence_penalty":0.0,"frequency_penalty":-0.5,"logprobs":true}"#,
            reply: (
                200,
                r#"{"choices":[{"index":0,"message":{"role":"assistant","content":"xy"},"logprobs":{"content":[{"token":"x","logprob":-2.0},{"token":"y","logprob":0.0}]}}],"usage":{"prompt_tokens":9,"completion_tokens":2,"total_tokens":11}}"#,
            ),
            expect: texts(&["xy"], Some(vec![-1.0]), (9, 2, 11)),
        },
        Fixture {
            name: "server-side best_of",
            family: ApiFamily::Completion,
            request: best_of,
            body: r#"{"model":"text-davinci-003","prompt":"z","max_tokens":16,"temperature":0.3,"n":1,"presence_penalty":0.0,"frequency_penalty":0.0,"best_of":3}"#,
            reply: (
                200,
                r#"{"choices":[{"index":0,"text":"best"}],"usage":{"prompt_tokens":1,"completion_tokens":30,"total_tokens":31}}"#,
            ),
            expect: texts(&["best"], None, (1, 30, 31)),
        },
        Fixture {
            name: "rate limited",
            family: ApiFamily::Completion,
            request: plain.clone(),
            body: r#"{"model":"text-davinci-003","prompt":"Q: 2+2?","max_tokens":32,"temperature":0.7,"n":2,"presence_penalty":0.0,"frequency_penalty":0.0}"#,
            reply: (
                429,
                r#"{"error":{"message":"Rate limit reached","type":"requests"}}"#,
            ),
            expect: Expect::Err {
                status: Some(429),
                retryable: true,
            },
        },
        Fixture {
            name: "server error",
            family: ApiFamily::Completion,
            request: plain.clone(),
            body: r#"{"model":"text-davinci-003","prompt":"Q: 2+2?","max_tokens":32,"temperature":0.7,"n":2,"presence_penalty":0.0,"frequency_penalty":0.0}"#,
            reply: (500, r#"{"error":{"message":"internal"}}"#),
            expect: Expect::Err {
                status: Some(500),
                retryable: false,
            },
        },
        Fixture {
            name: "missing usage",
            family: ApiFamily::Completion,
            request: plain.clone(),
            body: r#"{"model":"text-davinci-003","prompt":"Q: 2+2?","max_tokens":32,"temperature":0.7,"n":2,"presence_penalty":0.0,"frequency_penalty":0.0}"#,
            reply: (
                200,
                r#"{"choices":[{"index":0,"text":"a"},{"index":1,"text":"b"}]}"#,
            ),
            expect: Expect::Err {
                status: None,
                retryable: false,
            },
        },
        Fixture {
            name: "choices out of order",
            family: ApiFamily::Completion,
            request: plain.clone(),
            body: r#"{"model":"text-davinci-003","prompt":"Q: 2+2?","max_tokens":32,"temperature":0.7,"n":2,"presence_penalty":0.0,"frequency_penalty":0.0}"#,
            reply: (
                200,
                r#"{"choices":[{"index":1,"text":"second"},{"index":0,"text":"first"}],"usage":{"prompt_tokens":6,"completion_tokens":5,"total_tokens":11}}"#,
            ),
            expect: texts(&["first", "second"], None, (6, 5, 11)),
        },
        Fixture {
            name: "unavailable with plain-text body",
            family: ApiFamily::Completion,
            request: plain,
            body: r#"{"model":"text-davinci-003","prompt":"Q: 2+2?","max_tokens":32,"temperature":0.7,"n":2,"presence_penalty":0.0,"frequency_penalty":0.0}"#,
            reply: (503, "upstream unavailable"),
            expect: Expect::Err {
                status: Some(503),
                retryable: false,
            },
        },
    ]
}

pub fn backend(base_url: &str, family: ApiFamily, model: &str) -> HttpBackend {
    let mut models = BTreeMap::new();
    models.insert(model.to_string(), family);
    HttpBackend::new(
        HttpSettings {
            base_url: base_url.to_string(),
            models,
            default_family: ApiFamily::Completion,
            timeout_secs: 10,
        },
        Some("test-key".into()),
    )
}

/// Runs one fixture against a fresh stub server.
pub fn check(f: &Fixture) -> Result<(), String> {
    let server = StubServer::start(vec![(f.reply.0, f.reply.1.to_string())]);
    let http = backend(&server.base_url, f.family, &f.request.model);
    let outcome = http.complete(&f.request);
    let seen = server.seen();
    let [sent] = seen.as_slice() else {
        return Err(format!("expected one request, server saw {}", seen.len()));
    };
    if sent.body != f.body {
        return Err(format!(
            "body mismatch:\n sent {}\n want {}",
            sent.body, f.body
        ));
    }
    let path = format!("/v1{}", f.family.path());
    if sent.path != path {
        return Err(format!("path {} != {path}", sent.path));
    }
    if sent.authorization.as_deref() != Some("Bearer test-key") {
        return Err(format!("authorization {:?}", sent.authorization));
    }
    match (&f.expect, outcome) {
        (Expect::Ok(want), Ok(got)) if *want == got => Ok(()),
        (Expect::Err { status, retryable }, Err(e)) => {
            let got_status = match &e {
                BackendError::Service { status, .. } => Some(*status),
                _ => None,
            };
            if got_status == *status && e.is_retryable() == *retryable {
                Ok(())
            } else {
                Err(format!("unexpected error classification: {e:?}"))
            }
        }
        (_, got) => Err(format!("unexpected outcome {got:?}")),
    }
}
