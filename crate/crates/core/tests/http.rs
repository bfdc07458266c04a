mod common;

use common::fixtures::{self, Fixture};
use common::StubServer;
use ecotune::backend::{ApiFamily, Backend, BackendError};
use ecotune::pruning::RetryPolicy;

#[test]
fn wire_fixtures_round_trip() {
    let all: Vec<Fixture> = fixtures::all();
    assert_eq!(all.len(), 10);
    for f in &all {
        if let Err(e) = fixtures::check(f) {
            panic!("{}: {e}", f.name);
        }
    }
}

#[test]
fn rate_limit_is_retried() {
    let all = fixtures::all();
    let ok = &all[0];
    let server = StubServer::start(vec![
        (429, r#"{"error":{"message":"slow down"}}"#.into()),
        (ok.reply.0, ok.reply.1.into()),
    ]);
    let http = fixtures::backend(&server.base_url, ApiFamily::Completion, &ok.request.model);
    let retry = RetryPolicy {
        max_retries: 3,
        initial_backoff_secs: 0.0,
    };
    let set = retry.call(&http, &ok.request).unwrap();
    assert_eq!(set.texts, [" 4", " four"]);
    let seen = server.seen();
    assert_eq!(seen.len(), 2);
    assert_eq!(seen[0].body, seen[1].body);
}

#[test]
fn server_errors_are_not_retried() {
    let all = fixtures::all();
    let server = StubServer::start(vec![(500, "{}".into()), (200, all[0].reply.1.into())]);
    let http = fixtures::backend(
        &server.base_url,
        ApiFamily::Completion,
        &all[0].request.model,
    );
    let retry = RetryPolicy {
        max_retries: 3,
        initial_backoff_secs: 0.0,
    };
    let err = retry.call(&http, &all[0].request).unwrap_err();
    assert!(matches!(err, BackendError::Service { status: 500, .. }));
    assert_eq!(server.seen().len(), 1);
}

#[test]
fn refused_connection_is_a_retryable_transport_error() {
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let http = fixtures::backend(
        &format!("http://127.0.0.1:{port}/v1"),
        ApiFamily::Completion,
        "m",
    );
    let err = http.complete(&fixtures::all()[0].request).unwrap_err();
    assert!(matches!(err, BackendError::Transport(_)), "{err:?}");
    assert!(err.is_retryable());
    assert!(http.identity().starts_with("http:"));
}
