mod common;

use common::{mcq_item, ChatServer, Reply};
use ta_audit::backends::{BackendError, BackendSpec, Client, CompletionRequest, ResponseCache, TrialContext};
use ta_audit::corpus::{Dataset, Modality};
use ta_audit::protocols::{run_audit, Assignment, AuditOptions, ProtocolSpec};

fn request(prompt: &str) -> CompletionRequest {
    CompletionRequest {
        prompt: prompt.to_string(),
        sample_index: 0,
        context: TrialContext {
            item_id: "x".into(),
            index: 0,
            template: None,
            gold: None,
            is_mcq: true,
        },
    }
}

fn spec(server: &ChatServer) -> BackendSpec {
    let mut s = BackendSpec::http("fake", server.base_url(), "test-model");
    s.backoff_ms = 1;
    s.rate_limit = 1000.0;
    s
}

#[test]
fn retries_through_rate_limit_responses() {
    let server = ChatServer::start(|n, _| {
        if n < 2 {
            Reply::Status(429)
        } else {
            Reply::Content("Answer: B".into())
        }
    });
    let client = Client::from_spec(spec(&server), None, false).unwrap();
    let r = client.complete(&request("q")).unwrap();
    assert_eq!(r.text, "Answer: B");
    assert_eq!(r.attempt, 3);
    assert_eq!(server.requests(), 3);
    assert_eq!(client.network_calls(), 3);
}

#[test]
fn server_errors_exhaust_retries() {
    let server = ChatServer::start(|_, _| Reply::Status(503));
    let mut s = spec(&server);
    s.max_retries = 2;
    let client = Client::from_spec(s, None, false).unwrap();
    let e = client.complete(&request("q")).unwrap_err();
    assert!(matches!(e, BackendError::RetriesExhausted { attempts: 3, .. }), "{e:?}");
    assert_eq!(server.requests(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let server = ChatServer::start(|_, _| Reply::Status(400));
    let client = Client::from_spec(spec(&server), None, false).unwrap();
    let e = client.complete(&request("q")).unwrap_err();
    assert!(matches!(e, BackendError::Status { status: 400, .. }), "{e:?}");
    assert_eq!(server.requests(), 1);
}

#[test]
fn sends_bearer_key_and_prompt() {
    let server = ChatServer::start(|_, prompt| Reply::Content(format!("echo {prompt}")));
    let mut s = spec(&server);
    s.api_key = Some("sk-test".into());
    let client = Client::from_spec(s, None, false).unwrap();
    assert_eq!(client.complete(&request("hello")).unwrap().text, "echo hello");
    assert_eq!(server.auth_headers(), vec![Some("Bearer sk-test".to_string())]);
}

#[test]
fn cache_hit_skips_the_network() {
    let server = ChatServer::fixed("Answer: A");
    let dir = tempfile::tempdir().unwrap();
    let client = Client::from_spec(spec(&server), Some(ResponseCache::new(dir.path())), false).unwrap();
    let first = client.complete(&request("q")).unwrap();
    let second = client.complete(&request("q")).unwrap();
    assert!(!first.cached && second.cached);
    assert_eq!(first.text, second.text);
    assert_eq!(server.requests(), 1);
    // same prompt, different sample index is a different request
    let mut other = request("q");
    other.sample_index = 1;
    client.complete(&other).unwrap();
    assert_eq!(server.requests(), 2);
}

#[test]
fn rate_limit_holds_under_concurrency() {
    let server = ChatServer::fixed("Answer: A");
    let mut s = spec(&server);
    s.rate_limit = 20.0;
    let client = Client::from_spec(s, None, false).unwrap();
    let items: Vec<_> = (0..21)
        .map(|i| mcq_item(&format!("r{i}"), 4, 0, Modality::Video))
        .collect();
    let ds = Dataset::new("rate", items).unwrap();
    let opts = AuditOptions {
        workers: 8,
        ..AuditOptions::default()
    };
    run_audit(&ds, &[(&client, Assignment::uniform(ProtocolSpec::single()))], &opts).unwrap();
    let arrivals = server.arrivals();
    assert_eq!(arrivals.len(), 21);
    let first = *arrivals.iter().min().unwrap();
    let last = *arrivals.iter().max().unwrap();
    let observed = 20.0 / (last - first).as_secs_f64();
    assert!((observed - 20.0).abs() <= 2.0, "observed {observed:.2} req/s");
}
