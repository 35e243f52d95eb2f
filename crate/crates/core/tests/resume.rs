mod common;

use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use common::{args, mcq_item, write_dataset, write_http_backend, ChatServer, Reply};
use ta_audit::cli::{run, EXIT_COVERAGE, EXIT_OK};
use ta_audit::corpus::Modality;

/// Same prompt, same letter.
fn letter_for(prompt: &str) -> String {
    let sum: u32 = prompt.bytes().map(u32::from).sum();
    format!("Reasoning omitted.\nAnswer: {}", (b'A' + (sum % 4) as u8) as char)
}

fn setup(dir: &Path, n: usize) -> std::path::PathBuf {
    let items: Vec<_> = (0..n)
        .map(|i| mcq_item(&format!("v{i}"), 4, i % 4, Modality::Video))
        .collect();
    let data = dir.join("data.jsonl");
    write_dataset(&data, &items);
    data
}

fn eval_args(data: &Path, backend: &Path, out: &Path, base_url: &str, extra: &[&str]) -> Vec<String> {
    let mut a = args(&[
        "eval",
        "--dataset",
        data.to_str().unwrap(),
        "--backend",
        backend.to_str().unwrap(),
        "--protocol",
        "circular:3",
        "--all-trials",
        "--base-url",
        base_url,
        "--out",
        out.to_str().unwrap(),
    ]);
    a.extend(extra.iter().map(|s| s.to_string()));
    a
}

#[test]
fn rerun_over_complete_cache_is_free_and_identical() {
    let server = ChatServer::start(|_, p| Reply::Content(letter_for(p)));
    let dir = tempfile::tempdir().unwrap();
    let data = setup(dir.path(), 25);
    let backend = write_http_backend(dir.path(), "remote", &server.base_url(), "");
    let run_dir = dir.path().join("run");
    let a = eval_args(&data, &backend, &run_dir, &server.base_url(), &[]);

    assert_eq!(run(a.clone()), EXIT_OK);
    assert_eq!(server.requests(), 75);
    let store = run_dir.join("decisions/remote.jsonl");
    let first = std::fs::read(&store).unwrap();

    assert_eq!(run(a.clone()), EXIT_OK);
    assert_eq!(server.requests(), 75, "rerun must not hit the network");
    assert_eq!(std::fs::read(&store).unwrap(), first);
}

#[test]
fn interrupted_run_resumes_only_missing_requests() {
    // first server dies after 30 successful requests
    let healthy = Arc::new(AtomicBool::new(true));
    let flag = healthy.clone();
    let flaky = ChatServer::start(move |n, p| {
        if n >= 30 {
            flag.store(false, Ordering::SeqCst);
            Reply::Status(500)
        } else {
            Reply::Content(letter_for(p))
        }
    });
    let dir = tempfile::tempdir().unwrap();
    let data = setup(dir.path(), 20);
    let backend = write_http_backend(dir.path(), "remote", &flaky.base_url(), "max_retries = 0\n");
    let run_dir = dir.path().join("run");

    let code = run(eval_args(
        &data,
        &backend,
        &run_dir,
        &flaky.base_url(),
        &["--workers", "1"],
    ));
    assert_eq!(code, EXIT_COVERAGE);
    assert!(!healthy.load(Ordering::SeqCst));

    let good = ChatServer::start(|_, p| Reply::Content(letter_for(p)));
    assert_eq!(
        run(eval_args(&data, &backend, &run_dir, &good.base_url(), &[])),
        EXIT_OK
    );
    assert_eq!(good.requests(), 60 - 30);

    // identical to a clean run
    let fresh_server = ChatServer::start(|_, p| Reply::Content(letter_for(p)));
    let fresh = dir.path().join("fresh");
    assert_eq!(
        run(eval_args(&data, &backend, &fresh, &fresh_server.base_url(), &[])),
        EXIT_OK
    );
    assert_eq!(
        std::fs::read(run_dir.join("decisions/remote.jsonl")).unwrap(),
        std::fs::read(fresh.join("decisions/remote.jsonl")).unwrap()
    );
}

#[test]
fn no_raw_store_omits_response_text() {
    let server = ChatServer::start(|_, p| Reply::Content(letter_for(p)));
    let dir = tempfile::tempdir().unwrap();
    let data = setup(dir.path(), 3);
    let backend = write_http_backend(dir.path(), "remote", &server.base_url(), "");
    let run_dir = dir.path().join("run");
    assert_eq!(
        run(eval_args(&data, &backend, &run_dir, &server.base_url(), &["--no-raw"])),
        EXIT_OK
    );
    let body = std::fs::read_to_string(run_dir.join("decisions/remote.jsonl")).unwrap();
    assert!(!body.contains("Reasoning omitted"));
    assert!(body.contains("\"letter\""));
}
