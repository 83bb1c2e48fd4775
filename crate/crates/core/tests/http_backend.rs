//! The HTTP backend against a scripted local server.

mod common;

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;

use alliance_core::promptkit::EvalSetting;
use alliance_core::rater::{HttpBackend, ProviderConfig, RateError, Rater};
use serde_json::{json, Value};

struct Seen {
    auth: Option<String>,
    body: Value,
}

/// Serves one canned `(status, body)` per connection, in order, and reports
/// what each request carried.
fn serve(replies: Vec<(u16, String)>) -> (String, mpsc::Receiver<Seen>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!(
        "http://{}/v1/chat/completions",
        listener.local_addr().unwrap()
    );
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for (status, reply) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let (mut auth, mut length) = (None, 0usize);
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                if let Some((name, value)) = line.split_once(':') {
                    match name.to_ascii_lowercase().as_str() {
                        "authorization" => auth = Some(value.trim().to_string()),
                        "content-length" => length = value.trim().parse().unwrap(),
                        _ => {}
                    }
                }
            }
            let mut body = vec![0; length];
            reader.read_exact(&mut body).unwrap();
            tx.send(Seen {
                auth,
                body: serde_json::from_slice(&body).unwrap(),
            })
            .unwrap();
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            )
            .unwrap();
        }
    });
    (url, rx)
}

fn completion(text: &str) -> String {
    json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
}

fn backend(url: &str, key_var: &str) -> HttpBackend {
    // Each test uses its own variable, so parallel tests do not race on it.
    std::env::set_var(key_var, "sk-test");
    let config = ProviderConfig::from_json_str(
        &json!({"base_url": url, "auth_env_var": key_var, "model": "test-model", "temperature": 0.0}).to_string(),
    )
    .unwrap();
    HttpBackend::from_config(config).unwrap()
}

fn one_job() -> alliance_core::promptkit::RatingJob {
    let set = common::first_sessions("e2e/sessions.jsonl", 1);
    common::jobs(&set, EvalSetting::DETAILED_COT, 1).remove(0)
}

#[test]
fn request_carries_prompt_and_credentials() {
    let (url, seen) = serve(vec![(
        200,
        completion("Evidence: they agreed on a plan.\nScore: 4"),
    )]);
    let backend = backend(&url, "ALLIANCE_HTTP_TEST_KEY_A");
    let job = one_job();
    let record = Rater::new(&backend).rate(&job).unwrap();
    assert_eq!(record.raw_score, 4);
    assert_eq!(record.evidence.as_deref(), Some("they agreed on a plan."));
    assert_eq!(record.rater_id, "test-model");

    let req = seen.recv().unwrap();
    assert_eq!(req.auth.as_deref(), Some("Bearer sk-test"));
    assert_eq!(req.body["model"], "test-model");
    assert_eq!(req.body["temperature"], 0.0);
    assert_eq!(req.body["messages"][0]["content"], job.prompt.text.as_str());
}

#[test]
fn server_errors_and_unparseable_replies_are_retried() {
    let (url, seen) = serve(vec![
        (503, "{}".into()),
        (200, "not json".into()),
        (200, completion("I would rather not say.")),
        (200, completion("Evidence: warm exchange.\nScore: 5")),
    ]);
    let backend = backend(&url, "ALLIANCE_HTTP_TEST_KEY_B");
    let record = Rater::new(&backend)
        .with_max_retries(3)
        .rate(&one_job())
        .unwrap();
    assert_eq!(record.raw_score, 5);
    assert_eq!(record.attempts, 4);
    assert_eq!(seen.try_iter().count(), 4);
}

#[test]
fn rejected_credentials_are_not_retried() {
    let (url, seen) = serve(vec![(401, "{}".into()), (200, completion("Score: 3"))]);
    let backend = backend(&url, "ALLIANCE_HTTP_TEST_KEY_C");
    let err = Rater::new(&backend).rate(&one_job()).unwrap_err();
    assert!(matches!(err, RateError::Fatal { .. }), "{err}");
    assert_eq!(seen.try_iter().count(), 1);
}
