use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use cocotree::backends::{self, EndpointConfig, OpenAiBackend};
use cocotree::image::ImageRef;
use cocotree::Error;
use serde_json::{json, Value};

struct Received {
    headers: Vec<String>,
    body: Value,
}

/// Serves the scripted (status, body) replies in order, one per connection.
fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Received>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let log = Arc::new(Mutex::new(Vec::new()));
    let seen = log.clone();
    thread::spawn(move || {
        for (status, reply) in replies {
            let Ok((stream, _)) = listener.accept() else { return };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut headers = Vec::new();
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end().to_owned();
                if line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                headers.push(line);
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            seen.lock().unwrap().push(Received {
                headers,
                body: serde_json::from_slice(&body).unwrap_or(Value::Null),
            });
            let mut stream = stream;
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            );
        }
    });
    (format!("http://{addr}/v1"), log)
}

fn backend(url: &str, retries: u32) -> OpenAiBackend {
    let mut cfg = EndpointConfig::new(url, "test-model");
    cfg.max_retries = retries;
    cfg.timeout_secs = 5.0;
    cfg.api_key = Some("sk-test".into());
    OpenAiBackend::new(cfg).unwrap().with_backoff(Duration::from_millis(1))
}

fn logprob_reply(top: &[(&str, f64)]) -> String {
    let top: Vec<Value> = top.iter().map(|(t, lp)| json!({"token": t, "logprob": lp})).collect();
    json!({
        "choices": [{
            "message": {"role": "assistant", "content": top[0]["token"]},
            "logprobs": {"content": [{"token": top[0]["token"], "logprob": top[0]["logprob"], "top_logprobs": top}]}
        }]
    })
    .to_string()
}

fn url_image() -> ImageRef {
    ImageRef::new("https://img.test/a.png").unwrap()
}

#[test]
fn yes_no_request_shape_and_probability() {
    let (url, log) = serve(vec![(200, logprob_reply(&[("Yes", -0.1), (" no", -2.4), ("maybe", -5.0)]))]);
    let b = backend(&url, 0);
    let p = backends::vlm_relevance(&b, &url_image(), "a dog").unwrap().value;
    let expected = (-0.1f64).exp() / ((-0.1f64).exp() + (-2.4f64).exp());
    assert!((p - expected).abs() < 1e-12);

    let log = log.lock().unwrap();
    let req = &log[0];
    assert!(req.headers[0].starts_with("POST /v1/chat/completions"));
    assert!(req.headers.iter().any(|h| h.eq_ignore_ascii_case("authorization: Bearer sk-test")));
    assert_eq!(req.body["model"], "test-model");
    assert_eq!(req.body["max_tokens"], 1);
    assert_eq!(req.body["top_logprobs"], 20);
    assert_eq!(req.body["temperature"], 0);
    assert_eq!(req.body["logprobs"], true);
    let parts = req.body["messages"][0]["content"].as_array().unwrap();
    assert_eq!(parts[0]["type"], "image_url");
    assert_eq!(parts[0]["image_url"]["url"], "https://img.test/a.png");
    assert_eq!(parts[1]["text"], "Does this figure show: a dog? Please answer Yes or No.");
}

#[test]
fn file_images_are_sent_inline() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.jpg");
    std::fs::write(&path, [1u8, 2, 3]).unwrap();
    let image = ImageRef::new(path.to_str().unwrap()).unwrap();
    let (url, log) = serve(vec![(200, logprob_reply(&[("no", -0.01)]))]);
    let p = backends::vlm_relevance(&backend(&url, 0), &image, "cat").unwrap().value;
    assert!(p < 0.5);
    let log = log.lock().unwrap();
    let parts = log[0].body["messages"][0]["content"].as_array().unwrap().clone();
    assert_eq!(parts[0]["image_url"]["url"], "data:image/jpeg;base64,AQID");
}

#[test]
fn server_errors_are_retried() {
    let (url, log) = serve(vec![
        (503, "{}".into()),
        (429, "{}".into()),
        (200, logprob_reply(&[("yes", -0.5), ("no", -0.5)])),
    ]);
    let p = backends::llm_entailment(&backend(&url, 3), "a", "b").unwrap().value;
    assert!((p - 0.5).abs() < 1e-12);
    assert_eq!(log.lock().unwrap().len(), 3);
}

#[test]
fn retries_are_bounded() {
    let (url, log) = serve(vec![(500, "{}".into()); 5]);
    let err = backends::llm_entailment(&backend(&url, 2), "a", "b").unwrap_err();
    assert!(matches!(err, Error::BackendUnavailable { attempts: 3, .. }), "{err}");
    assert_eq!(log.lock().unwrap().len(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, log) = serve(vec![(400, "{\"error\":\"bad\"}".into()), (200, "{}".into())]);
    let err = backends::llm_entailment(&backend(&url, 3), "a", "b").unwrap_err();
    assert!(matches!(err, Error::BackendUnavailable { attempts: 1, .. }));
    assert_eq!(log.lock().unwrap().len(), 1);
}

#[test]
fn unreachable_endpoint() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let b = backend(&format!("http://127.0.0.1:{port}/v1"), 1);
    let err = backends::llm_entailment(&b, "a", "b").unwrap_err();
    assert!(err.is_backend());
}

#[test]
fn missing_logprobs_is_a_protocol_error() {
    let reply = json!({"choices": [{"message": {"content": "Yes"}}]}).to_string();
    let (url, _) = serve(vec![(200, reply)]);
    let err = backends::llm_entailment(&backend(&url, 0), "a", "b").unwrap_err();
    assert!(matches!(err, Error::Protocol { .. }));
}

#[test]
fn greedy_token_decides_when_neither_class_listed() {
    let (url, _) = serve(vec![(200, logprob_reply(&[("Sure", -0.1), ("Okay", -1.0)]))]);
    let p = backends::llm_entailment(&backend(&url, 0), "a", "b").unwrap().value;
    assert_eq!(p, 0.0);
}

#[test]
fn generation_returns_content() {
    let reply = json!({"choices": [{"message": {"content": "1. bird eats 2. snake gets eaten"}}]}).to_string();
    let (url, log) = serve(vec![(200, reply)]);
    let text = backends::llm_generate(&backend(&url, 0), "Split it.").unwrap();
    assert_eq!(text, "1. bird eats 2. snake gets eaten");
    let log = log.lock().unwrap();
    assert_eq!(log[0].body["messages"][0]["content"], "Split it.");
    assert_eq!(log[0].body["temperature"], 0);
}
