use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use vrag_core::fcot::Role;
use vrag_core::gateway::{ChatMessage, ChatRequest, DecodingParams, Gateway, GatewayConfig, GatewayError, RetryPolicy};

const OK_BODY: &str = r#"{"choices":[{"message":{"role":"assistant","content":"Fake"}}],"usage":{"prompt_tokens":3,"completion_tokens":1}}"#;

#[derive(Default)]
struct Seen {
    requests: usize,
    auth: Vec<Option<String>>,
    bodies: Vec<serde_json::Value>,
}

/// Answers one connection per scripted status, then stops.
fn serve(statuses: Vec<u16>) -> (String, Arc<Mutex<Seen>>, JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Seen::default()));
    let log = Arc::clone(&seen);
    let handle = std::thread::spawn(move || {
        for status in statuses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let (mut len, mut auth) = (0usize, None);
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (name, value) = line.split_once(':').unwrap_or((line, ""));
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => len = value.trim().parse().unwrap(),
                    "authorization" => auth = Some(value.trim().to_string()),
                    _ => {}
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            {
                let mut s = log.lock().unwrap();
                s.requests += 1;
                s.auth.push(auth);
                s.bodies.push(serde_json::from_slice(&body).unwrap());
            }
            let payload = if status == 200 { OK_BODY } else { "{\"error\":\"nope\"}" };
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                payload.len()
            )
            .unwrap();
        }
    });
    (url, seen, handle)
}

fn config(url: String, token_var: Option<&str>) -> GatewayConfig {
    GatewayConfig {
        endpoint_url: url,
        auth_token_env_var: token_var.map(str::to_string),
        timeout_ms: 5_000,
        retry: RetryPolicy { max_attempts: 4, backoff_base_ms: 1, max_backoff_ms: 5, jitter: false },
        max_inflight: 1,
        cache_dir: None,
    }
}

fn request() -> ChatRequest {
    ChatRequest::new("policy", vec![ChatMessage::text(Role::User, "Real or Fake?")], DecodingParams::default())
}

#[test]
fn rate_limits_are_retried() {
    let (url, seen, handle) = serve(vec![429, 429, 200]);
    std::env::set_var("VRAG_TEST_TOKEN_RETRY", "secret-token");
    let gateway = Gateway::http(config(url, Some("VRAG_TEST_TOKEN_RETRY"))).unwrap();
    let response = gateway.complete(&request()).unwrap();
    handle.join().unwrap();
    assert_eq!(response.text, "Fake");
    assert_eq!(response.attempts, 3);
    assert_eq!(response.usage.completion_tokens, 1);
    let seen = seen.lock().unwrap();
    assert_eq!(seen.requests, 3);
    assert!(seen.auth.iter().all(|a| a.as_deref() == Some("Bearer secret-token")));
    assert_eq!(seen.bodies[0]["model"], "policy");
    assert_eq!(seen.bodies[0]["messages"][0]["content"][0]["text"], "Real or Fake?");
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen, handle) = serve(vec![400]);
    let gateway = Gateway::http(config(url, None)).unwrap();
    let err = gateway.complete(&request()).unwrap_err();
    handle.join().unwrap();
    assert!(matches!(err, GatewayError::Remote { status: 400, .. }), "{err}");
    assert_eq!(seen.lock().unwrap().requests, 1);
    assert_eq!(seen.lock().unwrap().auth, vec![None]);
}

#[test]
fn retries_stop_at_the_attempt_limit() {
    let (url, seen, handle) = serve(vec![503, 503, 503, 503]);
    let gateway = Gateway::http(config(url, None)).unwrap();
    let err = gateway.complete(&request()).unwrap_err();
    handle.join().unwrap();
    assert!(matches!(err, GatewayError::Remote { status: 503, .. }), "{err}");
    assert_eq!(seen.lock().unwrap().requests, 4);
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut cfg = config(format!("http://127.0.0.1:{port}/v1"), None);
    cfg.retry.max_attempts = 2;
    let err = Gateway::http(cfg).unwrap().complete(&request()).unwrap_err();
    assert!(matches!(err, GatewayError::Transport(_)), "{err}");
}
