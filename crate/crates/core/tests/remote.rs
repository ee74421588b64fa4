use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use colakg::embed::{embed_prompt, ContentCache, EmbeddingProvider, RemoteConfig, RemoteProvider, API_KEY_ENV};
use colakg::kg_text::{PromptDocument, PromptKind};
use colakg::Error;
use serde_json::{json, Value};

#[derive(Debug, Clone)]
struct Seen {
    path: String,
    auth: String,
    body: Value,
}

type Handler = dyn Fn(&str, &Value) -> (u16, String) + Send + Sync;

/// One-request-per-connection HTTP server; returns its base URL and the log.
fn serve(handler: Box<Handler>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let path = request_line.split_whitespace().nth(1).unwrap_or("").to_owned();
            let (mut len, mut auth) = (0usize, String::new());
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (name, value) = line.split_once(':').unwrap();
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => len = value.trim().parse().unwrap(),
                    "authorization" => auth = value.trim().to_owned(),
                    _ => {}
                }
            }
            let mut body = vec![0u8; len];
            reader.read_exact(&mut body).unwrap();
            let body: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
            let (status, payload) = handler(&path, &body);
            log.lock().unwrap().push(Seen { path, auth, body });
            let reply = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                payload.len()
            );
            let _ = stream.write_all(reply.as_bytes());
        }
    });
    (url, seen)
}

fn config(url: &str, dim: usize) -> RemoteConfig {
    RemoteConfig {
        chat_url: format!("{url}/chat"),
        embed_url: format!("{url}/embed"),
        dim,
        backoff: Duration::from_millis(1),
        timeout: Duration::from_secs(5),
        ..RemoteConfig::default()
    }
}

fn prompt() -> PromptDocument {
    PromptDocument {
        kind: PromptKind::Item,
        subject_id: 3,
        system_instruction: "Summarize the item.".into(),
        body: "Item 3 is a noir film.".into(),
    }
}

fn happy(path: &str, body: &Value) -> (u16, String) {
    match path {
        "/chat" => {
            let user = body["messages"][1]["content"].as_str().unwrap_or("");
            (200, json!({"choices": [{"message": {"content": format!("about: {user}")}}]}).to_string())
        }
        _ => (200, json!({"data": [{"embedding": [0.5, -0.5, 0.5, -0.5]}]}).to_string()),
    }
}

#[test]
fn round_trip_then_cache_hit_makes_no_calls() {
    let (url, seen) = serve(Box::new(happy));
    let cache_dir = tempfile::tempdir().unwrap();
    let provider = RemoteProvider::with_key(config(&url, 4), ContentCache::new(cache_dir.path()).unwrap(), "secret".into());
    let v = embed_prompt(&provider, &prompt()).unwrap();
    assert_eq!(v.len(), 4);
    assert_eq!(provider.network_calls(), 2);
    {
        let seen = seen.lock().unwrap();
        assert_eq!(seen.len(), 2);
        assert_eq!(seen[0].path, "/chat");
        assert_eq!(seen[0].auth, "Bearer secret");
        assert_eq!(seen[0].body["temperature"], json!(0.0));
        assert_eq!(seen[0].body["messages"][0]["content"], json!("Summarize the item."));
        assert_eq!(seen[1].body["input"], json!("about: Item 3 is a noir film."));
    }

    let again = RemoteProvider::with_key(config(&url, 4), ContentCache::new(cache_dir.path()).unwrap(), "secret".into());
    assert_eq!(embed_prompt(&again, &prompt()).unwrap(), v);
    assert_eq!(again.network_calls(), 0);
    assert_eq!(seen.lock().unwrap().len(), 2);
}

#[test]
fn persistent_failure_reports_last_status() {
    let (url, seen) = serve(Box::new(|_: &str, _: &Value| (503, "{\"error\":\"busy\"}".to_string())));
    let cache_dir = tempfile::tempdir().unwrap();
    let provider = RemoteProvider::with_key(config(&url, 4), ContentCache::new(cache_dir.path()).unwrap(), "k".into());
    match provider.comprehend(&prompt()) {
        Err(Error::Remote { attempts, status, detail }) => {
            assert_eq!(attempts, 3);
            assert_eq!(status, "503");
            assert!(detail.contains("busy"));
        }
        other => panic!("expected a remote error, got {other:?}"),
    }
    assert_eq!(provider.network_calls(), 3);
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn recovers_after_transient_failure() {
    let calls = Arc::new(Mutex::new(0));
    let counter = calls.clone();
    let (url, _) = serve(Box::new(move |path: &str, body: &Value| {
        let mut n = counter.lock().unwrap();
        *n += 1;
        if *n == 1 {
            (500, "{}".into())
        } else {
            happy(path, body)
        }
    }));
    let cache_dir = tempfile::tempdir().unwrap();
    let provider = RemoteProvider::with_key(config(&url, 4), ContentCache::new(cache_dir.path()).unwrap(), "k".into());
    assert_eq!(provider.embed_text("some text").unwrap().len(), 4);
    assert_eq!(provider.network_calls(), 2);
}

#[test]
fn field_names_are_configurable() {
    let (url, seen) = serve(Box::new(|_: &str, body: &Value| {
        let n = body["text"].as_str().map(str::len).unwrap_or(0) as f64;
        (200, json!({"result": {"vector": [n, 1.0]}}).to_string())
    }));
    let cfg = RemoteConfig {
        embed_input_field: "text".into(),
        embed_response_pointer: "/result/vector".into(),
        ..config(&url, 2)
    };
    let cache_dir = tempfile::tempdir().unwrap();
    let provider = RemoteProvider::with_key(cfg, ContentCache::new(cache_dir.path()).unwrap(), "k".into());
    let v = provider.embed_text("abcd").unwrap();
    assert_eq!(v.len(), 2);
    assert!((v[0] / v[1] - 4.0).abs() < 1e-6);
    assert_eq!(seen.lock().unwrap()[0].body["model"], json!("sup-simcse-roberta-large"));
}

#[test]
fn wrong_dimension_is_rejected() {
    let (url, _) = serve(Box::new(happy));
    let cache_dir = tempfile::tempdir().unwrap();
    let provider = RemoteProvider::with_key(config(&url, 8), ContentCache::new(cache_dir.path()).unwrap(), "k".into());
    assert!(provider.embed_text("text").is_err());
}

#[test]
fn missing_credential_maps_to_exit_3() {
    std::env::remove_var(API_KEY_ENV);
    let cache_dir = tempfile::tempdir().unwrap();
    let err = RemoteProvider::from_env(RemoteConfig::default(), ContentCache::new(cache_dir.path()).unwrap())
        .err()
        .unwrap();
    assert!(matches!(err, Error::Credential(_)));
    assert_eq!(err.exit_code(), 3);
}
