//! Line-protocol client against in-process mock servers (TCP) and a shell mock (stdio).

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::thread;
use std::time::Duration;

use serde_json::{json, Value};
use spoofqa_core::backend::{BackendError, DetectorBackend, Endpoint, HealthStatus, RemoteClient};

/// Accepts one connection and hands it to `handler` on a background thread.
fn serve(handler: impl FnOnce(BufReader<TcpStream>, TcpStream) + Send + 'static) -> Endpoint {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let reader = BufReader::new(stream.try_clone().unwrap());
        handler(reader, stream);
    });
    format!("{addr}").parse().unwrap()
}

fn requests(reader: BufReader<TcpStream>) -> impl Iterator<Item = Value> {
    reader
        .lines()
        .map_while(Result::ok)
        .map(|l| serde_json::from_str::<Value>(&l).expect("client sends JSON"))
}

fn send(w: &mut TcpStream, v: &Value) {
    let mut line = v.to_string();
    line.push('\n');
    let _ = w.write_all(line.as_bytes());
}

fn answer(req: &Value) -> Value {
    if req.get("ping").is_some() {
        json!({"id": req["id"], "pong": true, "model": "mock"})
    } else {
        json!({"id": req["id"], "text": "spoof"})
    }
}

fn echo(reader: BufReader<TcpStream>, mut w: TcpStream) {
    for req in requests(reader) {
        send(&mut w, &answer(&req));
    }
}

fn connect(ep: &Endpoint, timeout_ms: u64) -> RemoteClient {
    RemoteClient::connect(ep, Duration::from_millis(timeout_ms)).unwrap()
}

fn wav() -> PathBuf {
    PathBuf::from("/nonexistent/a.wav")
}

#[test]
fn round_trip_returns_text_and_sends_wire_fields() {
    let (tx, rx) = std::sync::mpsc::channel();
    let ep = serve(move |reader, mut w| {
        for req in requests(reader) {
            tx.send(req.clone()).unwrap();
            send(&mut w, &answer(&req));
        }
    });
    let client = connect(&ep, 5000);
    assert_eq!(client.classify(&wav(), "Is this real?", false).unwrap(), "spoof");
    let req = rx.recv().unwrap();
    let mut keys: Vec<&str> = req.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort();
    assert_eq!(keys, ["id", "max_new_tokens", "prompt", "wav_path"]);
    assert_eq!(req["prompt"], "Is this real?");
    assert_eq!(req["max_new_tokens"], 16);
}

#[test]
fn ping_reports_model_name() {
    let client = connect(&serve(echo), 5000);
    assert_eq!(client.ping().unwrap(), "mock");
    assert_eq!(client.healthcheck().status, HealthStatus::Ready);
}

#[test]
fn out_of_order_replies_are_matched_by_id() {
    let ep = serve(|reader, mut w| {
        let mut held = Vec::new();
        for req in requests(reader) {
            held.push(req);
            if held.len() == 4 {
                for r in held.drain(..).rev() {
                    let text = format!("reply-{}", r["prompt"].as_str().unwrap());
                    send(&mut w, &json!({"id": r["id"], "text": text}));
                }
            }
        }
    });
    let client = connect(&ep, 5000).with_max_in_flight(4);
    let items: Vec<(PathBuf, String)> = (0..8).map(|i| (wav(), format!("q{i}"))).collect();
    let out = client.classify_batch(&items, false);
    for (i, r) in out.into_iter().enumerate() {
        assert_eq!(r.unwrap(), format!("reply-q{i}"));
    }
}

#[test]
fn timeout_is_retriable_and_late_reply_is_ignored() {
    let ep = serve(|reader, mut w| {
        let mut first = None;
        for req in requests(reader) {
            match first.take() {
                None if req["prompt"] == "slow" => first = Some(req),
                Some(old) => {
                    // late answer to the abandoned request, then the current one
                    send(&mut w, &answer(&old));
                    send(&mut w, &answer(&req));
                }
                None => send(&mut w, &answer(&req)),
            }
        }
    });
    let client = connect(&ep, 200);
    let err = client.classify(&wav(), "slow", false).unwrap_err();
    assert!(matches!(err, BackendError::Timeout { .. }), "{err}");
    assert!(err.is_retriable());
    assert_eq!(client.classify(&wav(), "fast", false).unwrap(), "spoof");
    assert_eq!(client.classify(&wav(), "again", false).unwrap(), "spoof");
}

#[test]
fn close_mid_response_is_a_protocol_error() {
    let ep = serve(|reader, mut w| {
        if let Some(req) = requests(reader).next() {
            let partial = format!("{{\"id\": {}, \"te", req["id"]);
            let _ = w.write_all(partial.as_bytes());
            let _ = w.shutdown(std::net::Shutdown::Both);
        }
    });
    let client = connect(&ep, 5000);
    match client.classify(&wav(), "p", false).unwrap_err() {
        BackendError::Protocol { msg, line } => {
            assert!(msg.contains("mid-response"), "{msg}");
            assert!(line.contains("\"te"), "{line}");
        }
        e => panic!("expected protocol error, got {e}"),
    }
    assert!(client.classify(&wav(), "p", false).is_err());
}

#[test]
fn unknown_id_fails_with_offending_line() {
    let ep = serve(|reader, mut w| {
        for req in requests(reader) {
            let id = req["id"].as_u64().unwrap() + 1000;
            send(&mut w, &json!({"id": id, "text": "spoof"}));
        }
    });
    let client = connect(&ep, 5000);
    match client.classify(&wav(), "p", false).unwrap_err() {
        BackendError::Protocol { line, .. } => assert!(line.contains("1001"), "{line}"),
        e => panic!("expected protocol error, got {e}"),
    }
}

#[test]
fn malformed_line_fails_with_offending_line() {
    let ep = serve(|reader, mut w| {
        for _ in requests(reader) {
            let _ = w.write_all(b"this is not json\n");
        }
    });
    let client = connect(&ep, 5000);
    match client.classify(&wav(), "p", false).unwrap_err() {
        BackendError::Protocol { line, .. } => assert_eq!(line, "this is not json"),
        e => panic!("expected protocol error, got {e}"),
    }
}

#[test]
fn remote_error_is_surfaced_and_not_retriable() {
    let ep = serve(|reader, mut w| {
        for req in requests(reader) {
            send(&mut w, &json!({"id": req["id"], "error": "cannot decode audio"}));
        }
    });
    let client = connect(&ep, 5000);
    let err = client.classify(&wav(), "p", false).unwrap_err();
    assert!(matches!(&err, BackendError::Remote { msg, .. } if msg == "cannot decode audio"));
    assert!(!err.is_retriable());
}

#[test]
fn refusing_classify_but_answering_ping_is_degraded() {
    let ep = serve(|reader, mut w| {
        for req in requests(reader) {
            if req.get("ping").is_some() {
                send(&mut w, &answer(&req));
            } else {
                send(&mut w, &json!({"id": req["id"], "error": "model not loaded"}));
            }
        }
    });
    let client = connect(&ep, 5000).with_probe(wav(), "p".into());
    let h = client.healthcheck();
    assert_eq!(h.status, HealthStatus::Degraded);
    assert_eq!(h.model, "mock");
}

#[test]
fn silent_server_is_down() {
    let ep = serve(|reader, _w| for _ in requests(reader) {});
    let client = connect(&ep, 200);
    assert_eq!(client.healthcheck().status, HealthStatus::Down);
}

#[test]
fn unreachable_endpoint_is_a_connection_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let ep: Endpoint = format!("127.0.0.1:{port}").parse().unwrap();
    match RemoteClient::connect(&ep, Duration::from_millis(500)) {
        Err(BackendError::Connection(_)) => {}
        Err(e) => panic!("expected connection error, got {e}"),
        Ok(_) => panic!("connected to a closed port"),
    }
}

#[test]
fn stdio_transport_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("mock.sh");
    std::fs::write(
        &script,
        r#"while IFS= read -r line; do
  id=$(printf '%s' "$line" | sed -n 's/.*"id":\([0-9]*\).*/\1/p')
  case "$line" in
    *'"ping"'*) printf '{"id":%s,"pong":true,"model":"shell"}\n' "$id" ;;
    *) printf '{"id":%s,"text":"bonafide"}\n' "$id" ;;
  esac
done
"#,
    )
    .unwrap();
    let ep: Endpoint = format!("stdio:sh {}", script.display()).parse().unwrap();
    let client = connect(&ep, 5000);
    assert_eq!(client.ping().unwrap(), "shell");
    let items: Vec<(PathBuf, String)> = (0..5).map(|i| (wav(), format!("q{i}"))).collect();
    for r in client.classify_batch(&items, false) {
        assert_eq!(r.unwrap(), "bonafide");
    }
}

#[test]
fn stdio_program_that_exits_fails_pending_requests() {
    let ep: Endpoint = "stdio:true".parse().unwrap();
    let client = connect(&ep, 2000);
    let err = client.classify(&wav(), "p", false).unwrap_err();
    assert!(
        matches!(err, BackendError::Protocol { .. } | BackendError::Connection(_)),
        "{err}"
    );
}
