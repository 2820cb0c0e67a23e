//! Remote policy against a scripted in-process HTTP server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use shapdistill::cacs::{FeatureMatch, PatientFeatureTable};
use shapdistill::calibration::{compute_reward, DiagnosticState};
use shapdistill::policy::{
    Policy, PolicyError, PolicyRequest, RemoteConfig, RemotePolicy, RequestMode,
};
use shapdistill::schema::{FeatureKind, FeatureSpec};

#[derive(Clone)]
enum Step {
    /// Close the connection without answering.
    Drop,
    Status(u16),
    Reply(String),
}

struct Mock {
    url: String,
    bodies: Arc<Mutex<Vec<String>>>,
    peak: Arc<AtomicUsize>,
}

fn read_request(stream: &mut TcpStream) -> String {
    let mut reader = BufReader::new(stream);
    let mut len = 0;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return String::new();
        }
        let lower = line.to_ascii_lowercase();
        if let Some(v) = lower.strip_prefix("content-length:") {
            len = v.trim().parse().unwrap();
        }
        if line == "\r\n" {
            break;
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).unwrap();
    String::from_utf8(body).unwrap()
}

fn respond(stream: &mut TcpStream, status: u16, body: &str) {
    let head = format!(
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        body.len()
    );
    stream.write_all(head.as_bytes()).unwrap();
    stream.write_all(body.as_bytes()).unwrap();
}

/// Serves `script` in order, one step per connection; the last step repeats.
fn serve(script: Vec<Step>, delay: Duration) -> Mock {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let bodies = Arc::new(Mutex::new(Vec::new()));
    let peak = Arc::new(AtomicUsize::new(0));
    let (b, p) = (bodies.clone(), peak.clone());
    let live = Arc::new(AtomicUsize::new(0));
    thread::spawn(move || {
        for (i, stream) in listener.incoming().enumerate() {
            let Ok(mut stream) = stream else { continue };
            let step = script[i.min(script.len() - 1)].clone();
            let (b, p, live) = (b.clone(), p.clone(), live.clone());
            thread::spawn(move || {
                let now = live.fetch_add(1, Ordering::SeqCst) + 1;
                p.fetch_max(now, Ordering::SeqCst);
                let body = read_request(&mut stream);
                b.lock().unwrap().push(body);
                thread::sleep(delay);
                match step {
                    Step::Drop => {}
                    Step::Status(code) => respond(&mut stream, code, "{}"),
                    Step::Reply(content) => {
                        let v = serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]});
                        respond(&mut stream, 200, &v.to_string());
                    }
                }
                live.fetch_sub(1, Ordering::SeqCst);
            });
        }
    });
    Mock { url, bodies, peak }
}

fn features(n: usize) -> Vec<FeatureSpec> {
    (0..n)
        .map(|i| FeatureSpec::new(format!("f{i:02}"), FeatureKind::Continuous, "synthetic"))
        .collect()
}

fn request(n: usize) -> PolicyRequest {
    let table = PatientFeatureTable {
        entries: (0..n)
            .map(|i| FeatureMatch {
                raw_value: i as f64,
                midpoint: i as f64,
                contribution: 0.01,
            })
            .collect(),
    };
    let state = DiagnosticState::cold_start(table).unwrap();
    PolicyRequest {
        mode: RequestMode::Calibrate,
        features: features(n),
        reward: Some(compute_reward(0.9, state.infer_prob)),
        state,
        failures: vec![],
        teacher_prob: Some(0.9),
        precedents: vec![],
        run: 0,
        max_weight: 10.0,
    }
}

fn reply(n_weights: usize, value: f64) -> String {
    let mut s = String::from("Reasoning first.\n```WEIGHTS\n");
    for i in 0..n_weights {
        s.push_str(&format!("f{i:02} = {value}\n"));
    }
    s.push_str("```\n```GUIDANCE\nRaise everything a little.\n```\n");
    s
}

fn policy(url: &str, tweak: impl FnOnce(&mut RemoteConfig)) -> RemotePolicy {
    let mut cfg = RemoteConfig {
        base_url: url.into(),
        model: "mock".into(),
        token_env: "SHAPDISTILL_TEST_UNSET_TOKEN".into(),
        timeout_secs: 5.0,
        backoff_ms: 1,
        ..RemoteConfig::default()
    };
    tweak(&mut cfg);
    RemotePolicy::new(cfg)
}

#[test]
fn retries_dropped_connections() {
    let mock = serve(
        vec![Step::Drop, Step::Drop, Step::Reply(reply(15, 1.5))],
        Duration::ZERO,
    );
    let resp = policy(&mock.url, |_| {}).propose(&request(15)).unwrap();
    assert_eq!(resp.meta.retries, 2);
    assert!(!resp.meta.fallback);
    assert_eq!(resp.weights.as_slice(), &[1.5; 15]);
    assert_eq!(resp.guidance, "Raise everything a little.");
    let bodies = mock.bodies.lock().unwrap();
    assert_eq!(bodies.len(), 3);
    let sent: serde_json::Value = serde_json::from_str(&bodies[2]).unwrap();
    assert_eq!(sent["model"], "mock");
    assert!(sent["messages"][1]["content"]
        .as_str()
        .unwrap()
        .contains("f14"));
}

#[test]
fn server_errors_count_as_retries() {
    let mock = serve(
        vec![Step::Status(503), Step::Reply(reply(15, 2.0))],
        Duration::ZERO,
    );
    let resp = policy(&mock.url, |_| {}).propose(&request(15)).unwrap();
    assert_eq!(resp.meta.retries, 1);
    assert_eq!(resp.weights.as_slice(), &[2.0; 15]);
}

#[test]
fn transport_gives_up() {
    let mock = serve(vec![Step::Drop], Duration::ZERO);
    let err = policy(&mock.url, |c| c.max_retries = 1)
        .propose(&request(15))
        .unwrap_err();
    assert!(
        matches!(err, PolicyError::Transport { attempts: 2, .. }),
        "{err}"
    );
    assert_eq!(mock.bodies.lock().unwrap().len(), 2);
}

#[test]
fn short_reply_falls_back_after_reparse() {
    let mock = serve(vec![Step::Reply(reply(14, 3.0))], Duration::ZERO);
    let req = request(15);
    let resp = policy(&mock.url, |_| {}).propose(&req).unwrap();
    assert!(resp.meta.fallback);
    assert_eq!(resp.meta.reparse_attempts, 2);
    assert_eq!(resp.weights, req.state.weights);
    assert!(
        resp.meta.notices.iter().any(|n| n.contains("f14")),
        "{:?}",
        resp.meta.notices
    );
    let bodies = mock.bodies.lock().unwrap();
    assert_eq!(bodies.len(), 3);
    let last: serde_json::Value = serde_json::from_str(&bodies[2]).unwrap();
    let msgs = last["messages"].as_array().unwrap();
    assert_eq!(msgs.len(), 6);
    assert!(msgs[5]["content"]
        .as_str()
        .unwrap()
        .contains("could not be parsed"));
}

#[test]
fn reparse_recovers() {
    let mock = serve(
        vec![
            Step::Reply("no blocks at all".into()),
            Step::Reply(reply(15, 12.0)),
        ],
        Duration::ZERO,
    );
    let resp = policy(&mock.url, |_| {}).propose(&request(15)).unwrap();
    assert!(!resp.meta.fallback);
    assert_eq!(resp.meta.reparse_attempts, 1);
    // out-of-range weights are clamped with a notice
    assert_eq!(resp.weights.as_slice(), &[10.0; 15]);
    assert_eq!(resp.meta.notices.len(), 15);
}

#[test]
fn in_flight_limit_holds() {
    let mock = serve(vec![Step::Reply(reply(15, 1.0))], Duration::from_millis(60));
    let p = Arc::new(policy(&mock.url, |c| c.max_in_flight = 2));
    let handles: Vec<_> = (0..6)
        .map(|_| {
            let p = p.clone();
            thread::spawn(move || p.propose(&request(15)).unwrap())
        })
        .collect();
    for h in handles {
        assert!(!h.join().unwrap().meta.fallback);
    }
    assert_eq!(mock.bodies.lock().unwrap().len(), 6);
    let peak = mock.peak.load(Ordering::SeqCst);
    assert!((1..=2).contains(&peak), "peak {peak}");
}
