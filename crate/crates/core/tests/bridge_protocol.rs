//! The bridge client against a recorded conversation, over an in-memory
//! transport, a stdio subprocess and HTTP; plus the shared F1 vectors.

use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use aequiv::bridge::{BridgeClient, BridgeError, HttpTransport, ScoreRequest, ScoreResponse, StdioTransport, Transport};
use aequiv::lexical::{token_f1, NormalizationProfile};
use aequiv::scoring::{EquivalenceScorer, ScoreQuery, ScorerKind};
use serde::Deserialize;

fn testdata(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../testdata").join(rel)
}

#[derive(Deserialize)]
struct Turn {
    batch: usize,
    request: String,
    response: String,
}

fn conversation() -> Vec<Turn> {
    std::fs::read_to_string(testdata("bridge/conversation.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn batches() -> Vec<Vec<Turn>> {
    let mut out: Vec<Vec<Turn>> = Vec::new();
    for t in conversation() {
        if out.len() <= t.batch {
            out.resize_with(t.batch + 1, Vec::new);
        }
        out[t.batch].push(t);
    }
    out
}

fn requests() -> Vec<ScoreRequest> {
    conversation()
        .iter()
        .map(|t| serde_json::from_str(&t.request).unwrap())
        .collect()
}

fn expected_scores() -> Vec<f64> {
    conversation()
        .iter()
        .map(|t| ScoreResponse::parse_line(&t.response).unwrap().score.unwrap())
        .collect()
}

/// Checks every request line against the recording and answers from it.
struct Replay {
    batches: Vec<Vec<Turn>>,
    next: usize,
}

impl Transport for Replay {
    fn exchange(&mut self, batch: &[ScoreRequest]) -> Result<Vec<ScoreResponse>, BridgeError> {
        let recorded = &self.batches[self.next];
        self.next += 1;
        assert_eq!(batch.len(), recorded.len(), "batch size");
        batch
            .iter()
            .zip(recorded)
            .map(|(req, turn)| {
                assert_eq!(req.to_line(), turn.request, "request line differs from the recording");
                ScoreResponse::parse_line(&turn.response)
            })
            .collect()
    }
}

fn first_batch_len() -> usize {
    batches()[0].len()
}

#[test]
fn recorded_lines_round_trip_through_the_message_types() {
    for t in conversation() {
        let req: ScoreRequest = serde_json::from_str(&t.request).unwrap();
        assert_eq!(req.to_line(), t.request);
        let resp = ScoreResponse::parse_line(&t.response).unwrap();
        assert_eq!(serde_json::to_string(&resp).unwrap(), t.response);
    }
}

#[test]
fn client_replays_the_recorded_conversation() {
    let replay = Replay { batches: batches(), next: 0 };
    let mut client = BridgeClient::new(Box::new(replay), first_batch_len(), "replay");
    assert_eq!(client.score(&requests()).unwrap(), expected_scores());
}

#[test]
fn recorded_scores_equal_the_lexical_scorer() {
    for (req, s) in requests().iter().zip(expected_scores()) {
        assert_eq!(token_f1(&req.candidate, &req.reference, NormalizationProfile::SIMPLE), s, "{}", req.id);
    }
}

#[test]
fn scorer_builds_requests_from_queries() {
    let replay = Replay { batches: batches(), next: 0 };
    let client = BridgeClient::new(Box::new(replay), first_batch_len(), "replay");
    let mut scorer = EquivalenceScorer::new(ScorerKind::RemoteBridge(client));
    let queries: Vec<ScoreQuery> = requests()
        .iter()
        .map(|r| ScoreQuery::new(r.id.clone(), &r.question, &r.reference, &r.candidate))
        .collect();
    assert_eq!(scorer.score_batch(&queries).unwrap(), expected_scores());
}

#[test]
fn stdio_subprocess_replays_the_conversation() {
    let cmd = format!(
        "python3 {} {}",
        testdata("bridge/replay_server.py").display(),
        testdata("bridge/conversation.jsonl").display()
    );
    let transport = StdioTransport::spawn(&cmd, Duration::from_secs(30)).unwrap();
    let mut client = BridgeClient::new(Box::new(transport), first_batch_len(), "replay");
    assert_eq!(client.score(&requests()).unwrap(), expected_scores());
}

#[test]
fn stdio_mismatch_surfaces_as_item_error() {
    let cmd = format!(
        "python3 {} {}",
        testdata("bridge/replay_server.py").display(),
        testdata("bridge/conversation.jsonl").display()
    );
    let transport = StdioTransport::spawn(&cmd, Duration::from_secs(30)).unwrap();
    let mut client = BridgeClient::new(Box::new(transport), 8, "replay");
    let mut reqs = requests();
    reqs[0].candidate.push_str(" (edited)");
    assert!(client.score(&reqs).is_err());
}

#[test]
fn stdio_dead_process_is_reported() {
    let transport = StdioTransport::spawn("exit 0", Duration::from_secs(5)).unwrap();
    let mut client = BridgeClient::new(Box::new(transport), 8, "dead");
    let err = client.score(&requests()).unwrap_err();
    assert!(
        matches!(err, BridgeError::Closed { .. } | BridgeError::Io(_)),
        "unexpected {err:?}"
    );
}

#[test]
fn http_server_replays_the_conversation() {
    let server = tiny_http::Server::http("127.0.0.1:0").unwrap();
    let addr = server.server_addr().to_ip().unwrap();
    let recorded = batches();
    let bodies = Arc::new(Mutex::new(Vec::new()));
    let seen = Arc::clone(&bodies);
    let handle = thread::spawn(move || {
        for batch in &recorded {
            let mut req = server.recv().unwrap();
            assert_eq!(req.url(), "/score");
            assert_eq!(*req.method(), tiny_http::Method::Post);
            let mut body = String::new();
            req.as_reader().read_to_string(&mut body).unwrap();
            seen.lock().unwrap().push(body);
            let reply = format!(
                "[{}]",
                batch.iter().map(|t| t.response.as_str()).collect::<Vec<_>>().join(",")
            );
            req.respond(tiny_http::Response::from_string(reply)).unwrap();
        }
    });
    let transport = HttpTransport::new(&format!("http://{addr}/"), Duration::from_secs(10));
    let mut client = BridgeClient::new(Box::new(transport), first_batch_len(), "http");
    assert_eq!(client.score(&requests()).unwrap(), expected_scores());
    handle.join().unwrap();

    // request bodies are the recorded lines as a JSON array
    let bodies = bodies.lock().unwrap();
    for (body, batch) in bodies.iter().zip(batches()) {
        let want = format!(
            "[{}]",
            batch.iter().map(|t| t.request.as_str()).collect::<Vec<_>>().join(",")
        );
        assert_eq!(body, &want);
    }
}

#[test]
fn http_error_status_is_a_bridge_error() {
    let server = tiny_http::Server::http("127.0.0.1:0").unwrap();
    let addr = server.server_addr().to_ip().unwrap();
    let handle = thread::spawn(move || {
        let req = server.recv().unwrap();
        req.respond(tiny_http::Response::from_string("{\"error\":\"empty\"}").with_status_code(400))
            .unwrap();
    });
    let mut client = BridgeClient::new(
        Box::new(HttpTransport::new(&format!("http://{addr}"), Duration::from_secs(10))),
        8,
        "http",
    );
    assert!(matches!(client.score(&requests()), Err(BridgeError::Http(_))));
    handle.join().unwrap();
}

#[derive(Deserialize)]
struct Vector {
    candidate: String,
    reference: String,
    f1_simple: f64,
    f1_squad_official: f64,
}

#[test]
fn shared_f1_vectors_match_bit_for_bit() {
    let text = std::fs::read_to_string(testdata("lexical_f1_vectors.jsonl")).unwrap();
    let vectors: Vec<Vector> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(vectors.len(), 100);
    let mut simple = EquivalenceScorer::lexical_f1(NormalizationProfile::SIMPLE);
    let mut squad = EquivalenceScorer::lexical_f1(NormalizationProfile::SQUAD_OFFICIAL);
    for (i, v) in vectors.iter().enumerate() {
        let q = ScoreQuery::new(i.to_string(), "", &v.reference, &v.candidate);
        assert_eq!(simple.score(&q).unwrap().to_bits(), v.f1_simple.to_bits(), "simple #{i}: {:?}", v.candidate);
        assert_eq!(
            squad.score(&q).unwrap().to_bits(),
            v.f1_squad_official.to_bits(),
            "squad #{i}: {:?}",
            v.candidate
        );
    }
}
