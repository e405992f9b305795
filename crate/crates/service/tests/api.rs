use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use talktrack::dqn::q_network;
use talktrack::policy::{Algo, PolicyArtifact, Q_NET};
use talktrack::rlhf::{read_preferences, Choice};
use talktrack::world::{toyshop, World};
use talktrack_service::{router, FeedbackService, ServiceError, ServiceOptions, TaskStatus};
use tempfile::TempDir;
use tower::ServiceExt;

fn artifact(world: &World, seed: u64) -> PolicyArtifact {
    let net = q_network(world, &[16], seed).unwrap();
    PolicyArtifact::new(Algo::Dqn, world, [(Q_NET.to_owned(), net)].into(), "test".into(), seed)
}

fn service(dir: &TempDir, tweak: impl FnOnce(&mut ServiceOptions)) -> Arc<FeedbackService> {
    let world = toyshop();
    let art = artifact(&world, 1);
    let mut opts = ServiceOptions::in_dir(dir.path());
    tweak(&mut opts);
    Arc::new(FeedbackService::new(world, art, opts).unwrap())
}

async fn call(svc: &Arc<FeedbackService>, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = router(svc.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, value)
}

#[tokio::test]
async fn health_and_unknown_route() {
    let dir = TempDir::new().unwrap();
    let svc = service(&dir, |_| {});
    let (status, body) = call(&svc, "GET", "/api/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "ok");
    let (status, body) = call(&svc, "GET", "/api/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["code"], "not_found");
}

#[tokio::test]
async fn generated_task_has_two_allowed_candidates() {
    let dir = TempDir::new().unwrap();
    let svc = service(&dir, |_| {});
    for i in 0..20 {
        let (status, task) = call(&svc, "GET", &format!("/api/tasks/next?annotator=ann{i}"), None).await;
        assert_eq!(status, StatusCode::OK);
        let a = task["candidate_a"]["id"].as_str().unwrap();
        let b = task["candidate_b"]["id"].as_str().unwrap();
        assert_ne!(a, b);
        let state = svc.task_state(task["task_id"].as_str().unwrap()).unwrap();
        let world = svc.world();
        let allowed = world.allowed(&state).unwrap();
        for id in [a, b] {
            assert!(allowed.contains(world.catalog().index_of(id).unwrap()));
        }
        assert_eq!(task["status"], "open");
    }
}

#[tokio::test]
async fn missing_annotator_is_rejected() {
    let dir = TempDir::new().unwrap();
    let svc = service(&dir, |_| {});
    let (status, body) = call(&svc, "GET", "/api/tasks/next", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["code"], "bad_request");
}

#[test]
fn concurrent_annotators_get_disjoint_tasks() {
    let dir = TempDir::new().unwrap();
    let svc = service(&dir, |_| {});
    let ids: Vec<Vec<String>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..8)
            .map(|k| {
                let svc = svc.clone();
                s.spawn(move || {
                    (0..10)
                        .map(|_| svc.next_task(&format!("ann{k}")).unwrap().unwrap().task_id)
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    // Each annotator keeps getting its own leased task back.
    for per in &ids {
        assert!(per.iter().all(|id| id == &per[0]));
    }
    let mut firsts: Vec<&String> = ids.iter().map(|v| &v[0]).collect();
    firsts.sort();
    firsts.dedup();
    assert_eq!(firsts.len(), 8);
}

#[test]
fn expired_lease_frees_the_task() {
    let dir = TempDir::new().unwrap();
    let svc = service(&dir, |o| {
        o.lease = Duration::ZERO;
        o.generate_tasks = false;
    });
    let world = toyshop();
    let state = world.scenario().reset("retail").unwrap();
    let allowed: Vec<usize> = world.allowed(&state).unwrap().indices().collect();
    let task = svc.add_task(&state, allowed[0], allowed[1]).unwrap();
    assert_eq!(svc.next_task("x").unwrap().unwrap().task_id, task.task_id);
    assert_eq!(svc.next_task("y").unwrap().unwrap().task_id, task.task_id);
}

#[tokio::test]
async fn label_lifecycle() {
    let dir = TempDir::new().unwrap();
    let svc = service(&dir, |o| o.generate_tasks = false);
    let world = toyshop();
    let state = world.scenario().reset("wholesale").unwrap();
    let allowed: Vec<usize> = world.allowed(&state).unwrap().indices().collect();
    let task = svc.add_task(&state, allowed[0], allowed[1]).unwrap();
    let id = task.task_id.clone();

    let (status, got) = call(&svc, "GET", "/api/tasks/next?annotator=alice", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(got["task_id"], id.as_str());

    let (status, body) = call(&svc, "POST", &format!("/api/tasks/{id}/label"), Some(json!({"annotator": "bob", "choice": "A"}))).await;
    assert_eq!(status, StatusCode::CONFLICT, "{body}");

    let uri = format!("/api/tasks/{id}/label");
    let (status, ack) = call(&svc, "POST", &uri, Some(json!({"annotator": "alice", "choice": "B"}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ack["recorded"], true);
    let (status, ack) = call(&svc, "POST", &uri, Some(json!({"annotator": "alice", "choice": "B"}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ack["recorded"], false);
    let (status, body) = call(&svc, "POST", &uri, Some(json!({"annotator": "bob", "choice": "A"}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["code"], "conflict");

    let records = read_preferences(dir.path().join("preferences.jsonl")).unwrap();
    assert_eq!(records.len(), 1);
    let r = &records[0];
    assert_eq!((r.a, r.b, r.choice), (allowed[0], allowed[1], Choice::B));
    assert_eq!(r.annotator, "alice");
    assert_eq!(r.state_digest, format!("{:016x}", state.digest()));
    assert_eq!(r.state_enc, world.encode(&state).unwrap().values);

    let (status, none) = call(&svc, "GET", "/api/tasks/next?annotator=carol", None).await;
    assert_eq!((status, none), (StatusCode::NO_CONTENT, Value::Null));

    let (status, body) = call(&svc, "POST", "/api/tasks/t999999/label", Some(json!({"annotator": "a", "choice": "A"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["code"], "not_found");
    assert!(body["error"].as_str().unwrap().contains("t999999"));

    let (_, m) = call(&svc, "GET", "/api/metrics", None).await;
    assert_eq!(m["labels"], 1);
    assert_eq!(m["tasks_labeled"], 1);
}

#[test]
fn labels_survive_restart() {
    let dir = TempDir::new().unwrap();
    for round in 0..3 {
        let svc = service(&dir, |_| {});
        let task = svc.next_task("a").unwrap().unwrap();
        assert_eq!(svc.submit_label(&task.task_id, "a", Choice::A).unwrap().status, TaskStatus::Labeled);
        assert_eq!(svc.store().snapshot().unwrap().len(), round + 1);
    }
}

#[tokio::test]
async fn chat_session_runs_to_completion() {
    let dir = TempDir::new().unwrap();
    let svc = service(&dir, |_| {});
    let (status, body) = call(&svc, "POST", "/api/chat", Some(json!({"segment": "retail"}))).await;
    assert_eq!(status, StatusCode::CREATED);
    let sid = body["session_id"].as_str().unwrap().to_owned();
    let uri = format!("/api/chat/{sid}/message");
    let texts: Vec<String> = svc.world().catalog().iter().map(|u| u.text.clone()).collect();
    let mut last_turn = None;
    let mut done = false;
    for _ in 0..20 {
        let (status, reply) = call(&svc, "POST", &uri, Some(json!({"text": "hello there"}))).await;
        assert_eq!(status, StatusCode::OK, "{reply}");
        if let Some(text) = reply["reply"].as_str() {
            assert!(texts.iter().any(|t| t == text));
        }
        let turn = reply["turn"].as_u64().unwrap();
        if let Some(prev) = last_turn {
            assert!(turn > prev || reply["done"] == true);
        }
        last_turn = Some(turn);
        if reply["done"] == true {
            done = true;
            break;
        }
    }
    assert!(done);
    let (status, body) = call(&svc, "POST", &uri, Some(json!({"text": "again"}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{body}");
    assert_eq!(body["code"], "protocol");

    let (_, m) = call(&svc, "GET", "/api/metrics", None).await;
    assert_eq!(m["sessions_completed"], 1);
    assert_eq!(m["agent_blocks"], 0);
    let log = std::fs::read_to_string(dir.path().join("sessions.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);
}

#[test]
fn message_after_done_is_a_protocol_error() {
    let dir = TempDir::new().unwrap();
    let svc = service(&dir, |_| {});
    let sid = svc.chat_start("wholesale").unwrap();
    let mut replies = 0;
    while !svc.chat_message(&sid, "ok").unwrap().done {
        replies += 1;
        assert!(replies < 20);
    }
    assert!(matches!(svc.chat_message(&sid, "more"), Err(ServiceError::Protocol(_))));
    assert!(matches!(svc.chat_message("s404", "hi"), Err(ServiceError::NotFound(_))));
    assert!(matches!(svc.chat_start("nobody"), Err(ServiceError::NotFound(_))));
}

#[test]
fn policy_reloads_after_a_completed_session() {
    let dir = TempDir::new().unwrap();
    let world = toyshop();
    let path = dir.path().join("artifact.json");
    artifact(&world, 1).save(&path).unwrap();
    let svc = service(&dir, |o| o.artifact_path = Some(path.clone()));
    artifact(&world, 2).save(&path).unwrap();
    let sid = svc.chat_start("retail").unwrap();
    while !svc.chat_message(&sid, "ok").unwrap().done {}
    assert_eq!(svc.metrics().policy_reloads, 1);
    assert!(!svc.reload_policy().unwrap());
}
