//! Drive the labeling queue and the chat sandbox through the HTTP router
//! without opening a socket. `talktrack serve -c run.toml` exposes the same
//! routes on a real port.

use std::sync::Arc;

use axum::body::Body;
use axum::http::Request;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use talktrack::dqn::{run_dqn, DqnConfig};
use talktrack::world::{toyshop, EnvOptions};
use talktrack_service::{router, FeedbackService, ServiceOptions};
use tower::ServiceExt;

async fn call(svc: &Arc<FeedbackService>, method: &str, uri: &str, body: Option<Value>) -> (u16, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let resp = router(svc.clone()).oneshot(req).await.unwrap();
    let status = resp.status().as_u16();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let world = toyshop();
    let cfg = DqnConfig {
        num_episodes: 1500,
        ..DqnConfig::default()
    };
    let artifact = run_dqn(&world, &cfg, &EnvOptions::default(), 1)?.artifact;
    let svc = Arc::new(FeedbackService::new(world, artifact, ServiceOptions::in_dir(dir.path()))?);

    for annotator in ["ana", "ben"] {
        let (_, task) = call(&svc, "GET", &format!("/api/tasks/next?annotator={annotator}"), None).await;
        println!(
            "{annotator} got {}: A = {:?}, B = {:?}",
            task["task_id"], task["candidate_a"]["text"], task["candidate_b"]["text"]
        );
        let uri = format!("/api/tasks/{}/label", task["task_id"].as_str().unwrap());
        let (status, ack) = call(&svc, "POST", &uri, Some(json!({"annotator": annotator, "choice": "A"}))).await;
        println!("  label -> {status} {ack}");
    }

    let (_, started) = call(&svc, "POST", "/api/chat", Some(json!({"segment": "retail"}))).await;
    let uri = format!("/api/chat/{}/message", started["session_id"].as_str().unwrap());
    for text in ["hi, just looking", "it's for my niece, she's six", "sounds good", "sure, I'll take it"] {
        let (status, reply) = call(&svc, "POST", &uri, Some(json!({ "text": text }))).await;
        println!("user: {text}\n  agent ({status}): {}", reply["reply"]);
        if reply["done"] == true {
            break;
        }
    }
    let (_, metrics) = call(&svc, "GET", "/api/metrics", None).await;
    println!("metrics: {metrics}");
    let stored = talktrack::rlhf::read_preferences(dir.path().join("preferences.jsonl"))?;
    println!("{} preference records on disk", stored.len());
    Ok(())
}
