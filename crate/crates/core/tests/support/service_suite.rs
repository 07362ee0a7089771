//! End-to-end checks of every HTTP endpoint against the mock provider,
//! driven in-process through `tower::ServiceExt::oneshot`.

use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use skillharness::config::Config;
use skillharness::evolution::{evolution_path, REVIEW_PROFILE_TOOL};
use skillharness::message::ToolCall;
use skillharness::provider::{AssistantReply, ChatPurpose, MockChatProvider, MockEmbeddingProvider};
use skillharness::runtime::{EvolutionMode, Harness};
use skillharness::service::{router, AppState};
use skillharness::workspace::Workspace;

pub const TOKEN: &str = "suite-token";

pub struct Reply {
    pub status: StatusCode,
    pub content_type: String,
    pub body: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap_or(Value::Null)
    }

    /// `(event name, data)` pairs of an SSE body.
    pub fn events(&self) -> Vec<(String, Value)> {
        let text = String::from_utf8_lossy(&self.body);
        let mut events = Vec::new();
        for block in text.split("\n\n") {
            let mut name = None;
            let mut data = String::new();
            for line in block.lines() {
                if let Some(v) = line.strip_prefix("event:") {
                    name = Some(v.trim().to_string());
                } else if let Some(v) = line.strip_prefix("data:") {
                    data.push_str(v.trim_start());
                }
            }
            if let Some(name) = name {
                events.push((name, serde_json::from_str(&data).unwrap_or(Value::Null)));
            }
        }
        events
    }
}

pub async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> Reply {
    send(app, method, uri, body.map(|b| b.to_string()), Some(TOKEN)).await
}

pub async fn send(app: &Router, method: Method, uri: &str, body: Option<String>, token: Option<&str>) -> Reply {
    let mut builder = Request::builder().method(method).uri(uri);
    if let Some(token) = token {
        builder = builder.header(header::AUTHORIZATION, format!("Bearer {token}"));
    }
    let request = match body {
        Some(text) => builder
            .header(header::CONTENT_TYPE, "application/json")
            .body(Body::from(text))
            .unwrap(),
        None => builder.body(Body::empty()).unwrap(),
    };
    let response = app.clone().oneshot(request).await.unwrap();
    let status = response.status();
    let content_type = response
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .unwrap_or_default()
        .to_string();
    let body = response.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply {
        status,
        content_type,
        body,
    }
}

pub fn app_with(data_root: &Path, config: Config, chat: Arc<MockChatProvider>) -> (Router, Arc<AppState>) {
    let config = Config {
        data_root: data_root.to_path_buf(),
        ..config
    };
    let harness = Harness::new(chat, Arc::new(MockEmbeddingProvider::new(64))).with_config(config.runtime_config());
    let state = AppState::new(harness, data_root.to_path_buf(), &config, Some(TOKEN.to_string())).unwrap();
    (router(state.clone()), state)
}

fn ensure(ok: bool, what: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(what.into())
    }
}

fn inferred_review(chat: &MockChatProvider) {
    let call = ToolCall::new(
        "r1",
        REVIEW_PROFILE_TOOL,
        json!({"heading": "Preferences", "content": "Prefers CIF pricing", "evidence": "", "inferred": true}).to_string(),
    );
    chat.push_reply(ChatPurpose::Review, AssistantReply::calls(vec![call]));
    chat.push_reply(ChatPurpose::Review, AssistantReply::text("flagged one inference"));
}

async fn new_session(app: &Router, user: &str) -> Result<String, String> {
    let reply = call(app, Method::POST, "/v1/sessions", Some(json!({"user_id": user}))).await;
    ensure(reply.status == StatusCode::CREATED, format!("create session: {}", reply.status))?;
    Ok(reply.json()["session_id"].as_str().unwrap_or_default().to_string())
}

async fn message(app: &Router, session: &str, text: &str) -> Reply {
    call(
        app,
        Method::POST,
        &format!("/v1/sessions/{session}/messages"),
        Some(json!({"text": text})),
    )
    .await
}

/// Runs the whole suite; returns the names of the checks that passed, or the first failure.
pub async fn run_suite(data_root: &Path) -> Result<Vec<&'static str>, String> {
    let mut passed = Vec::new();
    let chat = Arc::new(MockChatProvider::synthetic().without_request_log());
    inferred_review(&chat);
    inferred_review(&chat);
    let manual = Config {
        evolution_mode: EvolutionMode::Manual,
        ..Config::default()
    };
    let (app, _) = app_with(&data_root.join("manual"), manual, chat);

    let r = send(&app, Method::GET, "/v1/skills?user_id=alice", None, None).await;
    ensure(r.status == StatusCode::UNAUTHORIZED, "missing token must be 401")?;
    let r = send(&app, Method::GET, "/v1/skills?user_id=alice", None, Some("wrong")).await;
    ensure(r.status == StatusCode::UNAUTHORIZED, "wrong token must be 401")?;
    passed.push("bearer token enforced");

    let r = call(&app, Method::POST, "/v1/sessions", Some(json!({"user_id": "../etc"}))).await;
    ensure(r.status == StatusCode::BAD_REQUEST, format!("bad user id gave {}", r.status))?;
    let s1 = new_session(&app, "alice").await?;
    ensure(data_root.join("manual/alice/USER.md").is_file(), "workspace not materialized")?;
    let s2 = new_session(&app, "alice").await?;
    ensure(s1 != s2, "second session reused the id")?;
    passed.push("create_session");

    let r = message(&app, &s1, "Please prepare a quotation for 300 LED lamps to Chile").await;
    ensure(r.status == StatusCode::OK, format!("message status {}", r.status))?;
    ensure(r.content_type.starts_with("text/event-stream"), "not an SSE stream")?;
    let events = r.events();
    let (first, data) = events.first().ok_or("empty stream")?;
    ensure(
        first == "match_result" && data["stage"] == "keyword" && data["confidence"] == 1.0,
        format!("first event {first} {data}"),
    )?;
    ensure(events.iter().any(|(n, _)| n == "delta"), "no delta events")?;
    let (last, summary) = events.last().unwrap();
    ensure(
        last == "turn_summary" && summary["skill_used"] == "quotation" && summary["success"] == true,
        format!("last event {last} {summary}"),
    )?;
    let skill_turn = summary["turn_index"].as_u64().ok_or("turn_index missing")?;
    passed.push("post_message streams ordered events");

    let r = message(&app, "no-such-session", "hi").await;
    ensure(r.status == StatusCode::NOT_FOUND, "unknown session must be 404")?;

    let before = call(&app, Method::GET, "/v1/skills/quotation?user_id=alice", None).await.json();
    let feedback_uri = format!("/v1/sessions/{s1}/feedback");
    let r = call(&app, Method::POST, &feedback_uri, Some(json!({"turn_index": skill_turn, "positive": false}))).await;
    ensure(r.status == StatusCode::OK && r.json()["changed"] == true, format!("feedback {}", r.status))?;
    let after = call(&app, Method::GET, "/v1/skills/quotation?user_id=alice", None).await.json();
    ensure(
        after["success_count"].as_u64().unwrap_or(99) + 1 == before["success_count"].as_u64().unwrap_or(0),
        "negative feedback did not lower success_count",
    )?;
    let r = call(&app, Method::POST, &feedback_uri, Some(json!({"turn_index": skill_turn, "positive": false}))).await;
    ensure(r.status == StatusCode::OK && r.json()["changed"] == false, "repeated feedback must be a no-op")?;
    let r = call(&app, Method::POST, &feedback_uri, Some(json!({"turn_index": 999, "positive": true}))).await;
    ensure(r.status == StatusCode::NOT_FOUND, format!("unknown turn gave {}", r.status))?;
    let plain = message(&app, &s1, "hello there").await.events();
    let plain_turn = plain.last().map(|(_, d)| d["turn_index"].as_u64().unwrap_or(0)).unwrap_or(0);
    ensure(plain.last().map(|(_, d)| d["skill_used"].is_null()) == Some(true), "plain turn used a skill")?;
    let r = call(&app, Method::POST, &feedback_uri, Some(json!({"turn_index": plain_turn, "positive": true}))).await;
    ensure(r.status == StatusCode::UNPROCESSABLE_ENTITY, format!("skill-less feedback gave {}", r.status))?;
    passed.push("feedback");

    let r = call(&app, Method::GET, "/v1/skills?user_id=alice", None).await;
    let skills = r.json()["skills"].as_array().cloned().unwrap_or_default();
    ensure(r.status == StatusCode::OK && !skills.is_empty(), "skill list empty")?;
    ensure(skills.iter().all(|s| s["maturity"].is_string()), "maturity missing in list")?;
    let r = call(&app, Method::GET, "/v1/skills", None).await;
    ensure(r.status == StatusCode::BAD_REQUEST, "list without user must be 400")?;
    let r = call(&app, Method::GET, "/v1/skills/nope?user_id=alice", None).await;
    ensure(r.status == StatusCode::NOT_FOUND, "missing skill must be 404")?;

    let put = |name: &str, text: &str| {
        let uri = format!("/v1/skills/{name}?user_id=alice");
        let text = text.to_string();
        let app = app.clone();
        async move { send(&app, Method::PUT, &uri, Some(text), Some(TOKEN)).await }
    };
    let r = put("incoterms", "no front matter").await;
    ensure(r.status == StatusCode::BAD_REQUEST, format!("malformed put gave {}", r.status))?;
    let r = put("incoterms", "---\nname: other\ndescription: x\n---\nbody\n").await;
    ensure(r.status == StatusCode::BAD_REQUEST, "name mismatch must be 400")?;
    let count = call(&app, Method::GET, "/v1/skills?user_id=alice", None).await.json()["skills"]
        .as_array()
        .map_or(0, Vec::len);
    ensure(count == skills.len(), "malformed put changed the store")?;
    let r = put(
        "incoterms",
        "---\nname: incoterms\ndescription: Explain Incoterms rules.\ntriggers:\n- incoterm\n---\n1. Pick the rule.\n",
    )
    .await;
    ensure(r.status == StatusCode::CREATED, format!("valid put gave {}", r.status))?;
    let r = call(&app, Method::GET, "/v1/skills/incoterms?user_id=alice", None).await;
    ensure(r.status == StatusCode::OK && r.json()["maturity"] == "Budding", "new skill not readable")?;
    let r = call(&app, Method::DELETE, "/v1/skills/incoterms?user_id=alice", None).await;
    ensure(r.status == StatusCode::NO_CONTENT, "delete failed")?;
    let r = call(&app, Method::DELETE, "/v1/skills/incoterms?user_id=alice", None).await;
    ensure(r.status == StatusCode::NOT_FOUND, "second delete must be 404")?;
    passed.push("skills crud");

    let r = call(&app, Method::GET, "/v1/users/alice/memory", None).await;
    ensure(
        r.status == StatusCode::OK && r.json()["user"].is_string() && r.json()["memory"].is_string(),
        "memory read",
    )?;
    let r = call(&app, Method::GET, "/v1/users/..%2Fx/memory", None).await;
    ensure(r.status == StatusCode::BAD_REQUEST, "memory with bad user must be 400")?;
    passed.push("memory read");

    let r = call(&app, Method::POST, &format!("/v1/sessions/{s1}/evolve"), None).await;
    ensure(r.status == StatusCode::CONFLICT, format!("evolve on open session gave {}", r.status))?;
    let r = call(&app, Method::POST, &format!("/v1/sessions/{s1}/end"), None).await;
    ensure(r.status == StatusCode::OK && r.json()["evolution"] == "pending", "manual end")?;
    let r = call(&app, Method::POST, &format!("/v1/sessions/{s1}/end"), None).await;
    ensure(r.status == StatusCode::CONFLICT, "second end must be 409")?;
    let r = message(&app, &s1, "more").await;
    ensure(r.status == StatusCode::CONFLICT, "message after end must be 409")?;
    let r = call(&app, Method::POST, &feedback_uri, Some(json!({"turn_index": skill_turn, "positive": true}))).await;
    ensure(r.status == StatusCode::CONFLICT, "feedback after end must be 409")?;
    let ws = Workspace::open(&data_root.join("manual"), "alice").map_err(|e| e.to_string())?;
    ensure(!evolution_path(&ws, &s1).exists(), "manual mode evolved before trigger")?;
    let r = call(&app, Method::POST, &format!("/v1/sessions/{s1}/evolve"), None).await;
    ensure(r.status == StatusCode::OK && r.json()["status"] == "applied", format!("evolve {}", r.status))?;
    ensure(evolution_path(&ws, &s1).exists(), "evolution artifact missing")?;
    let r = call(&app, Method::POST, &format!("/v1/sessions/{s1}/evolve"), None).await;
    ensure(r.json()["status"] == "already_evolved", "second evolve must be a no-op")?;
    passed.push("end and manual evolve");

    let r = call(&app, Method::POST, &format!("/v1/sessions/{s2}/end"), None).await;
    ensure(r.status == StatusCode::OK, "end s2")?;
    let r = call(&app, Method::POST, &format!("/v1/sessions/{s2}/evolve"), None).await;
    ensure(r.status == StatusCode::OK, "evolve s2")?;
    let r = call(&app, Method::GET, "/v1/users/alice/suggestions", None).await;
    let suggestions = r.json()["suggestions"].as_array().cloned().unwrap_or_default();
    ensure(suggestions.len() == 1, format!("expected one suggestion, got {}", suggestions.len()))?;
    let sid = suggestions[0]["id"].as_str().unwrap_or_default().to_string();
    let confirm_uri = format!("/v1/suggestions/{sid}/confirm");
    let r = call(&app, Method::POST, "/v1/suggestions/unknown/confirm", Some(json!({"user_id": "alice"}))).await;
    ensure(r.status == StatusCode::NOT_FOUND, "unknown suggestion must be 404")?;
    let r = call(&app, Method::POST, &confirm_uri, Some(json!({"user_id": "alice", "accept": true}))).await;
    ensure(r.status == StatusCode::OK, format!("confirm gave {}", r.status))?;
    let memory = call(&app, Method::GET, "/v1/users/alice/memory", None).await.json();
    ensure(
        memory["user"].as_str().unwrap_or_default().contains("Prefers CIF pricing"),
        "confirmed suggestion not applied",
    )?;
    let r = call(&app, Method::POST, &confirm_uri, Some(json!({"user_id": "alice"}))).await;
    ensure(r.status == StatusCode::NOT_FOUND, "suggestion confirmed twice")?;
    passed.push("suggestions");

    let r = call(&app, Method::GET, "/v1/users/alice/rewards", None).await;
    let rewards = r.json();
    ensure(
        r.status == StatusCode::OK && rewards["rewards"].as_array().map_or(0, Vec::len) == 2,
        format!("rewards {rewards}"),
    )?;
    ensure(rewards["cumulative"].is_number(), "cumulative reward missing")?;
    passed.push("rewards");

    let auto = Config {
        evolution_mode: EvolutionMode::Auto,
        ..Config::default()
    };
    let (auto_app, auto_state) = app_with(
        &data_root.join("auto"),
        auto,
        Arc::new(MockChatProvider::synthetic().without_request_log()),
    );
    let s = new_session(&auto_app, "bob").await?;
    message(&auto_app, &s, "what is the hs code for ceramic tiles").await;
    let r = call(&auto_app, Method::POST, &format!("/v1/sessions/{s}/end"), None).await;
    ensure(r.json()["evolution"] == "scheduled", "auto end must schedule")?;
    tokio::task::spawn_blocking(move || auto_state.jobs.wait_idle()).await.ok();
    let ws = Workspace::open(&data_root.join("auto"), "bob").map_err(|e| e.to_string())?;
    ensure(evolution_path(&ws, &s).exists(), "auto evolution artifact missing")?;
    passed.push("auto evolution");

    let failing = Arc::new(MockChatProvider::synthetic().without_request_log());
    failing.push_error(ChatPurpose::Agent, "upstream down");
    let (fail_app, _) = app_with(&data_root.join("fail"), Config::default(), failing);
    let s = new_session(&fail_app, "carol").await?;
    let events = message(&fail_app, &s, "hello").await.events();
    let names: Vec<&str> = events.iter().map(|(n, _)| n.as_str()).collect();
    let error_at = names.iter().position(|n| *n == "error");
    ensure(
        error_at.is_some() && names.last() == Some(&"turn_summary") && events.last().unwrap().1["success"] == false,
        format!("provider failure events {names:?}"),
    )?;
    passed.push("provider failure surfaces as error event");

    let small = Config {
        max_tokens: 1024,
        retain_recent: 2,
        ..Config::default()
    };
    let (small_app, _) = app_with(
        &data_root.join("small"),
        small,
        Arc::new(MockChatProvider::synthetic().without_request_log()),
    );
    let s = new_session(&small_app, "dave").await?;
    let long = "Please compare freight options for our container of ceramic tiles. ".repeat(20);
    let mut saw_compression = false;
    for _ in 0..4 {
        let events = message(&small_app, &s, &long).await.events();
        saw_compression |= events.iter().any(|(n, _)| n == "compression");
    }
    ensure(saw_compression, "no compression event over budget")?;
    passed.push("compression event");

    Ok(passed)
}
