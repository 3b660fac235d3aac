//! REST surface tests against an in-process server on an ephemeral port.

use std::sync::Arc;

use chrono::Duration;
use cwb::clock::{Clock, SimClock};
use cwb::gateway::{allowed_actions, router, AppState};
use cwb::orchestrator::{Orchestrator, OrchestratorConfig};
use cwb::providers::{FaultPlan, ProviderRegistry, SimulatedDriver};
use cwb::statemachine::{allowed_events, replay, ExecutionEvent, ExecutionState};
use cwb::store::Store;
use reqwest::blocking::{Client, RequestBuilder, Response};
use reqwest::StatusCode;
use serde_json::{json, Value};

const TOKEN: &str = "operator-secret";

struct TestServer {
    base: String,
    state: Arc<AppState>,
    clock: SimClock,
    http: Client,
    _rt: tokio::runtime::Runtime,
}

impl TestServer {
    fn start(plan: FaultPlan) -> Self {
        let clock = SimClock::at_epoch();
        let orch = Orchestrator::new(
            OrchestratorConfig::default(),
            Store::with_secret("gateway-tests"),
            ProviderRegistry::new().with(SimulatedDriver::new(plan)),
        );
        let state =
            Arc::new(AppState::new(orch, Arc::new(clock.clone())).with_operator_token(Some(TOKEN.into())));
        let rt = tokio::runtime::Runtime::new().unwrap();
        let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
        let addr = listener.local_addr().unwrap();
        let app = router(state.clone());
        rt.spawn(async move { axum::serve(listener, app).await });
        Self {
            base: format!("http://{addr}"),
            state,
            clock,
            http: Client::new(),
            _rt: rt,
        }
    }

    fn api(&self, method: reqwest::Method, path: &str) -> RequestBuilder {
        self.http
            .request(method, format!("{}/api{path}", self.base))
            .bearer_auth(TOKEN)
    }

    fn get(&self, path: &str) -> Response {
        self.api(reqwest::Method::GET, path).send().unwrap()
    }

    fn post(&self, path: &str, body: Value) -> Response {
        self.api(reqwest::Method::POST, path).json(&body).send().unwrap()
    }

    fn agent(&self, path: &str, token: &str) -> RequestBuilder {
        self.http
            .request(reqwest::Method::PUT, format!("{}/agent{path}", self.base))
            .bearer_auth(token)
    }

    /// Advances simulated time one second per tick.
    fn advance(&self, secs: i64) {
        for _ in 0..secs {
            self.clock.advance(Duration::seconds(1));
            self.state.tick();
        }
    }

    fn execution(&self, id: &str) -> Value {
        let r = self.get(&format!("/executions/{id}"));
        assert_eq!(r.status(), StatusCode::OK);
        r.json().unwrap()
    }

    fn create_benchmark(&self, doc: Value) -> String {
        let r = self.post("/benchmarks", doc);
        assert_eq!(r.status(), StatusCode::CREATED);
        let b: Value = r.json().unwrap();
        b["id"].as_str().unwrap().to_owned()
    }

    fn trigger(&self, bench: &str) -> String {
        let r = self.post(&format!("/benchmarks/{bench}/executions"), json!({}));
        assert_eq!(r.status(), StatusCode::CREATED);
        let v: Value = r.json().unwrap();
        v["id"].as_str().unwrap().to_owned()
    }
}

fn doc(timeout: u32, grace: u32) -> Value {
    json!({
        "name": "fio sequential write",
        "timeout_minutes": timeout,
        "release_grace_minutes": grace,
        "vms": [{
            "role": "driver", "provider": "simulated", "region": "eu-west-1",
            "instance_type": "m1.small", "image": "ami-896c96fe"
        }],
        "provisioning": [{"role": "driver", "recipe": "fio-benchmark@0.3.0", "attributes": {}}],
        "metrics": [
            {"name": "cpu_model", "scale": "nominal", "unit": null},
            {"name": "seq_write_bandwidth_kbps", "scale": "ratio", "unit": "KB/s"}
        ]
    })
}

fn error_kind(r: Response) -> (StatusCode, String) {
    let status = r.status();
    let body: Value = r.json().unwrap();
    assert!(body["message"].is_string(), "error body without message: {body}");
    (status, body["error"].as_str().unwrap().to_owned())
}

fn parse_events(v: &Value) -> Vec<ExecutionEvent> {
    v["events"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| serde_json::from_value(e["event"].clone()).unwrap())
        .collect()
}

/// The view must agree with a replay of its own event log.
fn assert_view_consistent(v: &Value) {
    let r = replay(parse_events(v)).unwrap();
    let state: ExecutionState = serde_json::from_value(v["state"].clone()).unwrap();
    assert_eq!(state, r.state);
    assert_eq!(v["displayed_status"], r.displayed().display_name());
    assert_eq!(v["dev_mode"], r.dev_mode);
    let allowed: Vec<ExecutionEvent> = serde_json::from_value(v["allowed_events"].clone()).unwrap();
    assert_eq!(allowed, allowed_events(state, r.dev_mode));
    let actions: Vec<String> = serde_json::from_value(v["allowed_actions"].clone()).unwrap();
    assert_eq!(actions, allowed_actions(state, r.dev_mode));
}

#[test]
fn health_is_open_and_api_requires_the_operator_token() {
    let s = TestServer::start(FaultPlan::with_seed(1));
    let r = s.http.get(format!("{}/api/health", s.base)).send().unwrap();
    assert_eq!(r.status(), StatusCode::OK);

    let r = s.http.get(format!("{}/api/benchmarks", s.base)).send().unwrap();
    assert_eq!(error_kind(r), (StatusCode::UNAUTHORIZED, "unauthorized".into()));
    let r = s
        .http
        .get(format!("{}/api/benchmarks", s.base))
        .bearer_auth("wrong")
        .send()
        .unwrap();
    assert_eq!(r.status(), StatusCode::UNAUTHORIZED);
    assert_eq!(s.get("/benchmarks").status(), StatusCode::OK);
}

#[test]
fn definition_errors_are_422_with_details() {
    let s = TestServer::start(FaultPlan::with_seed(1));
    let mut bad = doc(60, 30);
    bad["vms"][0]["provider"] = json!("nimbus");
    bad["metrics"][1]["scale"] = json!("loudness");
    let r = s.post("/benchmarks", bad);
    assert_eq!(r.status(), StatusCode::UNPROCESSABLE_ENTITY);
    let body: Value = r.json().unwrap();
    assert_eq!(body["error"], "invalid_definition");
    assert!(body["details"].as_array().unwrap().len() >= 2, "{body}");
}

#[test]
fn unknown_ids_are_404() {
    let s = TestServer::start(FaultPlan::with_seed(1));
    assert_eq!(
        error_kind(s.get("/benchmarks/bench-missing")),
        (StatusCode::NOT_FOUND, "benchmark_not_found".into())
    );
    assert_eq!(
        error_kind(s.get("/executions/exec-missing")),
        (StatusCode::NOT_FOUND, "execution_not_found".into())
    );
    let r = s.post("/benchmarks/bench-missing/executions", json!({}));
    assert_eq!(r.status(), StatusCode::NOT_FOUND);
}

#[test]
fn inactive_benchmark_trigger_is_409() {
    let s = TestServer::start(FaultPlan::with_seed(1));
    let b = s.create_benchmark(doc(60, 30));
    let r = s
        .api(reqwest::Method::PUT, &format!("/benchmarks/{b}/active"))
        .json(&json!({"active": false}))
        .send()
        .unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    let r = s.post(&format!("/benchmarks/{b}/executions"), json!({}));
    assert_eq!(error_kind(r), (StatusCode::CONFLICT, "benchmark_inactive".into()));
}

#[test]
fn execution_view_matches_replay_throughout_a_run() {
    let s = TestServer::start(FaultPlan::with_seed(2));
    let b = s.create_benchmark(doc(60, 30));
    let id = s.trigger(&b);
    let mut seen = Vec::new();
    for _ in 0..600 {
        let v = s.execution(&id);
        assert_view_consistent(&v);
        let st = v["state"].as_str().unwrap().to_owned();
        if seen.last() != Some(&st) {
            seen.push(st.clone());
        }
        if st == "FINISHED" {
            break;
        }
        s.advance(1);
    }
    assert_eq!(seen.last().map(String::as_str), Some("FINISHED"));
    assert!(seen.contains(&"RUNNING".to_owned()), "{seen:?}");

    let v = s.execution(&id);
    assert!(v["observation_count"].as_u64().unwrap() >= 21);
    let metrics: Value = s.get(&format!("/executions/{id}/metrics")).json().unwrap();
    assert_eq!(metrics.as_array().unwrap().len() as u64, v["observation_count"].as_u64().unwrap());

    let r = s.get(&format!("/executions/{id}/metrics.csv"));
    assert_eq!(r.headers()["content-type"], "text/csv");
    let csv = r.text().unwrap();
    assert!(csv.lines().next().unwrap().contains("metric"));
    assert_eq!(csv.lines().count() as u64, 1 + v["observation_count"].as_u64().unwrap());

    let leaked: Value = s.get("/resources/leaked").json().unwrap();
    assert_eq!(leaked, json!([]));
}

#[test]
fn log_cursor_is_monotonic_and_never_repeats_lines() {
    let s = TestServer::start(FaultPlan::with_seed(3));
    let b = s.create_benchmark(doc(60, 30));
    let id = s.trigger(&b);
    let mut cursor = 0u64;
    let mut collected = Vec::new();
    loop {
        let page: Value = s.get(&format!("/executions/{id}/log?after={cursor}")).json().unwrap();
        let next = page["cursor"].as_u64().unwrap();
        let lines = page["lines"].as_array().unwrap();
        assert!(next >= cursor);
        assert_eq!(next - cursor, lines.len() as u64);
        collected.extend(lines.iter().map(|l| l.as_str().unwrap().to_owned()));
        cursor = next;
        if page["terminal"] == true && lines.is_empty() {
            break;
        }
        s.advance(5);
    }
    let full: Value = s.get(&format!("/executions/{id}/log")).json().unwrap();
    let full: Vec<String> = serde_json::from_value(full["lines"].clone()).unwrap();
    assert_eq!(collected, full);
    assert!(!collected.is_empty());
}

#[test]
fn agent_endpoints_check_tokens_and_acknowledge_duplicates() {
    let s = TestServer::start(FaultPlan {
        hang_prob: 1.0,
        ..FaultPlan::with_seed(4)
    });
    let b = s.create_benchmark(doc(60, 30));
    let id = s.trigger(&b);
    s.advance(30);
    assert_eq!(s.execution(&id)["state"], "RUNNING");
    let token = s.state.lock().agent_token(&id.as_str().into());

    let body = json!({"event": "finished_running"});
    let r = s.agent(&format!("/executions/{id}/state"), "forged").json(&body).send().unwrap();
    assert_eq!(r.status(), StatusCode::UNAUTHORIZED);
    let r = s.agent("/executions/exec-missing/state", &token).json(&body).send().unwrap();
    assert_eq!(r.status(), StatusCode::NOT_FOUND);

    let r = s.agent(&format!("/executions/{id}/state"), &token).json(&json!({"event": "started_releasing"})).send().unwrap();
    assert_eq!(error_kind(r), (StatusCode::CONFLICT, "conflict".into()));

    let metric = json!({"metric": "seq_write_bandwidth_kbps", "value": 51234.5, "offset_ms": 500, "submission_id": "s-1"});
    let post_metric = || {
        s.http
            .post(format!("{}/agent/executions/{id}/metrics", s.base))
            .bearer_auth(&token)
            .json(&metric)
            .send()
            .unwrap()
    };
    let first: Value = post_metric().json().unwrap();
    assert_eq!(first["duplicate"], false);
    let again: Value = post_metric().json().unwrap();
    assert_eq!(again["duplicate"], true);

    let csv = "metric,value,offset_ms\nseq_write_bandwidth_kbps,48000,1000\nseq_write_bandwidth_kbps,47000,1500\n";
    let post_csv = || {
        s.http
            .post(format!("{}/agent/executions/{id}/metrics/csv", s.base))
            .bearer_auth(&token)
            .header("x-batch-id", "batch-1")
            .body(csv)
            .send()
            .unwrap()
    };
    let ack: Value = post_csv().json().unwrap();
    assert_eq!((ack["duplicate"].clone(), ack["count"].clone()), (json!(false), json!(2)));
    let ack: Value = post_csv().json().unwrap();
    assert_eq!(ack["duplicate"], true);

    let bad = json!({"metric": "seq_write_bandwidth_kbps", "value": "fast"});
    let r = s
        .http
        .post(format!("{}/agent/executions/{id}/metrics", s.base))
        .bearer_auth(&token)
        .json(&bad)
        .send()
        .unwrap();
    assert_eq!(r.status(), StatusCode::UNPROCESSABLE_ENTITY);

    let ack: Value = s.agent(&format!("/executions/{id}/state"), &token).json(&body).send().unwrap().json().unwrap();
    assert_eq!(ack["duplicate"], false);
    let ack: Value = s.agent(&format!("/executions/{id}/state"), &token).json(&body).send().unwrap().json().unwrap();
    assert_eq!(ack["duplicate"], true);
    assert_eq!(s.get(&format!("/executions/{id}/metrics")).json::<Value>().unwrap().as_array().unwrap().len(), 3);
}

#[test]
fn operator_actions_follow_allowed_actions() {
    let s = TestServer::start(FaultPlan {
        hang_prob: 1.0,
        ..FaultPlan::with_seed(5)
    });
    let b = s.create_benchmark(doc(10, 5));
    let id = s.trigger(&b);
    s.advance(30);
    let v = s.execution(&id);
    assert_eq!(v["state"], "RUNNING");
    assert_eq!(v["allowed_actions"], json!(["enter_dev_mode"]));
    let r = s.post(&format!("/executions/{id}/release"), json!({}));
    assert_eq!(error_kind(r), (StatusCode::CONFLICT, "invalid_state".into()));
    let r = s.api(reqwest::Method::DELETE, &format!("/executions/{id}/dev_mode")).send().unwrap();
    assert_eq!(error_kind(r), (StatusCode::CONFLICT, "not_in_dev_mode".into()));

    s.advance(10 * 60);
    let v = s.execution(&id);
    assert_eq!(v["state"], "FAILED_ON_RUNNING");
    assert_eq!(v["allowed_actions"], json!(["enter_dev_mode", "release"]));

    let r = s.post(&format!("/executions/{id}/dev_mode"), json!({}));
    assert_eq!(r.status(), StatusCode::OK);
    let v: Value = r.json().unwrap();
    assert_view_consistent(&v);
    assert_eq!(v["allowed_actions"], json!(["exit_dev_mode", "reprovision", "release"]));
    let r = s.post(&format!("/executions/{id}/dev_mode"), json!({}));
    assert_eq!(r.status(), StatusCode::CONFLICT);

    // Held well past the grace.
    s.advance(30 * 60);
    assert_eq!(s.execution(&id)["state"], "FAILED_ON_RUNNING");

    let r = s.post(&format!("/executions/{id}/reprovision"), json!({}));
    assert_eq!(r.status(), StatusCode::OK);
    let v: Value = r.json().unwrap();
    assert_view_consistent(&v);
    assert_eq!(v["displayed_status"], "FAILED ON RUNNING");

    s.advance(60);
    let r = s.post(&format!("/executions/{id}/release"), json!({}));
    let st = r.status();
    let v: Value = r.json().unwrap();
    if st == StatusCode::OK {
        assert_view_consistent(&v);
    } else {
        // The reprovisioned run may not have failed yet; leave dev mode instead.
        assert_eq!(st, StatusCode::CONFLICT);
        let r = s.api(reqwest::Method::DELETE, &format!("/executions/{id}/dev_mode")).send().unwrap();
        assert_eq!(r.status(), StatusCode::OK);
    }
    s.advance(60 * 60);
    let v = s.execution(&id);
    assert_eq!(v["state"], "FINISHED");
    assert_eq!(v["displayed_status"], "FAILED ON RUNNING");
    assert_eq!(v["allowed_actions"], json!([]));
    let r = s.post(&format!("/executions/{id}/release"), json!({}));
    assert_eq!(error_kind(r), (StatusCode::CONFLICT, "already_terminal".into()));
    let r = s.post(&format!("/executions/{id}/reprovision"), json!({}));
    assert_eq!(r.status(), StatusCode::CONFLICT);
}

#[test]
fn listing_filters_and_variability() {
    let s = TestServer::start(FaultPlan::with_seed(6));
    let b = s.create_benchmark(doc(60, 30));
    let other = s.create_benchmark(doc(60, 30));
    let r = s.get(&format!("/benchmarks/{b}/metrics/seq_write_bandwidth_kbps/variability"));
    assert_eq!(error_kind(r), (StatusCode::CONFLICT, "insufficient_data".into()));

    let ids: Vec<String> = (0..3).map(|_| s.trigger(&b)).collect();
    s.trigger(&other);
    s.advance(20 * 60);

    let all: Value = s.get(&format!("/executions?benchmark={b}")).json().unwrap();
    let listed: Vec<&str> = all.as_array().unwrap().iter().map(|e| e["id"].as_str().unwrap()).collect();
    assert_eq!(listed.len(), 3);
    assert!(ids.iter().all(|id| listed.contains(&id.as_str())));
    let finished: Value = s.get("/executions?state=FINISHED").json().unwrap();
    assert_eq!(finished.as_array().unwrap().len(), 4);
    let r = s.get("/executions?state=SLEEPING");
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);

    let r = s.get(&format!("/benchmarks/{b}/metrics/seq_write_bandwidth_kbps/variability?group=m1.small"));
    assert_eq!(r.status(), StatusCode::OK);
    let row: Value = r.json().unwrap();
    assert_eq!(row["executions"], 3);
    assert_eq!(row["group"], "m1.small");
    let rendered = row["rendered"].as_str().unwrap();
    assert!(rendered.ends_with("%)") && rendered.contains("% ("), "{rendered}");
    let r = s.get(&format!("/benchmarks/{b}/metrics/cpu_model/variability"));
    assert_eq!(r.status(), StatusCode::UNPROCESSABLE_ENTITY);
}

#[test]
fn clone_applies_overrides_and_reports_bad_paths() {
    let s = TestServer::start(FaultPlan::with_seed(7));
    let b = s.create_benchmark(doc(60, 30));
    let r = s.post(
        &format!("/benchmarks/{b}/clone"),
        json!({"overrides": {"vms[0].instance_type": "m3.medium"}}),
    );
    assert_eq!(r.status(), StatusCode::CREATED);
    let c: Value = r.json().unwrap();
    assert_ne!(c["id"], json!(b));
    assert_eq!(c["vms"][0]["instance_type"], "m3.medium");
    assert_eq!(c["name"], "fio sequential write (copy)");

    let r = s.post(&format!("/benchmarks/{b}/clone"), json!({"overrides": {"vms[7].region": "x"}}));
    assert_eq!(r.status(), StatusCode::UNPROCESSABLE_ENTITY);
    let listed: Value = s.get("/benchmarks").json().unwrap();
    assert_eq!(listed.as_array().unwrap().len(), 2);
}

#[test]
fn recipes_can_be_listed_and_added() {
    let s = TestServer::start(FaultPlan::with_seed(8));
    let listed: Value = s.get("/recipes").json().unwrap();
    assert!(listed.as_array().unwrap().iter().any(|r| r["name"] == "fio-benchmark"));
    let recipe = json!({
        "name": "hello", "version": "1.0.0", "default_attributes": {"who": "world"},
        "steps": [{"kind": "write_file", "path": "/hello.txt", "content": "hi {{who}}"}]
    });
    let r = s.post("/recipes", recipe);
    assert_eq!(r.status(), StatusCode::CREATED);
    let v: Value = r.json().unwrap();
    assert_eq!(v["recipe"], "hello@1.0.0");
    let r = s.post("/recipes", json!({"name": "broken"}));
    assert_eq!(r.status(), StatusCode::UNPROCESSABLE_ENTITY);
}

#[test]
fn clock_advance_is_refused_without_a_simulated_server_clock() {
    let s = TestServer::start(FaultPlan::with_seed(9));
    let now: Value = s.get("/clock").json().unwrap();
    assert_eq!(now["simulated"], false);
    assert_eq!(now["now"], json!(s.clock.now()));
    let r = s.post("/clock/advance", json!({"seconds": 60}));
    assert_eq!(error_kind(r), (StatusCode::CONFLICT, "real_clock".into()));
}
