//! Full lifecycle on this machine: an in-process server, the local sandbox
//! provider, the bundled fio recipe and the agent calling back over HTTP.
//!
//! Needs the `cwb` binary (it is synced into the sandbox as the agent):
//!
//! cargo build --bin cwb && cargo run --example local_fio_run

use std::net::TcpListener;
use std::path::PathBuf;
use std::time::Duration;

use cwb::client::ApiClient;
use cwb::gateway::{build_state, router, spawn_ticker, ServerConfig};
use serde_json::Value;

fn agent_binary() -> PathBuf {
    // target/<profile>/examples/local_fio_run -> target/<profile>/cwb
    let exe = std::env::current_exe().expect("current exe");
    let bin = exe.parent().and_then(|p| p.parent()).expect("target dir").join("cwb");
    if !bin.exists() {
        eprintln!("{} not found; run `cargo build --bin cwb` first", bin.display());
        std::process::exit(1);
    }
    bin
}

fn main() {
    let sandboxes = std::env::temp_dir().join(format!("cwb-local-example-{}", std::process::id()));
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let cfg = ServerConfig {
        bind: format!("127.0.0.1:{port}").parse().unwrap(),
        simulated: false,
        local_root: Some(sandboxes.clone()),
        agent_binary: Some(agent_binary()),
        ..ServerConfig::default()
    };
    let state = build_state(&cfg).expect("server state");

    let rt = tokio::runtime::Runtime::new().expect("runtime");
    let st = state.clone();
    rt.spawn(async move {
        let listener = tokio::net::TcpListener::bind(cfg.bind).await.expect("bind");
        spawn_ticker(st.clone());
        axum::serve(listener, router(st)).await.expect("serve");
    });

    let api = ApiClient::new(format!("http://127.0.0.1:{port}"), None).unwrap();
    while api.get("/api/health").is_err() {
        std::thread::sleep(Duration::from_millis(50));
    }
    let doc: Value = serde_json::from_str(include_str!("assets/fio-local.json")).expect("asset json");
    let bench = api.post("/api/benchmarks", &doc).expect("create benchmark");
    let bid = bench["id"].as_str().unwrap();
    let exec = api.post(&format!("/api/benchmarks/{bid}/executions"), &Value::Null).expect("trigger");
    let id = exec["id"].as_str().unwrap().to_owned();
    println!("triggered {id}");

    let mut last = String::new();
    let view = loop {
        let v = api.get(&format!("/api/executions/{id}")).expect("execution");
        let shown = v["displayed_status"].as_str().unwrap_or_default().to_owned();
        if shown != last {
            println!("  {shown}");
            last = shown;
        }
        if matches!(v["state"].as_str(), Some("FINISHED" | "FAILED_ON_RELEASING")) {
            break v;
        }
        std::thread::sleep(Duration::from_millis(250));
    };
    println!("final state {} shown {}", view["state"], view["displayed_status"]);

    let csv = api.get_text(&format!("/api/executions/{id}/metrics.csv")).expect("metrics");
    let bw: Vec<f64> = csv
        .lines()
        .filter(|l| l.starts_with("seq_write_bandwidth_kbps,"))
        .filter_map(|l| l.split(',').nth(1)?.parse().ok())
        .collect();
    for line in csv.lines().filter(|l| l.starts_with("cpu_model,")) {
        println!("{line}");
    }
    if !bw.is_empty() {
        let mean = bw.iter().sum::<f64>() / bw.len() as f64;
        println!("{} bandwidth samples, mean {mean:.0} KB/s", bw.len());
    }
    let leaked = api.get("/api/resources/leaked").expect("leaked");
    println!("leaked resources: {leaked}");
    drop(rt);
    let _ = std::fs::remove_dir_all(&sandboxes);
}
