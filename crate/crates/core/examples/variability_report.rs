//! Runs a benchmark repeatedly on three instance types in the simulated
//! provider and prints the across-execution variability of each.
//!
//! cargo run --example variability_report [executions-per-type]

use std::collections::BTreeMap;

use chrono::Duration;
use cwb::clock::{Clock, SimClock};
use cwb::model::TriggerCause;
use cwb::orchestrator::{Orchestrator, OrchestratorConfig};
use cwb::providers::{FaultPlan, ProviderRegistry, SimulatedDriver};
use cwb::store::Store;
use serde_json::{json, Value};

const METRIC: &str = "seq_write_bandwidth_kbps";

fn main() {
    let n: usize = std::env::args().nth(1).map_or(10, |s| s.parse().expect("count"));
    let clock = SimClock::at_epoch();
    let mut orch = Orchestrator::new(
        OrchestratorConfig::default(),
        Store::new(),
        ProviderRegistry::new().with(SimulatedDriver::new(FaultPlan::with_seed(2024))),
    );
    let mut doc: Value = serde_json::from_str(include_str!("assets/fio-simulated.json")).expect("asset json");
    doc.as_object_mut().unwrap().remove("schedule");
    let base = orch.create_benchmark(&doc, clock.now()).expect("valid").id;

    let mut benches = vec![("m1.small", base.clone())];
    for ty in ["t1.micro", "m3.medium"] {
        let overrides = BTreeMap::from([
            ("vms[0].instance_type".to_owned(), json!(ty)),
            ("name".to_owned(), json!(format!("fio on {ty}"))),
        ]);
        let clone = orch.clone_benchmark(&base, &overrides, clock.now()).expect("clone");
        benches.push((ty, clone.id));
    }
    for (_, b) in &benches {
        for _ in 0..n {
            orch.trigger(b, TriggerCause::Manual, clock.now()).expect("trigger");
        }
    }
    orch.run_until_idle(clock.now(), clock.now() + Duration::days(2));

    println!("{:<12} {:<20} {:>8} {:>16} {:>10}", "TYPE", "CV ACROSS (WITHIN)", "ACROSS", "WITHIN", "EXECUTIONS");
    for (ty, b) in &benches {
        match orch.variability(b, METRIC) {
            Ok(row) => println!(
                "{:<12} {:<20} {:>7.2}% {:>6.2}-{:>6.2}% {:>10}",
                ty,
                row.render(),
                row.across_cv_pct,
                row.within_cv_min_pct,
                row.within_cv_max_pct,
                row.executions
            ),
            Err(e) => println!("{ty:<12} {e}"),
        }
    }
    let sample = orch
        .executions(&Default::default())
        .find(|e| e.benchmark_id == base)
        .map(|e| e.id.clone())
        .expect("an execution");
    let csv = orch.metrics_csv(&sample).expect("csv");
    println!("\nfirst rows of {sample}:");
    for line in csv.lines().take(5) {
        println!("  {line}");
    }
}
