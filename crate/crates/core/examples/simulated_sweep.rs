//! Runs batches of executions against the simulated provider under
//! increasing fault rates and tallies outcomes and leaked resources.
//!
//! cargo run --example simulated_sweep [executions-per-plan]

use std::collections::BTreeMap;

use chrono::Duration;
use cwb::clock::{Clock, SimClock};
use cwb::model::TriggerCause;
use cwb::orchestrator::{Orchestrator, OrchestratorConfig};
use cwb::providers::{FaultPlan, ProviderRegistry, SimulatedDriver};
use cwb::store::Store;
use serde_json::Value;

fn definition() -> Value {
    let text = include_str!("assets/fio-simulated.json");
    let mut doc: Value = serde_json::from_str(text).expect("asset json");
    // Manual triggers only.
    doc.as_object_mut().unwrap().remove("schedule");
    doc
}

fn main() {
    let n: usize = std::env::args().nth(1).map_or(50, |s| s.parse().expect("count"));
    for p in [0.0, 0.05, 0.2, 0.5] {
        let plan = FaultPlan {
            acquire_failure_prob: p,
            provision_failure_prob: p,
            run_failure_prob: p,
            release_failure_prob: p / 2.0,
            ..FaultPlan::with_seed(7)
        };
        let clock = SimClock::at_epoch();
        let mut orch = Orchestrator::new(
            OrchestratorConfig::default(),
            Store::new(),
            ProviderRegistry::new().with(SimulatedDriver::new(plan.clone())),
        );
        let bench = orch.create_benchmark(&definition(), clock.now()).expect("valid").id;
        let ids: Vec<_> = (0..n)
            .map(|_| orch.trigger(&bench, TriggerCause::Manual, clock.now()).expect("trigger"))
            .collect();
        let end = orch.run_until_idle(clock.now(), clock.now() + Duration::days(1));

        let mut tally: BTreeMap<String, usize> = BTreeMap::new();
        for id in &ids {
            let e = orch.execution(id).expect("execution");
            *tally.entry(format!("{:<20} shown {}", e.state.as_str(), e.displayed_status())).or_default() += 1;
        }
        let outcomes: Vec<String> = tally.iter().map(|(k, v)| format!("{v:>4} {k}")).collect();
        println!(
            "fault rates acquire/provision/run {p}, release {}: idle after {}s, {} leaked resources",
            plan.release_failure_prob,
            (end - clock.now()).num_seconds(),
            orch.leaked_resources().len()
        );
        for o in outcomes {
            println!("  {o}");
        }
    }
}
