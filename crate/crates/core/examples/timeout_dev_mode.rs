//! A run that never finishes: the timeout fails it, the grace period
//! releases it, and dev mode holds the resources until an operator acts.
//!
//! cargo run --example timeout_dev_mode

use chrono::Duration;
use cwb::clock::{Clock, Instant, SimClock};
use cwb::model::{ExecutionId, TriggerCause};
use cwb::orchestrator::{Orchestrator, OrchestratorConfig};
use cwb::providers::{FaultPlan, ProviderRegistry, SimulatedDriver};
use cwb::store::Store;
use serde_json::Value;

fn setup() -> (Orchestrator, ExecutionId, SimClock, Instant) {
    let plan = FaultPlan {
        hang_prob: 1.0,
        ..FaultPlan::with_seed(3)
    };
    let clock = SimClock::at_epoch();
    let mut orch = Orchestrator::new(
        OrchestratorConfig::default(),
        Store::new(),
        ProviderRegistry::new().with(SimulatedDriver::new(plan)),
    );
    let mut doc: Value = serde_json::from_str(include_str!("assets/fio-simulated.json")).expect("asset json");
    doc.as_object_mut().unwrap().remove("schedule");
    doc["timeout_minutes"] = 10.into();
    let bench = orch.create_benchmark(&doc, clock.now()).expect("valid").id;
    let t0 = clock.now();
    let id = orch.trigger(&bench, TriggerCause::Manual, t0).expect("trigger");
    (orch, id, clock, t0)
}

fn advance(orch: &mut Orchestrator, clock: &SimClock, until: Instant) {
    while clock.now() < until {
        clock.advance(Duration::seconds(1));
        orch.tick(clock.now());
    }
}

fn report(orch: &Orchestrator, id: &ExecutionId, t0: Instant, label: &str) {
    let e = orch.execution(id).expect("execution");
    println!("-- {label}: {} (shown {})", e.state, e.displayed_status());
    for l in &e.event_log {
        println!("   t+{:>4}s {}", (l.at - t0).num_seconds(), l.event.as_str());
    }
}

fn main() {
    let (mut orch, id, clock, t0) = setup();
    advance(&mut orch, &clock, t0 + Duration::minutes(20));
    report(&orch, &id, t0, "left alone for 20 minutes");
    println!("   leaked: {}", orch.leaked_resources().len());

    let (mut orch, id, clock, t0) = setup();
    advance(&mut orch, &clock, t0 + Duration::minutes(11));
    orch.enter_dev_mode(&id, clock.now()).expect("dev mode");
    advance(&mut orch, &clock, t0 + Duration::hours(2));
    let held = orch.execution(&id).unwrap().resources.len();
    report(&orch, &id, t0, "dev mode entered at t+11m, two hours later");
    println!("   {held} resources still held");
    orch.release_now(&id, clock.now()).expect("release");
    advance(&mut orch, &clock, clock.now() + Duration::minutes(1));
    report(&orch, &id, t0, "after release_now");
}
