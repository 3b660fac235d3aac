//! Applies the bundled fio recipe to a local sandbox twice and shows that
//! the second pass changes nothing.
//!
//! cargo run --example provision_idempotence

use cwb::agent::AgentConfig;
use cwb::clock::{Clock, SimClock};
use cwb::model::{validate_definition, ExecutionId, ValidationContext};
use cwb::providers::{Driver, LocalDriver, LocalDriverConfig, Readiness};
use cwb::provisioning::{self, ApplyContext, RecipeRegistry};
use serde_json::Value;

fn main() {
    let root = std::env::temp_dir().join(format!("cwb-provision-example-{}", std::process::id()));
    let mut driver = LocalDriver::new(LocalDriverConfig::new(&root)).expect("sandbox root");
    let now = SimClock::at_epoch().now();

    let doc: Value = serde_json::from_str(include_str!("assets/fio-local.json")).expect("asset json");
    let def = validate_definition(&doc, &ValidationContext::default()).expect("valid");
    let owner = ExecutionId::from("exec-provision-example");
    let vm = driver.acquire(&owner, &def.vms[0], now).expect("acquire")[0].id.clone();
    if let Readiness::NotBefore(t) = driver.await_ready(&vm, now).expect("ready") {
        panic!("sandbox not ready until {t}");
    }

    let registry = RecipeRegistry::with_bundled();
    let recipes = provisioning::resolve(&registry, &def, "driver").expect("recipes resolve");
    let ctx = ApplyContext {
        agent: AgentConfig {
            server: "http://127.0.0.1:9".into(),
            execution_id: owner,
            token: "example".into(),
            role: "driver".into(),
        },
    };
    println!("sandbox {}", driver.sandbox_dir(&vm).unwrap().display());
    for pass in 1..=2 {
        let report = provisioning::apply(&mut driver, &vm, &recipes, &ctx, now);
        println!("pass {pass}: {} changed, {} skipped", report.changed(), report.skipped());
        for step in &report.steps {
            println!("  {:<16} {:<10} {}", step.kind, format!("{:?}", step.outcome), step.description);
        }
        if let Some(e) = report.failure() {
            eprintln!("provisioning failed: {e}");
            break;
        }
    }
    driver.release(&vm, now).expect("release");
    let _ = std::fs::remove_dir_all(&root);
}
