//! Validates a benchmark definition, prints the normalized document and
//! derives a variant per instance type.
//!
//! cargo run --example define_benchmark [path/to/definition.json]

use std::collections::BTreeMap;

use cwb::model::{clone_with_overrides, validate_definition, BenchmarkId, ValidationContext};
use serde_json::{json, Value};

fn main() {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/examples/assets/fio-simulated.json").to_owned());
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(&path).expect("readable file")).expect("json");
    let ctx = ValidationContext::default();

    let base = match validate_definition(&doc, &ctx) {
        Ok(d) => d,
        Err(errs) => {
            for e in &errs.0 {
                eprintln!("invalid: {e}");
            }
            std::process::exit(1);
        }
    };
    println!("{}", serde_json::to_string_pretty(&base.to_document()).unwrap());
    println!(
        "timeout {} min, grace {} min, roles {:?}",
        base.timeout_minutes,
        base.release_grace_minutes,
        base.roles().collect::<Vec<_>>()
    );

    for (i, ty) in ["t1.micro", "m1.small", "m3.medium"].iter().enumerate() {
        let overrides = BTreeMap::from([
            ("vms[0].instance_type".to_owned(), json!(ty)),
            ("name".to_owned(), json!(format!("{} on {ty}", base.name))),
        ]);
        let clone = clone_with_overrides(&base, &overrides, &ctx, BenchmarkId::from(format!("bench-variant-{i}")))
            .expect("override applies");
        println!("{:<18} {:<10} {}", clone.id, clone.vms[0].instance_type, clone.name);
    }

    // Every problem is reported at once, each with its path.
    let mut broken = doc.clone();
    broken["timeout_minutes"] = json!(0);
    broken["vms"][0]["provider"] = json!("nowhere");
    broken["metrics"][1]["scale"] = json!("loud");
    if let Err(errs) = validate_definition(&broken, &ctx) {
        println!("broken copy rejected with {} errors:", errs.0.len());
        for e in &errs.0 {
            println!("  {e}");
        }
    }
}
