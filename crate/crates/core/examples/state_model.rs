//! Walks executions (starting after `created`) through the lifecycle and prints the allowed events and
//! displayed status after each step.
//!
//! cargo run --example state_model

use cwb::statemachine::{allowed_events, replay, ExecutionEvent as E, Replayed};

fn show(title: &str, events: &[E]) {
    println!("== {title}");
    let mut r = Replayed::start();
    println!("  {:<30} -> {}", "created", r.state.as_str());
    for &ev in events {
        match r.step(ev) {
            Ok(()) => {
                let allowed: Vec<_> = allowed_events(r.state, r.dev_mode).iter().map(|e| e.as_str()).collect();
                println!(
                    "  {:<30} -> {:<32} shown {:<34} next {:?}",
                    ev.as_str(),
                    r.state.as_str(),
                    r.displayed().display_name(),
                    allowed
                );
            }
            Err(e) => {
                println!("  {:<30} rejected: {e}", ev.as_str());
                return;
            }
        }
    }
}

fn main() {
    show(
        "happy path",
        &[
            E::StartedPreparing,
            E::FinishedPreparing,
            E::StartedRunning,
            E::FinishedRunning,
            E::StartedPostprocessing,
            E::FinishedPostprocessing,
            E::FinishedReleasingResources,
        ],
    );
    show(
        "run hangs, dev mode keeps the resources",
        &[
            E::StartedPreparing,
            E::FinishedPreparing,
            E::StartedRunning,
            E::RunTimeoutElapsed,
            E::DevModeEntered,
            E::DevModeExited,
            E::ReleaseGraceElapsed,
            E::FinishedReleasingResources,
        ],
    );
    show(
        "release fails",
        &[E::StartedPreparing, E::FailedOnPreparing, E::ReleaseGraceElapsed, E::FailedOnReleasing],
    );
    show("illegal jump", &[E::StartedRunning]);

    let log = [E::Created, E::StartedPreparing, E::FailedOnPreparing, E::ReleaseGraceElapsed];
    let r = replay(log).expect("legal log");
    println!("replayed {:?}: state {}, first failure {:?}", log, r.state, r.first_failure);
}
