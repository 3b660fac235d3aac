//! Execution lifecycle: states, events and the legal transition table.
//!
//! Everything here is pure. The orchestrator owns the single writer per
//! execution and feeds events through [`apply_event`]; display code derives
//! the experimenter-facing status from the log with [`displayed_status`].

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExecutionState {
    WaitingForStartPreparing,
    Preparing,
    FailedOnPreparing,
    WaitingForStartRunning,
    Running,
    FailedOnRunning,
    WaitingForStartPostprocessing,
    Postprocessing,
    FailedOnPostprocessing,
    ReleasingResources,
    FailedOnReleasing,
    Finished,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionEvent {
    Created,
    StartedPreparing,
    FailedOnPreparing,
    FinishedPreparing,
    StartedRunning,
    FailedOnRunning,
    FinishedRunning,
    StartedPostprocessing,
    FailedOnPostprocessing,
    FinishedPostprocessing,
    StartedReleasing,
    FailedOnReleasing,
    FinishedReleasingResources,
    RunTimeoutElapsed,
    ReleaseGraceElapsed,
    DevModeEntered,
    DevModeExited,
}

impl ExecutionState {
    pub const ALL: [ExecutionState; 12] = [
        Self::WaitingForStartPreparing,
        Self::Preparing,
        Self::FailedOnPreparing,
        Self::WaitingForStartRunning,
        Self::Running,
        Self::FailedOnRunning,
        Self::WaitingForStartPostprocessing,
        Self::Postprocessing,
        Self::FailedOnPostprocessing,
        Self::ReleasingResources,
        Self::FailedOnReleasing,
        Self::Finished,
    ];

    /// State entered by the `created` event.
    pub const INITIAL: ExecutionState = Self::WaitingForStartPreparing;

    pub fn as_str(self) -> &'static str {
        match self {
            Self::WaitingForStartPreparing => "WAITING_FOR_START_PREPARING",
            Self::Preparing => "PREPARING",
            Self::FailedOnPreparing => "FAILED_ON_PREPARING",
            Self::WaitingForStartRunning => "WAITING_FOR_START_RUNNING",
            Self::Running => "RUNNING",
            Self::FailedOnRunning => "FAILED_ON_RUNNING",
            Self::WaitingForStartPostprocessing => "WAITING_FOR_START_POSTPROCESSING",
            Self::Postprocessing => "POSTPROCESSING",
            Self::FailedOnPostprocessing => "FAILED_ON_POSTPROCESSING",
            Self::ReleasingResources => "RELEASING_RESOURCES",
            Self::FailedOnReleasing => "FAILED_ON_RELEASING",
            Self::Finished => "FINISHED",
        }
    }

    /// Human form used for status badges: underscores become spaces.
    pub fn display_name(self) -> String {
        self.as_str().replace('_', " ")
    }

    pub fn is_terminal(self) -> bool {
        is_terminal(self)
    }

    pub fn is_failure(self) -> bool {
        matches!(
            self,
            Self::FailedOnPreparing
                | Self::FailedOnRunning
                | Self::FailedOnPostprocessing
                | Self::FailedOnReleasing
        )
    }

    /// Failure states that still hold resources and wait for the release grace.
    pub fn is_held_failure(self) -> bool {
        matches!(
            self,
            Self::FailedOnPreparing | Self::FailedOnRunning | Self::FailedOnPostprocessing
        )
    }
}

impl fmt::Display for ExecutionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ExecutionState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().replace(' ', "_").to_ascii_uppercase();
        Self::ALL
            .iter()
            .copied()
            .find(|st| st.as_str() == norm)
            .ok_or_else(|| format!("unknown execution state `{s}`"))
    }
}

impl ExecutionEvent {
    pub const ALL: [ExecutionEvent; 17] = [
        Self::Created,
        Self::StartedPreparing,
        Self::FailedOnPreparing,
        Self::FinishedPreparing,
        Self::StartedRunning,
        Self::FailedOnRunning,
        Self::FinishedRunning,
        Self::StartedPostprocessing,
        Self::FailedOnPostprocessing,
        Self::FinishedPostprocessing,
        Self::StartedReleasing,
        Self::FailedOnReleasing,
        Self::FinishedReleasingResources,
        Self::RunTimeoutElapsed,
        Self::ReleaseGraceElapsed,
        Self::DevModeEntered,
        Self::DevModeExited,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Created => "created",
            Self::StartedPreparing => "started_preparing",
            Self::FailedOnPreparing => "failed_on_preparing",
            Self::FinishedPreparing => "finished_preparing",
            Self::StartedRunning => "started_running",
            Self::FailedOnRunning => "failed_on_running",
            Self::FinishedRunning => "finished_running",
            Self::StartedPostprocessing => "started_postprocessing",
            Self::FailedOnPostprocessing => "failed_on_postprocessing",
            Self::FinishedPostprocessing => "finished_postprocessing",
            Self::StartedReleasing => "started_releasing",
            Self::FailedOnReleasing => "failed_on_releasing",
            Self::FinishedReleasingResources => "finished_releasing_resources",
            Self::RunTimeoutElapsed => "run_timeout_elapsed",
            Self::ReleaseGraceElapsed => "release_grace_elapsed",
            Self::DevModeEntered => "dev_mode_entered",
            Self::DevModeExited => "dev_mode_exited",
        }
    }

    /// Events a benchmark agent may report; everything else is server-driven.
    pub fn is_agent_event(self) -> bool {
        matches!(
            self,
            Self::FinishedRunning
                | Self::FailedOnRunning
                | Self::FinishedPostprocessing
                | Self::FailedOnPostprocessing
        )
    }
}

impl fmt::Display for ExecutionEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ExecutionEvent {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().replace(' ', "_").to_ascii_lowercase();
        Self::ALL
            .iter()
            .copied()
            .find(|ev| ev.as_str() == norm)
            .ok_or_else(|| format!("unknown execution event `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransitionError {
    #[error("illegal transition: event `{event}` in state {state} (dev_mode={dev_mode})")]
    IllegalTransition {
        state: ExecutionState,
        event: ExecutionEvent,
        dev_mode: bool,
    },
    #[error("event log is empty")]
    EmptyLog,
    #[error("event log must begin with `created`, found `{0}`")]
    MissingCreated(ExecutionEvent),
}

/// Successor state for `event` applied in `state`.
///
/// `created` is the genesis event and is never legal from a state; replay a
/// log with [`replay`] to start from it.
pub fn apply_event(
    state: ExecutionState,
    event: ExecutionEvent,
    dev_mode: bool,
) -> Result<ExecutionState, TransitionError> {
    use ExecutionEvent as E;
    use ExecutionState as S;

    let next = match (state, event) {
        (S::WaitingForStartPreparing, E::StartedPreparing) => Some(S::Preparing),
        // A queued execution can fail before it ever gets a slot (deadline,
        // crash recovery); it then holds no resources.
        (S::WaitingForStartPreparing, E::FailedOnPreparing) => Some(S::FailedOnPreparing),

        (S::Preparing, E::FailedOnPreparing) => Some(S::FailedOnPreparing),
        (S::Preparing, E::FinishedPreparing) => Some(S::WaitingForStartRunning),

        (S::WaitingForStartRunning, E::StartedRunning) => Some(S::Running),
        (S::WaitingForStartRunning, E::FailedOnRunning) => Some(S::FailedOnRunning),

        (S::Running, E::RunTimeoutElapsed) => Some(S::FailedOnRunning),
        (S::Running, E::FailedOnRunning) => Some(S::FailedOnRunning),
        (S::Running, E::FinishedRunning) => Some(S::WaitingForStartPostprocessing),

        (S::WaitingForStartPostprocessing, E::StartedPostprocessing) => Some(S::Postprocessing),
        (S::WaitingForStartPostprocessing, E::FailedOnPostprocessing) => {
            Some(S::FailedOnPostprocessing)
        }

        (S::Postprocessing, E::FinishedPostprocessing) => Some(S::ReleasingResources),
        (S::Postprocessing, E::FailedOnPostprocessing) => Some(S::FailedOnPostprocessing),
        (S::Postprocessing, E::RunTimeoutElapsed) => Some(S::FailedOnPostprocessing),

        (s, E::ReleaseGraceElapsed) if s.is_held_failure() => {
            if dev_mode {
                Some(s)
            } else {
                Some(S::ReleasingResources)
            }
        }
        (s, E::StartedReleasing) if s.is_held_failure() => Some(S::ReleasingResources),
        // Reprovision loop while the experimenter holds the resources.
        (s, E::StartedPreparing) if s.is_held_failure() && dev_mode => Some(S::Preparing),

        (S::ReleasingResources, E::FinishedReleasingResources) => Some(S::Finished),
        (S::ReleasingResources, E::FailedOnReleasing) => Some(S::FailedOnReleasing),

        (s, E::DevModeEntered) if accepts_dev_toggle(s) && !dev_mode => Some(s),
        (s, E::DevModeExited) if accepts_dev_toggle(s) && dev_mode => Some(s),

        _ => None,
    };
    next.ok_or(TransitionError::IllegalTransition {
        state,
        event,
        dev_mode,
    })
}

fn accepts_dev_toggle(state: ExecutionState) -> bool {
    !state.is_terminal() && state != ExecutionState::ReleasingResources
}

pub fn is_terminal(state: ExecutionState) -> bool {
    matches!(
        state,
        ExecutionState::Finished | ExecutionState::FailedOnReleasing
    )
}

/// Every event `apply_event` accepts in this state, in declaration order.
pub fn allowed_events(state: ExecutionState, dev_mode: bool) -> Vec<ExecutionEvent> {
    ExecutionEvent::ALL
        .iter()
        .copied()
        .filter(|ev| apply_event(state, *ev, dev_mode).is_ok())
        .collect()
}

/// Result of replaying a complete event log.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Replayed {
    pub state: ExecutionState,
    pub dev_mode: bool,
    /// First failure state ever entered, if any.
    pub first_failure: Option<ExecutionState>,
}

impl Replayed {
    pub fn start() -> Self {
        Self {
            state: ExecutionState::INITIAL,
            dev_mode: false,
            first_failure: None,
        }
    }

    pub fn step(&mut self, event: ExecutionEvent) -> Result<(), TransitionError> {
        let next = apply_event(self.state, event, self.dev_mode)?;
        match event {
            ExecutionEvent::DevModeEntered => self.dev_mode = true,
            ExecutionEvent::DevModeExited => self.dev_mode = false,
            _ => {}
        }
        if next.is_failure() && self.first_failure.is_none() {
            self.first_failure = Some(next);
        }
        self.state = next;
        Ok(())
    }

    pub fn displayed(&self) -> ExecutionState {
        self.first_failure.unwrap_or(self.state)
    }
}

/// Replays a log that starts with `created`.
pub fn replay<I>(events: I) -> Result<Replayed, TransitionError>
where
    I: IntoIterator<Item = ExecutionEvent>,
{
    let mut iter = events.into_iter();
    match iter.next() {
        None => return Err(TransitionError::EmptyLog),
        Some(ExecutionEvent::Created) => {}
        Some(other) => return Err(TransitionError::MissingCreated(other)),
    }
    let mut r = Replayed::start();
    for ev in iter {
        r.step(ev)?;
    }
    Ok(r)
}

/// Status shown to the experimenter: the first failure state if the log
/// contains one, otherwise the current state. Names use spaces
/// (`"FAILED ON PREPARING"`).
pub fn displayed_status<I>(events: I) -> Result<String, TransitionError>
where
    I: IntoIterator<Item = ExecutionEvent>,
{
    replay(events).map(|r| r.displayed().display_name())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ExecutionEvent as E;
    use ExecutionState as S;

    #[test]
    fn started_preparing_enters_preparing() {
        assert_eq!(
            apply_event(S::WaitingForStartPreparing, E::StartedPreparing, false),
            Ok(S::Preparing)
        );
    }

    #[test]
    fn run_timeout_fails_running() {
        assert_eq!(
            apply_event(S::Running, E::RunTimeoutElapsed, false),
            Ok(S::FailedOnRunning)
        );
    }

    #[test]
    fn finished_accepts_nothing() {
        assert!(matches!(
            apply_event(S::Finished, E::StartedRunning, false),
            Err(TransitionError::IllegalTransition { .. })
        ));
        for ev in ExecutionEvent::ALL {
            assert!(apply_event(S::Finished, ev, false).is_err());
            assert!(apply_event(S::Finished, ev, true).is_err());
            assert!(apply_event(S::FailedOnReleasing, ev, false).is_err());
        }
    }

    #[test]
    fn dev_mode_holds_release_grace() {
        assert_eq!(
            apply_event(S::FailedOnPreparing, E::ReleaseGraceElapsed, true),
            Ok(S::FailedOnPreparing)
        );
        assert_eq!(
            apply_event(S::FailedOnPreparing, E::ReleaseGraceElapsed, false),
            Ok(S::ReleasingResources)
        );
    }

    #[test]
    fn terminal_set() {
        assert!(is_terminal(S::Finished));
        assert!(is_terminal(S::FailedOnReleasing));
        assert!(!is_terminal(S::FailedOnRunning));
        let terminals: Vec<_> = S::ALL.iter().filter(|s| is_terminal(**s)).collect();
        assert_eq!(terminals.len(), 2);
    }

    #[test]
    fn allowed_events_in_running() {
        assert_eq!(
            allowed_events(S::Running, false),
            vec![
                E::FailedOnRunning,
                E::FinishedRunning,
                E::RunTimeoutElapsed,
                E::DevModeEntered
            ]
        );
    }

    #[test]
    fn created_is_never_a_transition() {
        for s in S::ALL {
            assert!(apply_event(s, E::Created, false).is_err());
        }
    }

    #[test]
    fn displayed_status_uses_first_failure() {
        let log = [
            E::Created,
            E::StartedPreparing,
            E::FailedOnPreparing,
            E::ReleaseGraceElapsed,
            E::FinishedReleasingResources,
        ];
        assert_eq!(displayed_status(log).unwrap(), "FAILED ON PREPARING");
        assert_eq!(replay(log).unwrap().state, S::Finished);
    }

    #[test]
    fn displayed_status_finished_without_failure() {
        let log = [
            E::Created,
            E::StartedPreparing,
            E::FinishedPreparing,
            E::StartedRunning,
            E::FinishedRunning,
            E::StartedPostprocessing,
            E::FinishedPostprocessing,
            E::FinishedReleasingResources,
        ];
        assert_eq!(displayed_status(log).unwrap(), "FINISHED");
    }

    #[test]
    fn displayed_status_errors() {
        assert_eq!(
            displayed_status(std::iter::empty()),
            Err(TransitionError::EmptyLog)
        );
        assert_eq!(
            displayed_status([E::StartedPreparing]),
            Err(TransitionError::MissingCreated(E::StartedPreparing))
        );
    }

    #[test]
    fn names_round_trip() {
        for s in S::ALL {
            assert_eq!(s.as_str().parse::<S>().unwrap(), s);
            assert_eq!(s.display_name().parse::<S>().unwrap(), s);
            let json = serde_json::to_string(&s).unwrap();
            assert_eq!(json, format!("\"{}\"", s.as_str()));
        }
        for e in E::ALL {
            assert_eq!(e.as_str().parse::<E>().unwrap(), e);
            let json = serde_json::to_string(&e).unwrap();
            assert_eq!(json, format!("\"{}\"", e.as_str()));
        }
    }
}
