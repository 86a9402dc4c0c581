//! Door controller for the sorting bin.
//!
//! Classifications arrive one frame at a time. A recyclable item has to be
//! seen `stability_window` frames in a row at or above the confidence
//! threshold before its container opens. A hand in view, at any confidence,
//! parks the controller in `HandHold` and the streak starts over.

use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::labels::WasteClass;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub stability_window: u32,
    pub confidence_threshold: f32,
    pub sort_timeout: u32,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            stability_window: 3,
            confidence_threshold: 0.6,
            sort_timeout: 50,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), BinError> {
        if self.stability_window == 0 {
            return Err(BinError::BadConfig("stability_window must be at least 1".into()));
        }
        if self.sort_timeout == 0 {
            return Err(BinError::BadConfig("sort_timeout must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(BinError::BadConfig("confidence_threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum BinEvent {
    Classified { label: WasteClass, confidence: f32 },
    SortComplete,
    Timeout,
    Tick,
}

impl BinEvent {
    pub fn classified(label: WasteClass, confidence: f32) -> Self {
        BinEvent::Classified { label, confidence }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BinEvent::Classified { .. } => "classified",
            BinEvent::SortComplete => "sort_complete",
            BinEvent::Timeout => "timeout",
            BinEvent::Tick => "tick",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum BinState {
    Idle,
    Observing { candidate: WasteClass, streak: u32 },
    HandHold,
    Sorting { container: WasteClass, elapsed: u32 },
}

impl fmt::Display for BinState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BinState::Idle => f.write_str("idle"),
            BinState::Observing { candidate, streak } => write!(f, "observing({candidate},{streak})"),
            BinState::HandHold => f.write_str("hand_hold"),
            BinState::Sorting { container, elapsed } => write!(f, "sorting({container},{elapsed})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", content = "container", rename_all = "snake_case")]
pub enum Action {
    OpenDoor(WasteClass),
    Alarm,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BinError {
    #[error("event {event} is not valid in state {state}")]
    InvalidTransition { state: BinState, event: &'static str },
    #[error("confidence {0} outside [0, 1]")]
    BadConfidence(f32),
    #[error("invalid controller config: {0}")]
    BadConfig(String),
    #[error("trace line {line}: {detail}")]
    BadTrace { line: usize, detail: String },
}

/// One transition. On error the caller keeps the old state.
pub fn step(state: BinState, event: BinEvent, config: &ControllerConfig) -> Result<(BinState, Vec<Action>), BinError> {
    use BinState::*;
    let invalid = || BinError::InvalidTransition {
        state,
        event: event.name(),
    };
    match event {
        BinEvent::Classified { label, confidence } => {
            if !(0.0..=1.0).contains(&confidence) {
                return Err(BinError::BadConfidence(confidence));
            }
            if let Sorting { .. } = state {
                return Ok((state, vec![]));
            }
            if label == WasteClass::Hand {
                return Ok((HandHold, vec![]));
            }
            if confidence < config.confidence_threshold || label == WasteClass::Empty {
                return Ok((Idle, vec![]));
            }
            let streak = match state {
                Observing { candidate, streak } if candidate == label => streak + 1,
                _ => 1,
            };
            if streak >= config.stability_window {
                Ok((
                    Sorting {
                        container: label,
                        elapsed: 0,
                    },
                    vec![Action::OpenDoor(label)],
                ))
            } else {
                Ok((
                    Observing {
                        candidate: label,
                        streak,
                    },
                    vec![],
                ))
            }
        }
        BinEvent::SortComplete => match state {
            Sorting { .. } => Ok((Idle, vec![])),
            _ => Err(invalid()),
        },
        BinEvent::Timeout => match state {
            Sorting { .. } => Ok((Idle, vec![Action::Alarm])),
            _ => Err(invalid()),
        },
        BinEvent::Tick => match state {
            Sorting { container, elapsed } => {
                let elapsed = elapsed + 1;
                if elapsed >= config.sort_timeout {
                    Ok((Idle, vec![Action::Alarm]))
                } else {
                    Ok((Sorting { container, elapsed }, vec![]))
                }
            }
            _ => Ok((state, vec![])),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub index: usize,
    #[serde(flatten)]
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Outcome {
    Action { action: Action },
    Rejected { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub final_state: BinState,
    pub log: Vec<LogEntry>,
}

impl ScenarioResult {
    pub fn doors_opened(&self) -> impl Iterator<Item = (usize, WasteClass)> + '_ {
        self.log.iter().filter_map(|e| match e.outcome {
            Outcome::Action {
                action: Action::OpenDoor(c),
            } => Some((e.index, c)),
            _ => None,
        })
    }
}

/// Fold `step` over `script` from `Idle`. Rejected events are logged and
/// leave the state unchanged.
pub fn run_scenario(script: &[BinEvent], config: &ControllerConfig) -> ScenarioResult {
    let mut state = BinState::Idle;
    let mut log = Vec::new();
    for (index, &event) in script.iter().enumerate() {
        match step(state, event, config) {
            Ok((next, actions)) => {
                state = next;
                log.extend(actions.into_iter().map(|action| LogEntry {
                    index,
                    outcome: Outcome::Action { action },
                }));
            }
            Err(e) => log.push(LogEntry {
                index,
                outcome: Outcome::Rejected { error: e.to_string() },
            }),
        }
    }
    ScenarioResult {
        final_state: state,
        log,
    }
}

/// Parse an `event,label,confidence` trace. Header row optional; label and
/// confidence are only read for `classified` rows.
pub fn read_trace(reader: impl Read) -> Result<Vec<BinEvent>, BinError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut events = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 1;
        let bad = |detail: String| BinError::BadTrace { line, detail };
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let kind = rec.get(0).unwrap_or("");
        let ev = match kind {
            "event" if i == 0 => continue,
            "" => continue,
            "classified" => {
                let label = rec
                    .get(1)
                    .unwrap_or("")
                    .parse::<WasteClass>()
                    .map_err(|e| bad(e.to_string()))?;
                let confidence = rec
                    .get(2)
                    .unwrap_or("")
                    .parse::<f32>()
                    .map_err(|e| bad(format!("confidence: {e}")))?;
                if !(0.0..=1.0).contains(&confidence) {
                    return Err(bad(format!("confidence {confidence} outside [0, 1]")));
                }
                BinEvent::Classified { label, confidence }
            }
            "sort_complete" => BinEvent::SortComplete,
            "timeout" => BinEvent::Timeout,
            "tick" => BinEvent::Tick,
            other => return Err(bad(format!("unknown event {other:?}"))),
        };
        events.push(ev);
    }
    Ok(events)
}

pub fn write_trace(events: &[BinEvent], writer: impl Write) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["event", "label", "confidence"])?;
    for e in events {
        match e {
            BinEvent::Classified { label, confidence } => {
                w.write_record([e.name(), label.as_str(), &confidence.to_string()])?
            }
            _ => w.write_record([e.name(), "", ""])?,
        }
    }
    w.flush()
}

/// Action log as `index,action,container,detail` CSV.
pub fn write_log(log: &[LogEntry], writer: impl Write) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["index", "action", "container", "detail"])?;
    for e in log {
        let index = e.index.to_string();
        let row: [&str; 4] = match &e.outcome {
            Outcome::Action {
                action: Action::OpenDoor(c),
            } => [&index, "open_door", c.as_str(), ""],
            Outcome::Action { action: Action::Alarm } => [&index, "alarm", "", ""],
            Outcome::Rejected { error } => [&index, "rejected", "", error],
        };
        w.write_record(row)?;
    }
    w.flush()
}
