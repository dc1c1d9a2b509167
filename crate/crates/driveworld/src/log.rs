//! Line-delimited JSON episode logs.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::WorldError;
use crate::idm::IdmParams;
use crate::vehicle::VehicleState;
use crate::world::Cause;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrafficSnapshot {
    pub id: u64,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogRecord {
    Spawn {
        step: usize,
        id: u64,
        route: Option<usize>,
        s: f64,
        speed: f64,
        idm: IdmParams,
        politeness: f64,
    },
    Step {
        step: usize,
        ego: VehicleState,
        action: [f64; 2],
        reward: f64,
        cause: Cause,
        traffic: Vec<TrafficSnapshot>,
    },
}

pub fn write_jsonl<W: Write>(mut w: W, records: &[LogRecord]) -> Result<(), WorldError> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| WorldError::Io(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| WorldError::Io(e.to_string()))?;
    }
    Ok(())
}

pub fn read_jsonl(text: &str) -> Result<Vec<LogRecord>, WorldError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| WorldError::Io(e.to_string())))
        .collect()
}
