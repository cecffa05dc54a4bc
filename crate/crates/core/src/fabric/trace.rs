//! Structured execution traces: one JSON record per line.

use serde::{Deserialize, Serialize};
use std::io::Write;

/// One trace line. Times are virtual µs-equivalents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceRecord {
    /// First line of every trace: units and encoding versions.
    Meta {
        time_unit: String,
        wire_version: u16,
        seed: u64,
        processes: u32,
    },
    /// A memory operation applied at its target region.
    Apply {
        t_us: f64,
        process: u32,
        initiator: u32,
        op: String,
        slot: u64,
        old: u64,
        new: u64,
    },
    /// A completion delivered back to the initiator.
    Complete {
        t_us: f64,
        process: u32,
        ticket: u64,
        op: String,
        slot: u64,
    },
    /// A two-sided message delivered.
    Deliver {
        t_us: f64,
        process: u32,
        src: u32,
        bytes: usize,
        tag: u8,
    },
    /// A process crashed.
    Crash { t_us: f64, process: u32 },
    /// Crash notification observed by a correct process.
    Crashed {
        t_us: f64,
        process: u32,
        crashed: u32,
    },
    /// Proposer phase summary: what was expected/installed per acceptor and
    /// how the phase ended.
    Phase {
        t_us: f64,
        process: u32,
        slot: u64,
        phase: String,
        proposal: u64,
        expected: Vec<u64>,
        desired: Vec<u64>,
        read: Vec<Option<u64>>,
        outcome: String,
    },
    Decide {
        t_us: f64,
        process: u32,
        slot: u64,
        value: u8,
    },
    /// An acceptor slot switched from CAS ownership to its message handler.
    Handoff {
        t_us: f64,
        process: u32,
        slot: u64,
        word: u64,
    },
    LeaderChange {
        t_us: f64,
        process: u32,
        leader: u32,
    },
}

impl TraceRecord {
    pub fn time_us(&self) -> Option<f64> {
        match self {
            TraceRecord::Meta { .. } => None,
            TraceRecord::Apply { t_us, .. }
            | TraceRecord::Complete { t_us, .. }
            | TraceRecord::Deliver { t_us, .. }
            | TraceRecord::Crash { t_us, .. }
            | TraceRecord::Crashed { t_us, .. }
            | TraceRecord::Phase { t_us, .. }
            | TraceRecord::Decide { t_us, .. }
            | TraceRecord::Handoff { t_us, .. }
            | TraceRecord::LeaderChange { t_us, .. } => Some(*t_us),
        }
    }
}

/// Where trace lines go. The in-memory sink doubles as the audit input for
/// tests; scenario runs write straight to a file.
pub enum TraceSink {
    Null,
    Memory(Vec<TraceRecord>),
    Writer(Box<dyn Write>),
}

impl std::fmt::Debug for TraceSink {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TraceSink::Null => write!(f, "TraceSink::Null"),
            TraceSink::Memory(v) => write!(f, "TraceSink::Memory({} records)", v.len()),
            TraceSink::Writer(_) => write!(f, "TraceSink::Writer"),
        }
    }
}

impl TraceSink {
    pub fn push(&mut self, record: TraceRecord) {
        match self {
            TraceSink::Null => {}
            TraceSink::Memory(v) => v.push(record),
            TraceSink::Writer(w) => {
                let line = serde_json::to_string(&record).expect("trace records always serialize");
                writeln!(w, "{line}").expect("trace write failed");
            }
        }
    }

    pub fn records(&self) -> &[TraceRecord] {
        match self {
            TraceSink::Memory(v) => v,
            _ => &[],
        }
    }
}
