//! Deterministic simulated remote-memory-and-message fabric.
//!
//! Each process owns a memory region: one 64-bit slot word per consensus
//! slot, plus one write-exclusive payload buffer per (slot, writer) pair.
//! Remote operations (READ, CAS, WRITE, ordered WRITE+CAS) and two-sided
//! messages travel over per-direction links that deliver losslessly and in
//! FIFO order. A binary heap of `(virtual time, sequence)` keyed events
//! drives everything; with a fixed seed the event order is bit-identical
//! across runs.
//!
//! Crash semantics: a crashed process executes no further steps, its region
//! stops applying and completing operations, and in-flight completions from
//! it are lost. A crash notification reaches every correct process a fixed
//! detection delay later.

pub mod latency;
pub mod threaded;
pub mod trace;

use crate::msg::{Message, WIRE_VERSION};
use crate::types::{ProcessId, SlotWord};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

pub use latency::{Delay, LatencyModel, OpKind, VTime};
pub use trace::{TraceRecord, TraceSink};

pub type SlotIndex = u64;

/// Handle for an in-flight fabric operation. At most one completion is ever
/// delivered per ticket; operations on crashed targets never complete.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TicketId(pub u64);

/// What came back from a completed operation.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Completion {
    Read {
        word: SlotWord,
    },
    /// CAS (or the CAS half of WRITE+CAS): the word observed *before* the
    /// swap attempt, whether or not it matched.
    Cas {
        old: SlotWord,
    },
    Write,
    PayloadRead {
        bytes: Option<Vec<u8>>,
    },
}

/// One applied mutation or read on a region, for post-run audits.
#[derive(Debug, Clone, PartialEq)]
pub struct ApplyRecord {
    pub at: VTime,
    pub ticket: Option<TicketId>,
    pub owner: ProcessId,
    pub initiator: ProcessId,
    pub op: OpKind,
    pub slot: SlotIndex,
    pub old: SlotWord,
    pub new: SlotWord,
    /// For CAS records: whether the expected word matched.
    pub swapped: bool,
}

/// Everything a protocol handler may do to the outside world.
///
/// Implemented by the virtual-time fabric, the bounded checker, and the
/// real-thread harness, so protocol state machines stay driver-agnostic.
pub trait Port {
    fn me(&self) -> ProcessId;
    fn now(&self) -> VTime;
    fn post_read(&mut self, target: ProcessId, slot: SlotIndex) -> TicketId;
    fn post_payload_read(
        &mut self,
        target: ProcessId,
        slot: SlotIndex,
        writer: ProcessId,
    ) -> TicketId;
    fn post_cas(
        &mut self,
        target: ProcessId,
        slot: SlotIndex,
        expected: SlotWord,
        desired: SlotWord,
    ) -> TicketId;
    fn post_write(&mut self, target: ProcessId, slot: SlotIndex, payload: &[u8]) -> TicketId;
    /// Payload write applied strictly before the CAS, both carried by one
    /// delivery event with a single completion for the CAS.
    fn post_write_then_cas(
        &mut self,
        target: ProcessId,
        slot: SlotIndex,
        payload: &[u8],
        expected: SlotWord,
        desired: SlotWord,
    ) -> TicketId;
    fn send(&mut self, target: ProcessId, msg: Message);
    /// Deliver a wakeup to this process after `delay`.
    fn schedule(&mut self, delay: VTime, tag: u64);
    fn read_local_word(&self, slot: SlotIndex) -> SlotWord;
    fn read_local_payload(&self, slot: SlotIndex, writer: ProcessId) -> Option<Vec<u8>>;
    /// Number of slots in this process's own region.
    fn local_slots(&self) -> SlotIndex;
    /// Locally overwrite a word in this process's own region (the handoff
    /// fence). Returns the previous word.
    fn fence_local_word(&mut self, slot: SlotIndex, word: SlotWord) -> SlotWord;
    fn emit(&mut self, record: TraceRecord);
    /// Bump the fan-out round counters; `critical` marks rounds on the
    /// decision critical path.
    fn count_round(&mut self, critical: bool);
}

/// Event handlers for a simulated process. All methods default to no-ops.
pub trait Node {
    fn on_init(&mut self, _port: &mut dyn Port) {}
    fn on_completion(&mut self, _port: &mut dyn Port, _ticket: TicketId, _completion: Completion) {}
    fn on_message(&mut self, _port: &mut dyn Port, _src: ProcessId, _msg: Message) {}
    fn on_wakeup(&mut self, _port: &mut dyn Port, _tag: u64) {}
    fn on_crash_notice(&mut self, _port: &mut dyn Port, _crashed: ProcessId) {}
    /// The word at `slot` in this process's own region changed.
    fn on_local_update(&mut self, _port: &mut dyn Port, _slot: SlotIndex, _word: SlotWord) {}
}

/// Node that just records its inputs; the harness for driving protocol
/// state machines by hand.
#[derive(Debug, Default)]
pub struct InboxNode {
    pub completions: Vec<(TicketId, Completion)>,
    pub messages: Vec<(ProcessId, Message)>,
    pub wakeups: Vec<u64>,
    pub notices: Vec<ProcessId>,
}

impl Node for InboxNode {
    fn on_completion(&mut self, _port: &mut dyn Port, ticket: TicketId, completion: Completion) {
        self.completions.push((ticket, completion));
    }
    fn on_message(&mut self, _port: &mut dyn Port, src: ProcessId, msg: Message) {
        self.messages.push((src, msg));
    }
    fn on_wakeup(&mut self, _port: &mut dyn Port, tag: u64) {
        self.wakeups.push(tag);
    }
    fn on_crash_notice(&mut self, _port: &mut dyn Port, crashed: ProcessId) {
        self.notices.push(crashed);
    }
}

#[derive(Debug, Clone)]
pub struct FabricConfig {
    pub processes: u32,
    pub slots: u64,
    /// Maximum payload bytes per write-exclusive buffer.
    pub payload_capacity: usize,
    pub latency: LatencyModel,
    /// Delay between a crash and the notification reaching correct processes.
    pub detection_delay: VTime,
    pub seed: u64,
}

impl Default for FabricConfig {
    fn default() -> Self {
        FabricConfig {
            processes: 3,
            slots: 16,
            payload_capacity: 256,
            latency: LatencyModel::default(),
            detection_delay: VTime::from_us(30.0),
            seed: 0,
        }
    }
}

/// Per-process, per-kind operation counts plus protocol round counters.
#[derive(Debug, Clone)]
pub struct Counters {
    pub issued: Vec<[u64; 5]>,
    pub completed: Vec<[u64; 5]>,
    pub rounds: Vec<u64>,
    pub critical_rounds: Vec<u64>,
}

impl Counters {
    fn new(n: usize) -> Self {
        Counters {
            issued: vec![[0; 5]; n],
            completed: vec![[0; 5]; n],
            rounds: vec![0; n],
            critical_rounds: vec![0; n],
        }
    }

    fn kind_index(kind: OpKind) -> usize {
        OpKind::ALL.iter().position(|k| *k == kind).unwrap()
    }

    pub fn issued_total(&self, kind: OpKind) -> u64 {
        self.issued
            .iter()
            .map(|row| row[Self::kind_index(kind)])
            .sum()
    }

    pub fn completed_total(&self, kind: OpKind) -> u64 {
        self.completed
            .iter()
            .map(|row| row[Self::kind_index(kind)])
            .sum()
    }

    /// Flat `process.kind.issued/completed` rows for export.
    pub fn export(&self) -> Vec<(String, u64)> {
        let mut rows = Vec::new();
        for (p, (iss, comp)) in self.issued.iter().zip(&self.completed).enumerate() {
            for (k, kind) in OpKind::ALL.iter().enumerate() {
                rows.push((format!("p{p}.{}.issued", kind.name()), iss[k]));
                rows.push((format!("p{p}.{}.completed", kind.name()), comp[k]));
            }
            rows.push((format!("p{p}.rounds"), self.rounds[p]));
            rows.push((format!("p{p}.critical_rounds"), self.critical_rounds[p]));
        }
        rows
    }
}

#[derive(Debug, Clone)]
enum OpBody {
    Read,
    PayloadRead {
        writer: ProcessId,
    },
    Cas {
        expected: SlotWord,
        desired: SlotWord,
    },
    Write {
        bytes: Vec<u8>,
    },
    WriteCas {
        bytes: Vec<u8>,
        expected: SlotWord,
        desired: SlotWord,
    },
}

impl OpBody {
    fn kind(&self) -> OpKind {
        match self {
            OpBody::Read | OpBody::PayloadRead { .. } => OpKind::Read,
            OpBody::Cas { .. } => OpKind::Cas,
            OpBody::Write { .. } => OpKind::Write,
            OpBody::WriteCas { .. } => OpKind::WriteCas,
        }
    }
}

#[derive(Debug)]
enum Event {
    Apply {
        ticket: TicketId,
        initiator: ProcessId,
        target: ProcessId,
        slot: SlotIndex,
        body: OpBody,
    },
    Complete {
        ticket: TicketId,
        initiator: ProcessId,
        target: ProcessId,
        slot: SlotIndex,
        kind: OpKind,
        completion: Completion,
    },
    Deliver {
        src: ProcessId,
        dst: ProcessId,
        bytes: Vec<u8>,
    },
    Wakeup {
        process: ProcessId,
        tag: u64,
    },
    Notice {
        to: ProcessId,
        crashed: ProcessId,
    },
    CrashNow {
        process: ProcessId,
    },
    LocalUpdate {
        owner: ProcessId,
        slot: SlotIndex,
        word: SlotWord,
    },
}

#[derive(Debug)]
struct Scheduled {
    at: VTime,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.at == other.at && self.seq == other.seq
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

#[derive(Debug, Default, Clone)]
struct LinkState {
    last_apply: VTime,
    last_complete: VTime,
    issued: Vec<TicketId>,
    completed: Vec<TicketId>,
}

/// The deterministic virtual-time fabric.
#[derive(Debug)]
pub struct Fabric {
    cfg: FabricConfig,
    now: VTime,
    seq: u64,
    next_ticket: u64,
    heap: BinaryHeap<Reverse<Scheduled>>,
    words: Vec<Vec<SlotWord>>,
    payloads: Vec<BTreeMap<(SlotIndex, u32), Vec<u8>>>,
    links: Vec<LinkState>,
    alive: Vec<bool>,
    crash_time: Vec<Option<VTime>>,
    counters: Counters,
    apply_log: Vec<ApplyRecord>,
    pub trace: TraceSink,
}

impl Fabric {
    pub fn new(cfg: FabricConfig, trace: TraceSink) -> Fabric {
        let n = cfg.processes as usize;
        let mut fabric = Fabric {
            now: VTime::ZERO,
            seq: 0,
            next_ticket: 0,
            heap: BinaryHeap::new(),
            words: vec![vec![SlotWord::ZERO; cfg.slots as usize]; n],
            payloads: vec![BTreeMap::new(); n],
            links: vec![LinkState::default(); n * n],
            alive: vec![true; n],
            crash_time: vec![None; n],
            counters: Counters::new(n),
            apply_log: Vec::new(),
            trace,
            cfg,
        };
        fabric.trace.push(TraceRecord::Meta {
            time_unit: "virtual_us".to_string(),
            wire_version: WIRE_VERSION,
            seed: fabric.cfg.seed,
            processes: fabric.cfg.processes,
        });
        fabric
    }

    pub fn config(&self) -> &FabricConfig {
        &self.cfg
    }

    pub fn now(&self) -> VTime {
        self.now
    }

    pub fn processes(&self) -> u32 {
        self.cfg.processes
    }

    pub fn is_alive(&self, p: ProcessId) -> bool {
        self.alive[p.index()]
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    pub fn apply_log(&self) -> &[ApplyRecord] {
        &self.apply_log
    }

    pub fn word(&self, owner: ProcessId, slot: SlotIndex) -> SlotWord {
        self.words[owner.index()][slot as usize]
    }

    pub fn payload(&self, owner: ProcessId, slot: SlotIndex, writer: ProcessId) -> Option<&[u8]> {
        self.payloads[owner.index()]
            .get(&(slot, writer.0))
            .map(|v| v.as_slice())
    }

    /// Preset a word before the run starts (test and scenario setup only).
    pub fn preset_word(&mut self, owner: ProcessId, slot: SlotIndex, word: SlotWord) {
        assert_eq!(self.now, VTime::ZERO, "presets precede the run");
        self.words[owner.index()][slot as usize] = word;
    }

    /// Preset a payload buffer before the run starts.
    pub fn preset_payload(
        &mut self,
        owner: ProcessId,
        slot: SlotIndex,
        writer: ProcessId,
        bytes: Vec<u8>,
    ) {
        assert_eq!(self.now, VTime::ZERO, "presets precede the run");
        self.payloads[owner.index()].insert((slot, writer.0), bytes);
    }

    pub fn schedule_crash(&mut self, process: ProcessId, at: VTime) {
        let seq = self.bump_seq();
        self.heap.push(Reverse(Scheduled {
            at,
            seq,
            event: Event::CrashNow { process },
        }));
    }

    fn bump_seq(&mut self) -> u64 {
        let s = self.seq;
        self.seq += 1;
        s
    }

    fn link_index(&self, a: ProcessId, b: ProcessId) -> usize {
        a.index() * self.cfg.processes as usize + b.index()
    }

    fn push_at(&mut self, at: VTime, event: Event) {
        let seq = self.bump_seq();
        self.heap.push(Reverse(Scheduled { at, seq, event }));
    }

    fn post_op(
        &mut self,
        rng: &mut ChaCha8Rng,
        initiator: ProcessId,
        target: ProcessId,
        slot: SlotIndex,
        body: OpBody,
    ) -> TicketId {
        debug_assert!(self.alive[initiator.index()], "dead process posted an op");
        let ticket = TicketId(self.next_ticket);
        self.next_ticket += 1;
        let kind = body.kind();
        self.counters.issued[initiator.index()][Counters::kind_index(kind)] += 1;
        let link = self.link_index(initiator, target);
        self.links[link].issued.push(ticket);
        let delay = self
            .cfg
            .latency
            .one_way(kind, initiator == target, self.now, rng);
        let apply_at = (self.now + delay).max(self.links[link].last_apply);
        self.links[link].last_apply = apply_at;
        self.push_at(
            apply_at,
            Event::Apply {
                ticket,
                initiator,
                target,
                slot,
                body,
            },
        );
        ticket
    }

    fn post_message(&mut self, rng: &mut ChaCha8Rng, src: ProcessId, dst: ProcessId, msg: Message) {
        debug_assert!(self.alive[src.index()]);
        self.counters.issued[src.index()][Counters::kind_index(OpKind::Msg)] += 1;
        let bytes = msg.encode();
        let delay = self
            .cfg
            .latency
            .one_way(OpKind::Msg, src == dst, self.now, rng);
        let link = self.link_index(src, dst);
        let at = (self.now + delay).max(self.links[link].last_apply);
        self.links[link].last_apply = at;
        self.push_at(at, Event::Deliver { src, dst, bytes });
    }

    fn apply_cas(
        &mut self,
        ticket: TicketId,
        initiator: ProcessId,
        target: ProcessId,
        slot: SlotIndex,
        expected: SlotWord,
        desired: SlotWord,
    ) -> (SlotWord, bool) {
        let word = &mut self.words[target.index()][slot as usize];
        let old = *word;
        let swapped = old == expected;
        if swapped {
            *word = desired;
        }
        self.apply_log.push(ApplyRecord {
            at: self.now,
            ticket: Some(ticket),
            owner: target,
            initiator,
            op: OpKind::Cas,
            slot,
            old,
            new: if swapped { desired } else { old },
            swapped,
        });
        self.trace.push(TraceRecord::Apply {
            t_us: self.now.as_us(),
            process: target.0,
            initiator: initiator.0,
            op: "cas".into(),
            slot,
            old: old.0,
            new: if swapped { desired.0 } else { old.0 },
        });
        (old, swapped)
    }

    fn store_payload(
        &mut self,
        target: ProcessId,
        slot: SlotIndex,
        writer: ProcessId,
        bytes: Vec<u8>,
    ) {
        assert!(
            bytes.len() <= self.cfg.payload_capacity,
            "payload of {} bytes exceeds buffer capacity {}",
            bytes.len(),
            self.cfg.payload_capacity
        );
        self.payloads[target.index()].insert((slot, writer.0), bytes);
    }

    /// Apply one op at its target; returns the completion to route back.
    fn apply_body(
        &mut self,
        ticket: TicketId,
        initiator: ProcessId,
        target: ProcessId,
        slot: SlotIndex,
        body: OpBody,
    ) -> (Completion, Option<SlotWord>) {
        match body {
            OpBody::Read => {
                let word = self.words[target.index()][slot as usize];
                (Completion::Read { word }, None)
            }
            OpBody::PayloadRead { writer } => {
                let bytes = self.payloads[target.index()]
                    .get(&(slot, writer.0))
                    .cloned();
                (Completion::PayloadRead { bytes }, None)
            }
            OpBody::Cas { expected, desired } => {
                let (old, swapped) =
                    self.apply_cas(ticket, initiator, target, slot, expected, desired);
                (Completion::Cas { old }, swapped.then_some(desired))
            }
            OpBody::Write { bytes } => {
                self.store_payload(target, slot, initiator, bytes);
                (Completion::Write, None)
            }
            OpBody::WriteCas {
                bytes,
                expected,
                desired,
            } => {
                // The write half is unconditional and ordered before the CAS.
                self.store_payload(target, slot, initiator, bytes);
                let (old, swapped) =
                    self.apply_cas(ticket, initiator, target, slot, expected, desired);
                (Completion::Cas { old }, swapped.then_some(desired))
            }
        }
    }

    fn crash(&mut self, process: ProcessId) {
        if !self.alive[process.index()] {
            return;
        }
        self.alive[process.index()] = false;
        self.crash_time[process.index()] = Some(self.now);
        self.trace.push(TraceRecord::Crash {
            t_us: self.now.as_us(),
            process: process.0,
        });
        let notice_at = self.now + self.cfg.detection_delay;
        for p in 0..self.cfg.processes {
            if self.alive[p as usize] {
                self.push_at(
                    notice_at,
                    Event::Notice {
                        to: ProcessId(p),
                        crashed: process,
                    },
                );
            }
        }
    }

    /// Post-run sanity: counter consistency, per-link completion FIFO, and
    /// crash containment.
    pub fn audit(&self) -> Result<(), String> {
        for p in 0..self.cfg.processes as usize {
            for k in 0..5 {
                if self.counters.completed[p][k] > self.counters.issued[p][k] {
                    return Err(format!(
                        "p{p} kind {} completed {} > issued {}",
                        OpKind::ALL[k].name(),
                        self.counters.completed[p][k],
                        self.counters.issued[p][k]
                    ));
                }
            }
        }
        for (i, link) in self.links.iter().enumerate() {
            let mut cursor = 0usize;
            for done in &link.completed {
                match link.issued[cursor..].iter().position(|t| t == done) {
                    Some(ahead) => cursor += ahead + 1,
                    None => {
                        return Err(format!(
                            "link {i}: completion of {done:?} out of issue order"
                        ))
                    }
                }
            }
        }
        // Per-word linearizability: the recorded apply sequence must chain,
        // every mutation's observed pre-word being the previous one's post.
        let mut chains: std::collections::HashMap<(u32, SlotIndex), SlotWord> =
            std::collections::HashMap::new();
        for record in &self.apply_log {
            let key = (record.owner.0, record.slot);
            if let Some(prev) = chains.get(&key) {
                if record.old != *prev {
                    return Err(format!(
                        "word {key:?}: apply chain broken, saw {} after {}",
                        record.old, prev
                    ));
                }
            }
            chains.insert(key, record.new);
        }
        Ok(())
    }
}

/// A [`Port`] bound to one process of a [`Fabric`].
pub struct FabricPort<'a> {
    pub fabric: &'a mut Fabric,
    rng: &'a mut ChaCha8Rng,
    me: ProcessId,
}

impl Port for FabricPort<'_> {
    fn me(&self) -> ProcessId {
        self.me
    }

    fn now(&self) -> VTime {
        self.fabric.now
    }

    fn post_read(&mut self, target: ProcessId, slot: SlotIndex) -> TicketId {
        self.fabric
            .post_op(self.rng, self.me, target, slot, OpBody::Read)
    }

    fn post_payload_read(
        &mut self,
        target: ProcessId,
        slot: SlotIndex,
        writer: ProcessId,
    ) -> TicketId {
        self.fabric.post_op(
            self.rng,
            self.me,
            target,
            slot,
            OpBody::PayloadRead { writer },
        )
    }

    fn post_cas(
        &mut self,
        target: ProcessId,
        slot: SlotIndex,
        expected: SlotWord,
        desired: SlotWord,
    ) -> TicketId {
        self.fabric.post_op(
            self.rng,
            self.me,
            target,
            slot,
            OpBody::Cas { expected, desired },
        )
    }

    fn post_write(&mut self, target: ProcessId, slot: SlotIndex, payload: &[u8]) -> TicketId {
        self.fabric.post_op(
            self.rng,
            self.me,
            target,
            slot,
            OpBody::Write {
                bytes: payload.to_vec(),
            },
        )
    }

    fn post_write_then_cas(
        &mut self,
        target: ProcessId,
        slot: SlotIndex,
        payload: &[u8],
        expected: SlotWord,
        desired: SlotWord,
    ) -> TicketId {
        self.fabric.post_op(
            self.rng,
            self.me,
            target,
            slot,
            OpBody::WriteCas {
                bytes: payload.to_vec(),
                expected,
                desired,
            },
        )
    }

    fn send(&mut self, target: ProcessId, msg: Message) {
        self.fabric.post_message(self.rng, self.me, target, msg);
    }

    fn schedule(&mut self, delay: VTime, tag: u64) {
        let at = self.fabric.now + delay;
        self.fabric.push_at(
            at,
            Event::Wakeup {
                process: self.me,
                tag,
            },
        );
    }

    fn read_local_word(&self, slot: SlotIndex) -> SlotWord {
        self.fabric.words[self.me.index()][slot as usize]
    }

    fn read_local_payload(&self, slot: SlotIndex, writer: ProcessId) -> Option<Vec<u8>> {
        self.fabric.payloads[self.me.index()]
            .get(&(slot, writer.0))
            .cloned()
    }

    fn local_slots(&self) -> SlotIndex {
        self.fabric.cfg.slots
    }

    fn fence_local_word(&mut self, slot: SlotIndex, word: SlotWord) -> SlotWord {
        let old = self.fabric.words[self.me.index()][slot as usize];
        self.fabric.words[self.me.index()][slot as usize] = word;
        self.fabric.apply_log.push(ApplyRecord {
            at: self.fabric.now,
            ticket: None,
            owner: self.me,
            initiator: self.me,
            op: OpKind::Write,
            slot,
            old,
            new: word,
            swapped: true,
        });
        self.fabric.trace.push(TraceRecord::Apply {
            t_us: self.fabric.now.as_us(),
            process: self.me.0,
            initiator: self.me.0,
            op: "fence".into(),
            slot,
            old: old.0,
            new: word.0,
        });
        old
    }

    fn emit(&mut self, record: TraceRecord) {
        self.fabric.trace.push(record);
    }

    fn count_round(&mut self, critical: bool) {
        self.fabric.counters.rounds[self.me.index()] += 1;
        if critical {
            self.fabric.counters.critical_rounds[self.me.index()] += 1;
        }
    }
}

/// A fabric plus one [`Node`] per process: the virtual-time event loop.
pub struct Sim<N: Node> {
    pub fabric: Fabric,
    pub nodes: Vec<N>,
    rng: ChaCha8Rng,
}

impl<N: Node> Sim<N> {
    pub fn new(fabric: Fabric, nodes: Vec<N>) -> Sim<N> {
        assert_eq!(nodes.len(), fabric.cfg.processes as usize);
        let rng = ChaCha8Rng::seed_from_u64(fabric.cfg.seed);
        Sim { fabric, nodes, rng }
    }

    /// Run every node's `on_init` at time zero.
    pub fn init(&mut self) {
        for i in 0..self.nodes.len() {
            if !self.fabric.alive[i] {
                continue;
            }
            let mut port = FabricPort {
                fabric: &mut self.fabric,
                rng: &mut self.rng,
                me: ProcessId(i as u32),
            };
            self.nodes[i].on_init(&mut port);
        }
    }

    /// Borrow a port for one process, for test harnesses that drive state
    /// machines by hand.
    pub fn with_port<R>(&mut self, me: ProcessId, f: impl FnOnce(&mut dyn Port, &mut N) -> R) -> R {
        let mut port = FabricPort {
            fabric: &mut self.fabric,
            rng: &mut self.rng,
            me,
        };
        f(&mut port, &mut self.nodes[me.index()])
    }

    /// Process the next event. Returns false when the heap is drained.
    pub fn step(&mut self) -> bool {
        let Some(Reverse(scheduled)) = self.fabric.heap.pop() else {
            return false;
        };
        debug_assert!(scheduled.at >= self.fabric.now);
        self.fabric.now = scheduled.at;
        match scheduled.event {
            Event::Apply {
                ticket,
                initiator,
                target,
                slot,
                body,
            } => {
                if !self.fabric.alive[target.index()] {
                    return true; // crashed region: op vanishes, ticket stays pending
                }
                let kind = body.kind();
                let changed;
                let completion;
                {
                    let (c, w) = self
                        .fabric
                        .apply_body(ticket, initiator, target, slot, body);
                    completion = c;
                    changed = w;
                }
                let link = self.fabric.link_index(initiator, target);
                let rng = &mut self.rng;
                let back = self.fabric.cfg.latency.one_way(
                    kind,
                    initiator == target,
                    self.fabric.now,
                    rng,
                );
                let complete_at =
                    (self.fabric.now + back).max(self.fabric.links[link].last_complete);
                self.fabric.links[link].last_complete = complete_at;
                self.fabric.push_at(
                    complete_at,
                    Event::Complete {
                        ticket,
                        initiator,
                        target,
                        slot,
                        kind,
                        completion,
                    },
                );
                if let Some(word) = changed {
                    let at = self.fabric.now;
                    self.fabric.push_at(
                        at,
                        Event::LocalUpdate {
                            owner: target,
                            slot,
                            word,
                        },
                    );
                }
            }
            Event::Complete {
                ticket,
                initiator,
                target,
                slot,
                kind,
                completion,
            } => {
                // Crash containment: a region that crashed never completes
                // anything afterwards, even if the op applied earlier.
                if !self.fabric.alive[target.index()] || !self.fabric.alive[initiator.index()] {
                    return true;
                }
                self.fabric.counters.completed[initiator.index()][Counters::kind_index(kind)] += 1;
                let link = self.fabric.link_index(initiator, target);
                self.fabric.links[link].completed.push(ticket);
                self.fabric.trace.push(TraceRecord::Complete {
                    t_us: self.fabric.now.as_us(),
                    process: initiator.0,
                    ticket: ticket.0,
                    op: kind.name().into(),
                    slot,
                });
                let mut port = FabricPort {
                    fabric: &mut self.fabric,
                    rng: &mut self.rng,
                    me: initiator,
                };
                self.nodes[initiator.index()].on_completion(&mut port, ticket, completion);
            }
            Event::Deliver { src, dst, bytes } => {
                if !self.fabric.alive[dst.index()] {
                    return true;
                }
                self.fabric.counters.completed[src.index()][Counters::kind_index(OpKind::Msg)] += 1;
                let msg = Message::decode(&bytes).expect("fabric carries well-formed messages");
                self.fabric.trace.push(TraceRecord::Deliver {
                    t_us: self.fabric.now.as_us(),
                    process: dst.0,
                    src: src.0,
                    bytes: bytes.len(),
                    tag: bytes[0],
                });
                let mut port = FabricPort {
                    fabric: &mut self.fabric,
                    rng: &mut self.rng,
                    me: dst,
                };
                self.nodes[dst.index()].on_message(&mut port, src, msg);
            }
            Event::Wakeup { process, tag } => {
                if !self.fabric.alive[process.index()] {
                    return true;
                }
                let mut port = FabricPort {
                    fabric: &mut self.fabric,
                    rng: &mut self.rng,
                    me: process,
                };
                self.nodes[process.index()].on_wakeup(&mut port, tag);
            }
            Event::Notice { to, crashed } => {
                if !self.fabric.alive[to.index()] {
                    return true;
                }
                self.fabric.trace.push(TraceRecord::Crashed {
                    t_us: self.fabric.now.as_us(),
                    process: to.0,
                    crashed: crashed.0,
                });
                let mut port = FabricPort {
                    fabric: &mut self.fabric,
                    rng: &mut self.rng,
                    me: to,
                };
                self.nodes[to.index()].on_crash_notice(&mut port, crashed);
            }
            Event::CrashNow { process } => {
                self.fabric.crash(process);
            }
            Event::LocalUpdate { owner, slot, word } => {
                if !self.fabric.alive[owner.index()] {
                    return true;
                }
                let mut port = FabricPort {
                    fabric: &mut self.fabric,
                    rng: &mut self.rng,
                    me: owner,
                };
                self.nodes[owner.index()].on_local_update(&mut port, slot, word);
            }
        }
        true
    }

    /// Drain the event heap, bounded by an event budget.
    pub fn run_to_quiescence(&mut self, max_events: u64) -> u64 {
        let mut n = 0;
        while n < max_events && self.step() {
            n += 1;
        }
        n
    }

    /// Run until virtual time passes `until` or the heap drains.
    pub fn run_until(&mut self, until: VTime) {
        while let Some(Reverse(next)) = self.fabric.heap.peek() {
            if next.at > until {
                break;
            }
            self.step();
        }
        self.fabric.now = self.fabric.now.max(until);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ProposalNumber;

    fn pid(i: u32) -> ProcessId {
        ProcessId(i)
    }

    fn sim(n: u32, seed: u64) -> Sim<InboxNode> {
        let cfg = FabricConfig {
            processes: n,
            seed,
            ..Default::default()
        };
        let fabric = Fabric::new(cfg, TraceSink::Memory(Vec::new()));
        let nodes = (0..n).map(|_| InboxNode::default()).collect();
        Sim::new(fabric, nodes)
    }

    #[test]
    fn cas_on_fresh_word_swaps_and_returns_old_zero() {
        let mut s = sim(2, 1);
        let t = s.with_port(pid(0), |p, _| {
            p.post_cas(pid(1), 0, SlotWord(0), SlotWord(42))
        });
        s.run_to_quiescence(100);
        assert_eq!(s.fabric.word(pid(1), 0), SlotWord(42));
        assert_eq!(
            s.nodes[0].completions,
            vec![(t, Completion::Cas { old: SlotWord(0) })]
        );
    }

    #[test]
    fn failed_cas_leaves_word_and_reports_current() {
        let mut s = sim(2, 1);
        s.fabric.preset_word(pid(1), 0, SlotWord(7));
        let t = s.with_port(pid(0), |p, _| {
            p.post_cas(pid(1), 0, SlotWord(0), SlotWord(42))
        });
        s.run_to_quiescence(100);
        assert_eq!(s.fabric.word(pid(1), 0), SlotWord(7));
        assert_eq!(
            s.nodes[0].completions,
            vec![(t, Completion::Cas { old: SlotWord(7) })]
        );
    }

    #[test]
    fn read_sees_latest_applied_cas() {
        let mut s = sim(2, 1);
        s.with_port(pid(0), |p, _| {
            p.post_cas(pid(1), 0, SlotWord(0), SlotWord(9));
            p.post_read(pid(1), 0)
        });
        s.run_to_quiescence(100);
        // Same link, issued after the CAS: FIFO delivers the post-CAS word.
        assert_eq!(
            s.nodes[0].completions[1].1,
            Completion::Read { word: SlotWord(9) }
        );
        s.fabric.audit().unwrap();
    }

    #[test]
    fn read_issued_before_cas_returns_the_pre_cas_word() {
        let mut s = sim(2, 1);
        s.with_port(pid(0), |p, _| {
            p.post_read(pid(1), 0);
            p.post_cas(pid(1), 0, SlotWord(0), SlotWord(9))
        });
        s.run_to_quiescence(100);
        assert_eq!(
            s.nodes[0].completions[0].1,
            Completion::Read { word: SlotWord(0) }
        );
        assert_eq!(s.fabric.word(pid(1), 0), SlotWord(9));
        s.fabric.audit().unwrap();
    }

    #[test]
    fn ops_to_crashed_target_never_complete() {
        let mut s = sim(2, 1);
        s.fabric.schedule_crash(pid(1), VTime::from_us(0.1));
        s.with_port(pid(0), |p, _| {
            p.post_cas(pid(1), 0, SlotWord(0), SlotWord(1))
        });
        s.run_to_quiescence(100);
        assert!(s.nodes[0].completions.is_empty());
        assert_eq!(s.fabric.counters().completed_total(OpKind::Cas), 0);
        s.fabric.audit().unwrap();
    }

    #[test]
    fn crash_between_apply_and_completion_suppresses_completion() {
        let mut s = sim(2, 1);
        // CAS applies at 0.95us; crash the target at 1.2us, before the 1.9us
        // completion delivery.
        s.fabric.schedule_crash(pid(1), VTime::from_us(1.2));
        s.with_port(pid(0), |p, _| {
            p.post_cas(pid(1), 0, SlotWord(0), SlotWord(5))
        });
        s.run_to_quiescence(100);
        assert_eq!(s.fabric.word(pid(1), 0), SlotWord(5)); // applied
        assert!(s.nodes[0].completions.is_empty()); // never reported
    }

    #[test]
    fn messages_keep_fifo_order_and_drop_on_crashed_destination() {
        let mut s = sim(3, 1);
        let m1 = Message::Prepare {
            slot: 0,
            proposal: ProposalNumber(1),
        };
        let m2 = Message::Prepare {
            slot: 0,
            proposal: ProposalNumber(2),
        };
        s.with_port(pid(0), |p, _| {
            p.send(pid(1), m1);
            p.send(pid(1), m2);
        });
        s.fabric.schedule_crash(pid(2), VTime::ZERO);
        s.with_port(pid(0), |p, _| {
            p.send(
                pid(2),
                Message::Prepare {
                    slot: 0,
                    proposal: ProposalNumber(3),
                },
            )
        });
        s.run_to_quiescence(100);
        assert_eq!(s.nodes[1].messages, vec![(pid(0), m1), (pid(0), m2)]);
        assert!(s.nodes[2].messages.is_empty());
    }

    #[test]
    fn self_message_arrives_after_local_delay() {
        let mut s = sim(2, 1);
        s.with_port(pid(0), |p, _| {
            p.send(
                pid(0),
                Message::Decided {
                    slot: 0,
                    value: crate::types::ValueId(1),
                    writer: pid(0),
                },
            )
        });
        s.run_to_quiescence(100);
        assert_eq!(s.nodes[0].messages.len(), 1);
        assert_eq!(s.fabric.now(), VTime(300));
    }

    #[test]
    fn write_then_cas_applies_payload_even_when_cas_fails() {
        let mut s = sim(2, 1);
        s.fabric.preset_word(pid(1), 0, SlotWord(99));
        s.with_port(pid(0), |p, _| {
            p.post_write_then_cas(pid(1), 0, b"payload", SlotWord(0), SlotWord(1))
        });
        s.run_to_quiescence(100);
        assert_eq!(s.fabric.word(pid(1), 0), SlotWord(99));
        assert_eq!(s.fabric.payload(pid(1), 0, pid(0)), Some(&b"payload"[..]));
        assert_eq!(
            s.nodes[0].completions[0].1,
            Completion::Cas { old: SlotWord(99) }
        );
    }

    #[test]
    fn identical_seeds_give_identical_traces() {
        let run = |seed: u64| {
            let mut s = sim(3, seed);
            s.fabric.cfg.latency = LatencyModel::jittered(0.2, 2.0);
            s.with_port(pid(0), |p, _| {
                for i in 0..10 {
                    p.post_cas(pid(1 + (i % 2) as u32), 0, SlotWord(0), SlotWord(i + 1));
                    p.post_read(pid(1), 0);
                }
            });
            s.run_to_quiescence(1000);
            s.fabric.trace.records().to_vec()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }

    #[test]
    fn per_link_completions_follow_issue_order_under_jitter() {
        let mut s = sim(3, 42);
        s.fabric.cfg.latency = LatencyModel::jittered(0.1, 3.0);
        let mut tickets = Vec::new();
        s.with_port(pid(0), |p, _| {
            for i in 0..50u64 {
                tickets.push(p.post_cas(pid(1), 0, SlotWord(i), SlotWord(i + 1)));
                p.post_write(pid(2), 0, b"x");
            }
        });
        s.run_to_quiescence(10_000);
        s.fabric.audit().unwrap();
        let done: Vec<_> = s.nodes[0]
            .completions
            .iter()
            .map(|(t, _)| *t)
            .filter(|t| tickets.contains(t))
            .collect();
        assert_eq!(done, tickets);
    }

    #[test]
    fn wakeups_fire_in_order() {
        let mut s = sim(1, 1);
        s.with_port(pid(0), |p, _| {
            p.schedule(VTime::from_us(2.0), 2);
            p.schedule(VTime::from_us(1.0), 1);
        });
        s.run_to_quiescence(10);
        assert_eq!(s.nodes[0].wakeups, vec![1, 2]);
    }

    #[test]
    fn crash_notice_reaches_survivors_after_detection_delay() {
        let mut s = sim(3, 1);
        s.fabric.schedule_crash(pid(0), VTime::from_us(5.0));
        s.run_to_quiescence(100);
        assert_eq!(s.nodes[1].notices, vec![pid(0)]);
        assert_eq!(s.nodes[2].notices, vec![pid(0)]);
        assert_eq!(s.fabric.now(), VTime::from_us(35.0));
    }
}
