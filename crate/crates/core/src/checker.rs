//! Bounded exhaustive interleaving exploration for tiny configurations.
//!
//! The explorer drives the real proposer state machines against an abstract
//! single-slot world: per-acceptor words and payload buffers, per-direction
//! FIFO queues of in-flight operations and completions, and a crash budget.
//! At every state the enabled events are: start a propose attempt, apply the
//! head of a request queue, deliver the head of a completion queue, or crash
//! a process. Exploration walks the reachable state graph depth-first with
//! memoization -- behavior is a deterministic function of the state, so each
//! state needs expanding once; every terminal state of every maximal
//! schedule is still reached.
//!
//! Checked throughout: acceptor monotonicity on each applied mutation,
//! integrity (no process decides twice), uniform agreement and validity on
//! each decide, and -- for the replication protocol -- payload
//! recoverability of every decided value at terminal states. Violations
//! carry a choice-sequence witness that [`replay`] re-executes
//! deterministically.

use crate::defect::Defect;
use crate::fabric::{Completion, Port, SlotIndex, TicketId, VTime};
use crate::msg::Message;
use crate::onesided::{DirectProposer, ProposeEvent, RunMode, StreamlinedProposer};
use crate::rpcpaxos::{AcceptorCtx, RefProposer};
use crate::types::{majority, AcceptorState, ProcessId, SlotLayout, SlotWord, ValueId};
use serde::Serialize;
use std::collections::{BTreeMap, HashSet, VecDeque};
use std::hash::{Hash, Hasher};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Protocol {
    RefPaxos,
    Direct,
    Streamlined,
    SmrSingleSlot,
}

impl Protocol {
    pub const ALL: [Protocol; 4] = [
        Protocol::RefPaxos,
        Protocol::Direct,
        Protocol::Streamlined,
        Protocol::SmrSingleSlot,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::RefPaxos => "refpaxos",
            Protocol::Direct => "onesided-direct",
            Protocol::Streamlined => "onesided-streamlined",
            Protocol::SmrSingleSlot => "smr-single-slot",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExploreConfig {
    pub protocol: Protocol,
    pub proposers: usize,
    pub acceptors: usize,
    /// Propose attempts allowed per proposer.
    pub attempts: u32,
    /// Crash events allowed per exploration.
    pub crashes: u32,
    /// Transition budget; exceeding it yields a partial (but sound) report.
    pub budget: u64,
    /// Stop exploring once a violation is recorded (for sensitivity runs).
    pub stop_at_first_violation: bool,
    pub defect: Defect,
    /// Explore first-level subtrees on the rayon pool. The visited state set
    /// is identical either way.
    pub parallel: bool,
}

impl ExploreConfig {
    pub fn new(protocol: Protocol) -> ExploreConfig {
        ExploreConfig {
            protocol,
            proposers: 2,
            acceptors: 3,
            attempts: 2,
            crashes: 1,
            budget: 5_000_000,
            stop_at_first_violation: false,
            defect: Defect::NONE,
            parallel: cfg!(feature = "parallel"),
        }
    }

    fn validate(&self) {
        assert!(
            self.proposers >= 1 && self.proposers <= 2,
            "at most 2 proposers"
        );
        assert!(
            self.acceptors >= 1 && self.acceptors <= 3,
            "at most 3 acceptors"
        );
        assert!(self.attempts <= 2, "at most 2 attempts");
        assert!(self.crashes <= 1, "at most 1 crash");
        assert!(self.proposers <= self.acceptors);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Choice {
    Start { proposer: u32 },
    Apply { from: u32, to: u32 },
    Complete { from: u32, to: u32 },
    Crash { process: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum ViolationKind {
    Agreement,
    Validity,
    Integrity,
    Monotonicity,
    Recoverability,
}

#[derive(Debug, Clone, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub detail: String,
    pub witness: Vec<Choice>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExploreReport {
    pub protocol: String,
    pub states: u64,
    pub transitions: u64,
    pub terminals: u64,
    /// Terminal outcomes: one key per per-proposer outcome pattern.
    pub outcome_census: BTreeMap<String, u64>,
    /// Propose attempts that ended in an abort, summed over all transitions.
    pub abort_events: u64,
    pub decide_events: u64,
    pub violations: Vec<Violation>,
    /// False when the transition budget cut exploration short.
    pub complete: bool,
}

impl ExploreReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }

    /// Human-readable summary block.
    pub fn render(&self) -> String {
        let mut out = format!(
            "protocol {}: {} states, {} transitions, {} terminals, {} aborts, {}\n",
            self.protocol,
            self.states,
            self.transitions,
            self.terminals,
            self.abort_events,
            if self.complete {
                "complete"
            } else {
                "budget-capped"
            },
        );
        for (pattern, count) in &self.outcome_census {
            out.push_str(&format!("  outcome {pattern}: {count}\n"));
        }
        for v in &self.violations {
            out.push_str(&format!(
                "  VIOLATION {:?}: {} (witness {} steps)\n",
                v.kind,
                v.detail,
                v.witness.len()
            ));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// World
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum NetOp {
    Read {
        ticket: TicketId,
    },
    PayloadRead {
        ticket: TicketId,
        writer: u32,
    },
    Cas {
        ticket: TicketId,
        expected: SlotWord,
        desired: SlotWord,
    },
    WriteCas {
        ticket: TicketId,
        bytes: Vec<u8>,
        expected: SlotWord,
        desired: SlotWord,
    },
    Write {
        ticket: TicketId,
        bytes: Vec<u8>,
    },
    Msg(Message),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum ProcSm {
    None,
    Ref(RefProposer),
    Direct(DirectProposer),
    Stream(StreamlinedProposer),
}

impl ProcSm {
    fn in_flight(&self) -> bool {
        match self {
            ProcSm::None => false,
            ProcSm::Ref(p) => p.in_flight(),
            ProcSm::Direct(p) => p.in_flight(),
            ProcSm::Stream(p) => p.in_flight(),
        }
    }

    fn decided(&self) -> Option<ValueId> {
        match self {
            ProcSm::None => None,
            ProcSm::Ref(p) => p.decided,
            ProcSm::Direct(p) => p.decided,
            ProcSm::Stream(p) => p.decided,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct ProcBox {
    sm: ProcSm,
    attempts_used: u32,
    ticket_seq: u32,
    decide_events: u8,
    abort_events: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct World {
    words: Vec<SlotWord>,
    /// payloads[acceptor][writer]
    payloads: Vec<Vec<Option<Vec<u8>>>>,
    /// ops[from * n + to]: requests and messages in flight, FIFO.
    ops: Vec<VecDeque<NetOp>>,
    /// completions[initiator * n + target]: completions heading back, FIFO.
    completions: Vec<VecDeque<(TicketId, Completion)>>,
    procs: Vec<ProcBox>,
    acceptors: Vec<AcceptorCtx>,
    alive: Vec<bool>,
    crashes_left: u32,
}

const SLOT: SlotIndex = 0;

fn smr_payload(v: ValueId) -> Vec<u8> {
    vec![v.0; 4]
}

impl World {
    fn new(cfg: &ExploreConfig) -> World {
        let n = cfg.acceptors;
        let layout = SlotLayout::default();
        let procs = (0..n)
            .map(|i| {
                let sm = if i < cfg.proposers {
                    let id = ProcessId(i as u32);
                    match cfg.protocol {
                        Protocol::RefPaxos => ProcSm::Ref(RefProposer::new(id, n, SLOT)),
                        Protocol::Direct => {
                            let mut p = DirectProposer::new(id, n, layout, SLOT);
                            p.defect = cfg.defect;
                            ProcSm::Direct(p)
                        }
                        Protocol::Streamlined | Protocol::SmrSingleSlot => {
                            let mut p = StreamlinedProposer::new(id, n, layout, SLOT);
                            p.defect = cfg.defect;
                            ProcSm::Stream(p)
                        }
                    }
                } else {
                    ProcSm::None
                };
                ProcBox {
                    sm,
                    attempts_used: 0,
                    ticket_seq: 0,
                    decide_events: 0,
                    abort_events: 0,
                }
            })
            .collect();
        let mut acceptor = AcceptorCtx::new();
        acceptor.defect = cfg.defect;
        World {
            words: vec![SlotWord::ZERO; n],
            payloads: vec![vec![None; n]; n],
            ops: vec![VecDeque::new(); n * n],
            completions: vec![VecDeque::new(); n * n],
            procs,
            acceptors: vec![acceptor; n],
            alive: vec![true; n],
            crashes_left: cfg.crashes,
        }
    }

    fn n(&self) -> usize {
        self.words.len()
    }

    fn fingerprint(&self) -> u128 {
        let mut h1 = std::collections::hash_map::DefaultHasher::new();
        1u8.hash(&mut h1);
        self.hash(&mut h1);
        let mut h2 = std::collections::hash_map::DefaultHasher::new();
        2u8.hash(&mut h2);
        self.hash(&mut h2);
        ((h1.finish() as u128) << 64) | h2.finish() as u128
    }

    fn enabled(&self, cfg: &ExploreConfig) -> Vec<Choice> {
        let n = self.n();
        let mut out = Vec::new();
        for p in 0..cfg.proposers {
            let pb = &self.procs[p];
            if self.alive[p]
                && !pb.sm.in_flight()
                && pb.sm.decided().is_none()
                && pb.attempts_used < cfg.attempts
            {
                out.push(Choice::Start { proposer: p as u32 });
            }
        }
        for from in 0..n {
            for to in 0..n {
                if !self.ops[from * n + to].is_empty() {
                    out.push(Choice::Apply {
                        from: from as u32,
                        to: to as u32,
                    });
                }
            }
        }
        for from in 0..n {
            for to in 0..n {
                if !self.completions[from * n + to].is_empty() {
                    out.push(Choice::Complete {
                        from: from as u32,
                        to: to as u32,
                    });
                }
            }
        }
        // A crash is only an interesting choice while something else can
        // still happen.
        if self.crashes_left > 0 && !out.is_empty() {
            for p in 0..n {
                if self.alive[p] {
                    out.push(Choice::Crash { process: p as u32 });
                }
            }
        }
        out
    }

    /// Outcome pattern for the census: one letter per proposer.
    fn census_key(&self, cfg: &ExploreConfig) -> String {
        (0..cfg.proposers)
            .map(|p| {
                let pb = &self.procs[p];
                match pb.sm.decided() {
                    Some(v) => format!("D{}", v.0),
                    None if !self.alive[p] => "X".to_string(),
                    None if pb.sm.in_flight() => "P".to_string(),
                    None => "A".to_string(),
                }
            })
            .collect::<Vec<_>>()
            .join("|")
    }
}

// ---------------------------------------------------------------------------
// Port capturing posts into the world queues
// ---------------------------------------------------------------------------

struct CheckerPort {
    me: ProcessId,
    n: usize,
    next_seq: u32,
    queued: Vec<(usize, NetOp)>,
}

impl CheckerPort {
    fn new(me: ProcessId, n: usize, next_seq: u32) -> CheckerPort {
        CheckerPort {
            me,
            n,
            next_seq,
            queued: Vec::new(),
        }
    }

    fn ticket(&mut self) -> TicketId {
        let t = TicketId(((self.me.0 as u64) << 32) | self.next_seq as u64);
        self.next_seq += 1;
        t
    }

    fn link(&self, to: ProcessId) -> usize {
        self.me.index() * self.n + to.index()
    }
}

impl Port for CheckerPort {
    fn me(&self) -> ProcessId {
        self.me
    }
    fn now(&self) -> VTime {
        VTime::ZERO
    }
    fn post_read(&mut self, target: ProcessId, _slot: SlotIndex) -> TicketId {
        let ticket = self.ticket();
        self.queued
            .push((self.link(target), NetOp::Read { ticket }));
        ticket
    }
    fn post_payload_read(
        &mut self,
        target: ProcessId,
        _slot: SlotIndex,
        writer: ProcessId,
    ) -> TicketId {
        let ticket = self.ticket();
        self.queued.push((
            self.link(target),
            NetOp::PayloadRead {
                ticket,
                writer: writer.0,
            },
        ));
        ticket
    }
    fn post_cas(
        &mut self,
        target: ProcessId,
        _slot: SlotIndex,
        expected: SlotWord,
        desired: SlotWord,
    ) -> TicketId {
        let ticket = self.ticket();
        self.queued.push((
            self.link(target),
            NetOp::Cas {
                ticket,
                expected,
                desired,
            },
        ));
        ticket
    }
    fn post_write(&mut self, target: ProcessId, _slot: SlotIndex, payload: &[u8]) -> TicketId {
        let ticket = self.ticket();
        self.queued.push((
            self.link(target),
            NetOp::Write {
                ticket,
                bytes: payload.to_vec(),
            },
        ));
        ticket
    }
    fn post_write_then_cas(
        &mut self,
        target: ProcessId,
        _slot: SlotIndex,
        payload: &[u8],
        expected: SlotWord,
        desired: SlotWord,
    ) -> TicketId {
        let ticket = self.ticket();
        self.queued.push((
            self.link(target),
            NetOp::WriteCas {
                ticket,
                bytes: payload.to_vec(),
                expected,
                desired,
            },
        ));
        ticket
    }
    fn send(&mut self, target: ProcessId, msg: Message) {
        self.queued.push((self.link(target), NetOp::Msg(msg)));
    }
    fn schedule(&mut self, _delay: VTime, _tag: u64) {}
    fn read_local_word(&self, _slot: SlotIndex) -> SlotWord {
        unimplemented!("checker protocols never read local memory")
    }
    fn read_local_payload(&self, _slot: SlotIndex, _writer: ProcessId) -> Option<Vec<u8>> {
        unimplemented!("checker protocols never read local memory")
    }
    fn local_slots(&self) -> SlotIndex {
        1
    }
    fn fence_local_word(&mut self, _slot: SlotIndex, _word: SlotWord) -> SlotWord {
        unimplemented!("checker protocols never fence")
    }
    fn emit(&mut self, _record: crate::fabric::TraceRecord) {}
    fn count_round(&mut self, _critical: bool) {}
}

// ---------------------------------------------------------------------------
// Transition
// ---------------------------------------------------------------------------

#[derive(Debug, Default)]
struct StepOutput {
    issues: Vec<(ViolationKind, String)>,
    aborts: u64,
    decides: u64,
}

fn layout() -> SlotLayout {
    SlotLayout::default()
}

fn check_handler_monotone(
    before: AcceptorState,
    after: AcceptorState,
    acceptor: usize,
    out: &mut StepOutput,
) {
    if after.min_proposal < before.min_proposal
        || after.accepted_proposal < before.accepted_proposal
    {
        out.issues.push((
            ViolationKind::Monotonicity,
            format!("acceptor {acceptor} handler regressed {before:?} -> {after:?}"),
        ));
    }
}

fn check_word_monotone(old: SlotWord, new: SlotWord, out: &mut StepOutput) {
    let (Ok(a), Ok(b)) = (old.unpack(layout()), new.unpack(layout())) else {
        out.issues.push((
            ViolationKind::Monotonicity,
            format!("malformed word transition {old} -> {new}"),
        ));
        return;
    };
    if b.min_proposal < a.min_proposal || b.accepted_proposal < a.accepted_proposal {
        out.issues.push((
            ViolationKind::Monotonicity,
            format!("word regressed {a:?} -> {b:?}"),
        ));
    }
}

fn record_event(
    world: &mut World,
    cfg: &ExploreConfig,
    p: usize,
    ev: ProposeEvent,
    out: &mut StepOutput,
) {
    match ev {
        ProposeEvent::Decided(v) => {
            out.decides += 1;
            world.procs[p].decide_events += 1;
            if world.procs[p].decide_events > 1 {
                out.issues
                    .push((ViolationKind::Integrity, format!("p{p} decided twice")));
            }
            if v.0 as usize >= cfg.proposers {
                out.issues.push((
                    ViolationKind::Validity,
                    format!("p{p} decided {v} which nobody proposed"),
                ));
            }
            for (q, other) in world.procs.iter().enumerate() {
                if q != p {
                    if let Some(w) = other.sm.decided() {
                        if w != v {
                            out.issues.push((
                                ViolationKind::Agreement,
                                format!("p{p} decided {v}, p{q} decided {w}"),
                            ));
                        }
                    }
                }
            }
        }
        ProposeEvent::Aborted => {
            out.aborts += 1;
            world.procs[p].abort_events += 1;
        }
        ProposeEvent::Prepared => {}
    }
}

/// Run one proposer handler with a capturing port, then merge the port's
/// queued operations back into the world.
fn with_proc<R>(
    world: &mut World,
    p: usize,
    f: impl FnOnce(&mut ProcSm, &mut CheckerPort) -> R,
) -> R {
    let n = world.n();
    let mut port = CheckerPort::new(ProcessId(p as u32), n, world.procs[p].ticket_seq);
    let r = f(&mut world.procs[p].sm, &mut port);
    world.procs[p].ticket_seq = port.next_seq;
    for (link, op) in port.queued {
        world.ops[link].push_back(op);
    }
    r
}

fn apply_choice(world: &mut World, cfg: &ExploreConfig, choice: Choice) -> StepOutput {
    let mut out = StepOutput::default();
    let n = world.n();
    match choice {
        Choice::Start { proposer } => {
            let p = proposer as usize;
            world.procs[p].attempts_used += 1;
            let value = ValueId(proposer as u8);
            let payload = (cfg.protocol == Protocol::SmrSingleSlot).then(|| smr_payload(value));
            let ev = with_proc(world, p, |sm, port| match sm {
                ProcSm::Ref(prop) => {
                    prop.propose(port, value);
                    None
                }
                ProcSm::Direct(prop) => {
                    prop.propose(port, value);
                    None
                }
                ProcSm::Stream(prop) => prop.propose(port, RunMode::Full, value, payload),
                ProcSm::None => unreachable!("start on a non-proposer"),
            });
            if let Some(ev) = ev {
                record_event(world, cfg, p, ev, &mut out);
            }
        }
        Choice::Apply { from, to } => {
            let link = from as usize * n + to as usize;
            let op = world.ops[link].pop_front().expect("enabled choice");
            let t = to as usize;
            match op {
                NetOp::Read { ticket } => {
                    let word = world.words[t];
                    world.completions[link].push_back((ticket, Completion::Read { word }));
                }
                NetOp::PayloadRead { ticket, writer } => {
                    let bytes = world.payloads[t][writer as usize].clone();
                    world.completions[link].push_back((ticket, Completion::PayloadRead { bytes }));
                }
                NetOp::Cas {
                    ticket,
                    expected,
                    desired,
                } => {
                    let old = world.words[t];
                    if old == expected {
                        world.words[t] = desired;
                        check_word_monotone(old, desired, &mut out);
                    }
                    world.completions[link].push_back((ticket, Completion::Cas { old }));
                }
                NetOp::WriteCas {
                    ticket,
                    bytes,
                    expected,
                    desired,
                } => {
                    world.payloads[t][from as usize] = Some(bytes);
                    let old = world.words[t];
                    if old == expected {
                        world.words[t] = desired;
                        check_word_monotone(old, desired, &mut out);
                    }
                    world.completions[link].push_back((ticket, Completion::Cas { old }));
                }
                NetOp::Write { ticket, bytes } => {
                    world.payloads[t][from as usize] = Some(bytes);
                    world.completions[link].push_back((ticket, Completion::Write));
                }
                NetOp::Msg(msg) => match msg {
                    Message::Prepare { slot, proposal } => {
                        let before = world.acceptors[t].state;
                        let reply = world.acceptors[t].prepare(proposal);
                        check_handler_monotone(before, world.acceptors[t].state, t, &mut out);
                        world.ops[t * n + from as usize].push_back(NetOp::Msg(Message::Prepared {
                            slot,
                            re: proposal,
                            reply,
                        }));
                    }
                    Message::Accept {
                        slot,
                        proposal,
                        value,
                    } => {
                        let before = world.acceptors[t].state;
                        let min = world.acceptors[t].accept(proposal, value);
                        check_handler_monotone(before, world.acceptors[t].state, t, &mut out);
                        world.ops[t * n + from as usize].push_back(NetOp::Msg(Message::Accepted {
                            slot,
                            re: proposal,
                            min_proposal: min,
                        }));
                    }
                    reply_msg => {
                        let ev = with_proc(world, t, |sm, port| match sm {
                            ProcSm::Ref(prop) => prop
                                .on_message(port, ProcessId(from), reply_msg)
                                .map(|o| match o {
                                    crate::types::Outcome::Decide(v) => ProposeEvent::Decided(v),
                                    crate::types::Outcome::Abort => ProposeEvent::Aborted,
                                }),
                            ProcSm::Stream(prop) => {
                                prop.on_message(port, ProcessId(from), reply_msg)
                            }
                            _ => None,
                        });
                        if let Some(ev) = ev {
                            record_event(world, cfg, t, ev, &mut out);
                        }
                    }
                },
            }
        }
        Choice::Complete { from, to } => {
            let link = from as usize * n + to as usize;
            let (ticket, completion) = world.completions[link].pop_front().expect("enabled");
            let p = from as usize;
            let ev = with_proc(world, p, |sm, port| match sm {
                ProcSm::Ref(_) | ProcSm::None => None,
                ProcSm::Direct(prop) => prop.on_completion(port, ticket, &completion),
                ProcSm::Stream(prop) => prop.on_completion(port, ticket, &completion),
            });
            if let Some(ev) = ev {
                record_event(world, cfg, p, ev, &mut out);
            }
        }
        Choice::Crash { process } => {
            let p = process as usize;
            world.crashes_left -= 1;
            world.alive[p] = false;
            // The region dies with the process: requests toward it vanish
            // and nothing completes back to it.
            for from in 0..n {
                world.ops[from * n + p].clear();
            }
            for to in 0..n {
                world.completions[p * n + to].clear();
            }
        }
    }
    out
}

/// Terminal-state checks beyond the per-transition ones.
fn check_terminal(world: &World, cfg: &ExploreConfig, out: &mut Vec<(ViolationKind, String)>) {
    if cfg.protocol != Protocol::SmrSingleSlot {
        return;
    }
    for (p, pb) in world.procs.iter().enumerate() {
        let Some(v) = pb.sm.decided() else { continue };
        let holders: Vec<usize> = (0..world.n())
            .filter(|a| {
                world.words[*a]
                    .unpack(layout())
                    .map(|s| s.accepted_value == Some(v))
                    .unwrap_or(false)
            })
            .collect();
        if holders.len() < majority(world.n()) {
            out.push((
                ViolationKind::Recoverability,
                format!(
                    "p{p} decided {v} but only {} acceptors hold it",
                    holders.len()
                ),
            ));
            continue;
        }
        for a in holders {
            let state = world.words[a].unpack(layout()).unwrap();
            let writer = state.accepted_proposal.proposer(world.n()).index();
            if world.payloads[a][writer].as_deref() != Some(&smr_payload(v)[..]) {
                out.push((
                    ViolationKind::Recoverability,
                    format!("acceptor {a} holds {v} without its payload"),
                ));
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Exploration
// ---------------------------------------------------------------------------

struct Tally {
    states: u64,
    transitions: u64,
    terminals: u64,
    aborts: u64,
    decides: u64,
    census: BTreeMap<String, u64>,
    violations: Vec<Violation>,
    complete: bool,
}

impl Tally {
    fn new() -> Tally {
        Tally {
            states: 0,
            transitions: 0,
            terminals: 0,
            aborts: 0,
            decides: 0,
            census: BTreeMap::new(),
            violations: Vec::new(),
            complete: true,
        }
    }

    fn merge(&mut self, other: Tally) {
        self.states += other.states;
        self.transitions += other.transitions;
        self.terminals += other.terminals;
        self.aborts += other.aborts;
        self.decides += other.decides;
        for (k, v) in other.census {
            *self.census.entry(k).or_default() += v;
        }
        self.violations.extend(other.violations);
        self.complete &= other.complete;
    }

    fn note_issues(&mut self, issues: Vec<(ViolationKind, String)>, path: &[Choice]) {
        for (kind, detail) in issues {
            if self.violations.len() < 32 {
                self.violations.push(Violation {
                    kind,
                    detail,
                    witness: path.to_vec(),
                });
            }
        }
    }
}

trait Visited {
    fn insert(&self, fp: u128) -> bool;
}

struct LocalVisited(std::cell::RefCell<HashSet<u128>>);

impl Visited for LocalVisited {
    fn insert(&self, fp: u128) -> bool {
        self.0.borrow_mut().insert(fp)
    }
}

#[cfg(feature = "parallel")]
struct SharedVisited(dashmap::DashSet<u128>);

#[cfg(feature = "parallel")]
impl Visited for SharedVisited {
    fn insert(&self, fp: u128) -> bool {
        self.0.insert(fp)
    }
}

fn dfs(
    world: &World,
    cfg: &ExploreConfig,
    visited: &dyn Visited,
    budget_left: &std::sync::atomic::AtomicI64,
    found: &std::sync::atomic::AtomicBool,
    tally: &mut Tally,
    path: &mut Vec<Choice>,
) {
    if cfg.stop_at_first_violation && found.load(std::sync::atomic::Ordering::Relaxed) {
        tally.complete = false;
        return;
    }
    let choices = world.enabled(cfg);
    if choices.is_empty() {
        tally.terminals += 1;
        *tally.census.entry(world.census_key(cfg)).or_default() += 1;
        let mut issues = Vec::new();
        check_terminal(world, cfg, &mut issues);
        tally.note_issues(issues, path);
        return;
    }
    for choice in choices {
        if budget_left.fetch_sub(1, std::sync::atomic::Ordering::Relaxed) <= 0 {
            tally.complete = false;
            return;
        }
        tally.transitions += 1;
        let mut next = world.clone();
        let out = apply_choice(&mut next, cfg, choice);
        tally.aborts += out.aborts;
        tally.decides += out.decides;
        path.push(choice);
        if !out.issues.is_empty() {
            found.store(true, std::sync::atomic::Ordering::Relaxed);
        }
        tally.note_issues(out.issues, path);
        if visited.insert(next.fingerprint()) {
            tally.states += 1;
            dfs(&next, cfg, visited, budget_left, found, tally, path);
        }
        path.pop();
    }
}

/// Explore every schedule of the configured protocol. The report is sound:
/// every listed violation replays, and `complete` says whether the whole
/// bounded state space was covered within budget.
pub fn explore(cfg: &ExploreConfig) -> ExploreReport {
    cfg.validate();
    let root = World::new(cfg);
    let budget = std::sync::atomic::AtomicI64::new(cfg.budget as i64);
    let found = std::sync::atomic::AtomicBool::new(false);
    let mut tally = Tally::new();

    #[cfg(feature = "parallel")]
    if cfg.parallel {
        use rayon::prelude::*;
        let visited = SharedVisited(dashmap::DashSet::new());
        visited.insert(root.fingerprint());
        tally.states += 1;
        // Breadth-first expansion until there are enough distinct subtrees
        // to keep the pool busy, then depth-first per subtree with the
        // shared visited set deduplicating across workers.
        let target = 8 * rayon::current_num_threads().max(2);
        let mut frontier: Vec<(World, Vec<Choice>)> = vec![(root, Vec::new())];
        for _depth in 0..12 {
            if frontier.len() >= target {
                break;
            }
            let mut next_frontier = Vec::new();
            for (world, path) in frontier.drain(..) {
                let choices = world.enabled(cfg);
                if choices.is_empty() {
                    tally.terminals += 1;
                    *tally.census.entry(world.census_key(cfg)).or_default() += 1;
                    let mut issues = Vec::new();
                    check_terminal(&world, cfg, &mut issues);
                    tally.note_issues(issues, &path);
                    continue;
                }
                for choice in choices {
                    budget.fetch_sub(1, std::sync::atomic::Ordering::Relaxed);
                    tally.transitions += 1;
                    let mut next = world.clone();
                    let out = apply_choice(&mut next, cfg, choice);
                    tally.aborts += out.aborts;
                    tally.decides += out.decides;
                    let mut path = path.clone();
                    path.push(choice);
                    if !out.issues.is_empty() {
                        found.store(true, std::sync::atomic::Ordering::Relaxed);
                    }
                    tally.note_issues(out.issues, &path);
                    if visited.insert(next.fingerprint()) {
                        tally.states += 1;
                        next_frontier.push((next, path));
                    }
                }
            }
            frontier = next_frontier;
            if frontier.is_empty() {
                break;
            }
        }
        let sub: Vec<Tally> = frontier
            .into_par_iter()
            .map(|(world, prefix)| {
                let mut t = Tally::new();
                let mut path = prefix;
                dfs(&world, cfg, &visited, &budget, &found, &mut t, &mut path);
                t
            })
            .collect();
        for t in sub {
            tally.merge(t);
        }
        return finish(cfg, tally);
    }

    let visited = LocalVisited(std::cell::RefCell::new(HashSet::new()));
    visited.insert(root.fingerprint());
    tally.states += 1;
    let mut path = Vec::new();
    dfs(&root, cfg, &visited, &budget, &found, &mut tally, &mut path);
    finish(cfg, tally)
}

fn finish(cfg: &ExploreConfig, tally: Tally) -> ExploreReport {
    ExploreReport {
        protocol: cfg.protocol.name().to_string(),
        states: tally.states,
        transitions: tally.transitions,
        terminals: tally.terminals,
        outcome_census: tally.census,
        abort_events: tally.aborts,
        decide_events: tally.decides,
        violations: tally.violations,
        complete: tally.complete,
    }
}

/// Re-execute a witness schedule deterministically, returning the issues it
/// produces in order.
pub fn replay(cfg: &ExploreConfig, witness: &[Choice]) -> Vec<(ViolationKind, String)> {
    cfg.validate();
    let mut world = World::new(cfg);
    let mut issues = Vec::new();
    for (i, choice) in witness.iter().enumerate() {
        let enabled = world.enabled(cfg);
        assert!(
            enabled.contains(choice),
            "witness step {i} ({choice:?}) not enabled; witness does not replay"
        );
        let out = apply_choice(&mut world, cfg, *choice);
        issues.extend(out.issues);
    }
    if world.enabled(cfg).is_empty() {
        check_terminal(&world, cfg, &mut issues);
    }
    issues
}
