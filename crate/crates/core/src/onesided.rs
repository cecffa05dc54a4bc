//! One-sided abortable consensus: prepare and accept run as CAS invocations
//! against the acceptors' slot words, driven entirely by the proposer.
//!
//! Two proposer forms share the leg machinery from [`crate::casrpc`]:
//!
//! - [`DirectProposer`] fetches every remote word fresh before swapping
//!   (two round trips per phase).
//! - [`StreamlinedProposer`] swaps against cached predicted states, bumps its
//!   proposal upfront above every predicted promise, and fans the CASes out
//!   in parallel, deciding in two CAS round trips when predictions hold. A
//!   wrong prediction costs an abort, never safety; aborts refresh the cache
//!   so a lone proposer converges within a bounded number of attempts.
//!
//! Acceptors whose promise field approaches the packed-word capacity are
//! switched to message transport per slot; the phase then mixes CAS legs and
//! message legs against one majority.

use crate::casrpc::{AcceptSpec, CasRpcLeg, CasRpcResult, Fetch, PrepareSpec};
use crate::defect::Defect;
use crate::fabric::{Completion, Port, SlotIndex, TicketId, TraceRecord};
use crate::msg::Message;
use crate::types::{
    majority, next_proposal, AcceptorState, Outcome, ProcessId, ProposalNumber, SlotLayout,
    SlotWord, ValueId,
};
use std::collections::BTreeMap;

/// How a proposer talks to one acceptor for one slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Transport {
    Cas,
    /// Fallback: classic request/reply against the acceptor's handler.
    Rpc,
}

/// Resolution of a propose call or pre-preparation phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProposeEvent {
    /// Prepare-only run finished its phase successfully.
    Prepared,
    Decided(ValueId),
    Aborted,
}

impl ProposeEvent {
    pub fn outcome(self) -> Outcome {
        match self {
            ProposeEvent::Decided(v) => Outcome::Decide(v),
            _ => Outcome::Abort,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RunMode {
    Full,
    /// Stop after a successful prepare (slot pre-preparation).
    PrepareOnly,
    /// Skip prepare; the slot is already prepared under our proposal.
    AcceptOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum PhaseKind {
    Prepare,
    Accept,
}

/// One per-acceptor leg of a streamlined phase.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum StreamLeg {
    CasPrepare(CasRpcLeg<PrepareSpec>),
    CasAccept(CasRpcLeg<AcceptSpec>),
    /// Message leg awaiting a reply matched on the current proposal.
    Rpc,
    Resolved,
}

/// In-flight op bookkeeping, kept past phase end so straggler completions
/// still refresh predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct TicketCtx {
    acceptor: usize,
    expected: SlotWord,
    desired: SlotWord,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum Phase {
    Idle,
    Running {
        kind: PhaseKind,
        legs: Vec<StreamLeg>,
        /// Observed old word (CAS) or reply-derived word view, per acceptor.
        reads: Vec<Option<SlotWord>>,
        expected: Vec<Option<SlotWord>>,
        desired: Vec<Option<SlotWord>>,
        completed: usize,
        failed: bool,
        evaluated: bool,
    },
}

/// Streamlined one-sided abortable consensus for a single slot.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StreamlinedProposer {
    pub id: ProcessId,
    pub n: usize,
    pub layout: SlotLayout,
    pub slot: SlotIndex,
    pub proposal: ProposalNumber,
    pub predicted: Vec<AcceptorState>,
    pub transports: Vec<Transport>,
    pub value: Option<ValueId>,
    payload: Option<Vec<u8>>,
    pub decided: Option<ValueId>,
    /// Highest accepted pair seen by the last evaluated prepare, if any.
    pub adopted: Option<(ProposalNumber, ValueId)>,
    /// Which acceptors actually answered the last evaluated prepare (as
    /// opposed to being assumed in flight). Only these are known alive and
    /// known to hold what their prediction claims.
    pub prepare_confirmed: Vec<bool>,
    /// The proposal bump entered the fallback range.
    pub overflowed: bool,
    /// Count accept fan-outs as critical-path rounds.
    pub critical_accepts: bool,
    pub defect: Defect,
    mode: RunMode,
    phase: Phase,
    tickets: BTreeMap<TicketId, TicketCtx>,
}

impl StreamlinedProposer {
    pub fn new(
        id: ProcessId,
        n: usize,
        layout: SlotLayout,
        slot: SlotIndex,
    ) -> StreamlinedProposer {
        StreamlinedProposer {
            id,
            n,
            layout,
            slot,
            proposal: ProposalNumber(id.0 as u64),
            predicted: vec![AcceptorState::INITIAL; n],
            transports: vec![Transport::Cas; n],
            value: None,
            payload: None,
            decided: None,
            adopted: None,
            prepare_confirmed: vec![false; n],
            overflowed: false,
            critical_accepts: false,
            defect: Defect::NONE,
            mode: RunMode::Full,
            phase: Phase::Idle,
            tickets: BTreeMap::new(),
        }
    }

    pub fn in_flight(&self) -> bool {
        self.phase != Phase::Idle
    }

    /// True when `ticket` belongs to one of this proposer's CAS legs,
    /// including stragglers from already-evaluated phases.
    pub fn owns_ticket(&self, ticket: TicketId) -> bool {
        self.tickets.contains_key(&ticket)
    }

    pub fn set_predictions(&mut self, predicted: Vec<AcceptorState>) {
        assert_eq!(predicted.len(), self.n);
        self.predicted = predicted;
        self.refresh_transports();
    }

    /// Adopt a shared leadership proposal (same residue required).
    pub fn set_proposal(&mut self, proposal: ProposalNumber) {
        assert_eq!(proposal.0 % self.n as u64, self.id.0 as u64 % self.n as u64);
        self.proposal = proposal;
    }

    /// Start one attempt. Completions and replies must then be routed back
    /// through [`Self::on_completion`] / [`Self::on_message`]. An attempt
    /// whose every leg resolves at issue time (all refusals predicted)
    /// returns its event immediately.
    pub fn propose(
        &mut self,
        port: &mut dyn Port,
        mode: RunMode,
        value: ValueId,
        payload: Option<Vec<u8>>,
    ) -> Option<ProposeEvent> {
        assert!(!self.in_flight(), "one propose at a time");
        assert!(self.decided.is_none(), "instance already decided");
        self.mode = mode;
        self.value = Some(value);
        self.payload = payload;
        match mode {
            RunMode::AcceptOnly => self.start_accept(port),
            _ => {
                self.start_prepare(port);
                None
            }
        }
    }

    fn threshold(&self) -> ProposalNumber {
        self.layout.fallback_threshold(self.n)
    }

    fn refresh_transports(&mut self) {
        let threshold = self.threshold();
        for a in 0..self.n {
            if self.predicted[a].min_proposal >= threshold {
                self.transports[a] = Transport::Rpc;
            }
        }
    }

    fn start_prepare(&mut self, port: &mut dyn Port) {
        let mins: Vec<ProposalNumber> = self.predicted.iter().map(|s| s.min_proposal).collect();
        match next_proposal(self.proposal, &mins, self.n, self.layout) {
            Ok(p) => self.proposal = p,
            Err(overflow) => {
                self.proposal = overflow.proposal;
                self.overflowed = true;
            }
        }
        self.refresh_transports();
        // Past the packed range, every remaining leg must use messages.
        if self.proposal > self.layout.max_proposal() {
            self.transports = vec![Transport::Rpc; self.n];
        }
        port.count_round(false);
        let mut legs = Vec::with_capacity(self.n);
        let mut expected = vec![None; self.n];
        let mut desired = vec![None; self.n];
        for a in 0..self.n {
            match self.transports[a] {
                Transport::Cas => {
                    let mut leg = CasRpcLeg::new(
                        PrepareSpec,
                        self.proposal,
                        ProcessId(a as u32),
                        self.slot,
                        self.layout,
                    );
                    let immediate = leg.start(port, Fetch::Predicted(self.predicted[a]));
                    // The upfront bump guarantees the comparison holds.
                    assert!(immediate.is_none(), "bumped proposal cannot fail compare");
                    expected[a] = leg.expected;
                    desired[a] = leg.move_to;
                    self.note_ticket(&leg, a);
                    legs.push(StreamLeg::CasPrepare(leg));
                }
                Transport::Rpc => {
                    port.send(
                        ProcessId(a as u32),
                        Message::Prepare {
                            slot: self.slot,
                            proposal: self.proposal,
                        },
                    );
                    legs.push(StreamLeg::Rpc);
                }
            }
        }
        self.phase = Phase::Running {
            kind: PhaseKind::Prepare,
            legs,
            reads: vec![None; self.n],
            expected,
            desired,
            completed: 0,
            failed: false,
            evaluated: false,
        };
    }

    fn start_accept(&mut self, port: &mut dyn Port) -> Option<ProposeEvent> {
        let value = self.value.expect("accept needs a value");
        port.count_round(self.critical_accepts);
        let mut legs = Vec::with_capacity(self.n);
        let mut expected = vec![None; self.n];
        let mut desired = vec![None; self.n];
        for a in 0..self.n {
            match self.transports[a] {
                Transport::Cas => {
                    let mut leg = CasRpcLeg::new(
                        AcceptSpec,
                        (self.proposal, value),
                        ProcessId(a as u32),
                        self.slot,
                        self.layout,
                    );
                    if let Some(bytes) = &self.payload {
                        leg = leg.with_payload(bytes.clone());
                    }
                    match leg.start(port, Fetch::Predicted(self.predicted[a])) {
                        None => {
                            expected[a] = leg.expected;
                            desired[a] = leg.move_to;
                            self.note_ticket(&leg, a);
                            legs.push(StreamLeg::CasAccept(leg));
                        }
                        // Predicted promise above our proposal: the phase is
                        // doomed at this acceptor; record the refusal without
                        // issuing a CAS.
                        Some(CasRpcResult::Reply(min)) => {
                            debug_assert!(min > self.proposal);
                            legs.push(StreamLeg::Resolved);
                        }
                        Some(CasRpcResult::Aborted) => unreachable!(),
                    }
                }
                Transport::Rpc => {
                    // Payload rides a plain write ordered before the accept
                    // message on the same link.
                    if let Some(bytes) = &self.payload.clone() {
                        port.post_write(ProcessId(a as u32), self.slot, bytes);
                    }
                    port.send(
                        ProcessId(a as u32),
                        Message::Accept {
                            slot: self.slot,
                            proposal: self.proposal,
                            value,
                        },
                    );
                    legs.push(StreamLeg::Rpc);
                }
            }
        }
        let refused = legs.iter().filter(|l| **l == StreamLeg::Resolved).count();
        self.phase = Phase::Running {
            kind: PhaseKind::Accept,
            legs,
            reads: vec![None; self.n],
            expected,
            desired,
            completed: refused,
            failed: refused > 0,
            evaluated: false,
        };
        self.maybe_evaluate(port)
    }

    fn note_ticket<S: crate::casrpc::RpcSpec>(&mut self, leg: &CasRpcLeg<S>, acceptor: usize) {
        if let (Some(expected), Some(desired)) = (leg.expected, leg.move_to) {
            let ticket = leg.ticket().expect("cas leg has a ticket in flight");
            self.tickets.insert(
                ticket,
                TicketCtx {
                    acceptor,
                    expected,
                    desired,
                },
            );
        }
    }

    /// The prediction update rule: a completed CAS that found its expected
    /// word moved it to `desired`; anything else reveals the actual word.
    fn note_cas_result(&mut self, ctx: TicketCtx, old: SlotWord) {
        let next = if old == ctx.expected {
            ctx.desired
        } else {
            old
        };
        self.predicted[ctx.acceptor] = next
            .unpack(self.layout)
            .expect("acceptor words are well-formed");
        self.refresh_transports();
    }

    pub fn on_completion(
        &mut self,
        port: &mut dyn Port,
        ticket: TicketId,
        completion: &Completion,
    ) -> Option<ProposeEvent> {
        let Some(ctx) = self.tickets.remove(&ticket) else {
            return None;
        };
        if let Completion::Cas { old } = completion {
            self.note_cas_result(ctx, *old);
        }
        let Phase::Running {
            legs,
            reads,
            completed,
            failed,
            ..
        } = &mut self.phase
        else {
            return None; // straggler from an earlier phase
        };
        let a = ctx.acceptor;
        let resolution = match &mut legs[a] {
            StreamLeg::CasPrepare(leg) if leg.owns(ticket) => leg
                .on_completion(port, ticket, completion)
                .map(|r| match r {
                    CasRpcResult::Reply(_) => true,
                    CasRpcResult::Aborted => false,
                }),
            StreamLeg::CasAccept(leg) if leg.owns(ticket) => leg
                .on_completion(port, ticket, completion)
                .map(|r| match r {
                    CasRpcResult::Reply(_) => true,
                    CasRpcResult::Aborted => false,
                }),
            _ => None, // straggler from an earlier phase
        };
        let Some(ok) = resolution else {
            return None;
        };
        if let Completion::Cas { old } = completion {
            reads[a] = Some(*old);
        }
        legs[a] = StreamLeg::Resolved;
        *completed += 1;
        *failed |= !ok;
        self.maybe_evaluate(port)
    }

    pub fn on_message(
        &mut self,
        port: &mut dyn Port,
        src: ProcessId,
        msg: Message,
    ) -> Option<ProposeEvent> {
        let Phase::Running {
            kind,
            legs,
            reads,
            completed,
            failed,
            ..
        } = &mut self.phase
        else {
            return None;
        };
        let a = src.index();
        if a >= self.n || legs[a] != StreamLeg::Rpc {
            return None;
        }
        match (kind, msg) {
            (PhaseKind::Prepare, Message::Prepared { slot, re, reply })
                if slot == self.slot && re == self.proposal =>
            {
                self.predicted[a] = AcceptorState {
                    min_proposal: reply.min_proposal,
                    accepted_proposal: reply.accepted_proposal,
                    accepted_value: reply.accepted_value,
                };
                reads[a] = self.predicted[a].pack(self.layout).ok();
                legs[a] = StreamLeg::Resolved;
                *completed += 1;
                *failed |= !reply.ack;
            }
            (
                PhaseKind::Accept,
                Message::Accepted {
                    slot,
                    re,
                    min_proposal,
                },
            ) if slot == self.slot && re == self.proposal => {
                let ok = min_proposal <= self.proposal;
                if ok {
                    self.predicted[a] = AcceptorState {
                        min_proposal: self.proposal,
                        accepted_proposal: self.proposal,
                        accepted_value: self.value,
                    };
                } else {
                    self.predicted[a].min_proposal = min_proposal;
                }
                reads[a] = self.predicted[a].pack(self.layout).ok();
                legs[a] = StreamLeg::Resolved;
                *completed += 1;
                *failed |= !ok;
            }
            _ => return None,
        }
        self.refresh_transports();
        self.maybe_evaluate(port)
    }

    fn maybe_evaluate(&mut self, port: &mut dyn Port) -> Option<ProposeEvent> {
        let ready = matches!(
            &self.phase,
            Phase::Running { completed, evaluated, .. }
                if !*evaluated && *completed >= majority(self.n)
        );
        if !ready {
            return None;
        }
        let Phase::Running {
            kind,
            legs,
            reads,
            expected,
            desired,
            failed,
            ..
        } = std::mem::replace(&mut self.phase, Phase::Idle)
        else {
            unreachable!()
        };
        // Optimistically assume in-flight CASes will find their expected
        // word; a wrong guess surfaces later as a superfluous abort. The
        // tickets map keeps routing their eventual completions into the
        // prediction cache.
        for (a, leg) in legs.iter().enumerate() {
            if !matches!(leg, StreamLeg::Resolved) {
                if let Some(w) = desired[a] {
                    self.predicted[a] = w.unpack(self.layout).expect("desired word well-formed");
                }
            }
        }
        let (phase_name, outcome_ok) = match kind {
            PhaseKind::Prepare => ("prepare", !failed),
            PhaseKind::Accept => ("accept", !failed || self.defect.skip_cas_fail_abort),
        };
        port.emit(TraceRecord::Phase {
            t_us: port.now().as_us(),
            process: self.id.0,
            slot: self.slot,
            phase: phase_name.into(),
            proposal: self.proposal.0,
            expected: expected.iter().map(|w| w.unwrap_or_default().0).collect(),
            desired: desired.iter().map(|w| w.unwrap_or_default().0).collect(),
            read: reads.iter().map(|w| w.map(|x| x.0)).collect(),
            outcome: if outcome_ok {
                "ok".into()
            } else {
                "abort".into()
            },
        });
        match kind {
            PhaseKind::Prepare => {
                self.prepare_confirmed = legs
                    .iter()
                    .map(|l| matches!(l, StreamLeg::Resolved))
                    .collect();
                if failed {
                    return Some(ProposeEvent::Aborted);
                }
                self.adopt();
                if self.mode == RunMode::PrepareOnly {
                    return Some(ProposeEvent::Prepared);
                }
                self.start_accept(port)
            }
            PhaseKind::Accept => {
                if !outcome_ok {
                    return Some(ProposeEvent::Aborted);
                }
                let value = self.value.expect("value set in propose");
                self.decided = Some(value);
                port.emit(TraceRecord::Decide {
                    t_us: port.now().as_us(),
                    process: self.id.0,
                    slot: self.slot,
                    value: value.0,
                });
                Some(ProposeEvent::Decided(value))
            }
        }
    }

    /// Pick the accepted value with the highest accepted proposal across the
    /// predicted states; equal proposals cannot name distinct values because
    /// proposal numbers are residue-unique.
    fn adopt(&mut self) {
        let mut best: Option<(ProposalNumber, ValueId)> = None;
        for s in &self.predicted {
            if let (p, Some(v)) = (s.accepted_proposal, s.accepted_value) {
                match best {
                    Some((bp, bv)) if bp == p => {
                        assert_eq!(bv, v, "distinct values at one accepted proposal");
                    }
                    Some((bp, _)) if bp > p => {}
                    _ => best = Some((p, v)),
                }
            }
        }
        self.adopted = best;
        if let Some((_, v)) = best {
            if !self.defect.skip_adoption {
                self.value = Some(v);
            }
        }
    }
}

/// Direct one-sided abortable consensus: every leg fetches fresh state.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DirectProposer {
    pub id: ProcessId,
    pub n: usize,
    pub layout: SlotLayout,
    pub slot: SlotIndex,
    pub proposal: ProposalNumber,
    pub value: Option<ValueId>,
    pub decided: Option<ValueId>,
    /// Promises observed in replies, usable to seed a streamlined retry.
    pub observed_mins: Vec<ProposalNumber>,
    pub defect: Defect,
    phase: DirectPhase,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum DirectPhase {
    Idle,
    Prepare {
        legs: Vec<CasRpcLeg<PrepareSpec>>,
        results: Vec<Option<Result<crate::msg::PreparedReply, ()>>>,
        evaluated: bool,
    },
    Accept {
        legs: Vec<CasRpcLeg<AcceptSpec>>,
        results: Vec<Option<Result<ProposalNumber, ()>>>,
        evaluated: bool,
    },
}

impl DirectProposer {
    pub fn new(id: ProcessId, n: usize, layout: SlotLayout, slot: SlotIndex) -> DirectProposer {
        DirectProposer {
            id,
            n,
            layout,
            slot,
            proposal: ProposalNumber(id.0 as u64),
            value: None,
            decided: None,
            observed_mins: vec![ProposalNumber::ZERO; n],
            defect: Defect::NONE,
            phase: DirectPhase::Idle,
        }
    }

    pub fn in_flight(&self) -> bool {
        self.phase != DirectPhase::Idle
    }

    pub fn propose(&mut self, port: &mut dyn Port, value: ValueId) {
        assert!(!self.in_flight() && self.decided.is_none());
        self.value = Some(value);
        self.proposal = ProposalNumber(self.proposal.0 + self.n as u64);
        port.count_round(false);
        let mut legs = Vec::with_capacity(self.n);
        for a in 0..self.n {
            let mut leg = CasRpcLeg::new(
                PrepareSpec,
                self.proposal,
                ProcessId(a as u32),
                self.slot,
                self.layout,
            );
            let immediate = leg.start(port, Fetch::Fresh);
            debug_assert!(immediate.is_none());
            legs.push(leg);
        }
        self.phase = DirectPhase::Prepare {
            legs,
            results: vec![None; self.n],
            evaluated: false,
        };
    }

    pub fn on_completion(
        &mut self,
        port: &mut dyn Port,
        ticket: TicketId,
        completion: &Completion,
    ) -> Option<ProposeEvent> {
        match &mut self.phase {
            DirectPhase::Prepare { legs, results, .. } => {
                let Some(a) = legs.iter().position(|l| l.owns(ticket)) else {
                    return None;
                };
                let resolved = legs[a].on_completion(port, ticket, completion)?;
                results[a] = Some(match resolved {
                    CasRpcResult::Reply(reply) => {
                        self.observed_mins[a] = reply.min_proposal;
                        Ok(reply)
                    }
                    CasRpcResult::Aborted => Err(()),
                });
                self.evaluate_prepare(port)
            }
            DirectPhase::Accept { legs, results, .. } => {
                let Some(a) = legs.iter().position(|l| l.owns(ticket)) else {
                    return None;
                };
                let resolved = legs[a].on_completion(port, ticket, completion)?;
                results[a] = Some(match resolved {
                    CasRpcResult::Reply(min) => {
                        self.observed_mins[a] = min.max(self.observed_mins[a]);
                        Ok(min)
                    }
                    CasRpcResult::Aborted => Err(()),
                });
                self.evaluate_accept(port)
            }
            DirectPhase::Idle => None,
        }
    }

    fn evaluate_prepare(&mut self, port: &mut dyn Port) -> Option<ProposeEvent> {
        let DirectPhase::Prepare {
            results, evaluated, ..
        } = &mut self.phase
        else {
            unreachable!()
        };
        if *evaluated {
            return None;
        }
        let resolved: Vec<&Result<crate::msg::PreparedReply, ()>> =
            results.iter().flatten().collect();
        if resolved.len() < majority(self.n) {
            return None;
        }
        *evaluated = true;
        // Adoption precedes the abort check.
        let best = resolved
            .iter()
            .filter_map(|r| r.as_ref().ok())
            .filter(|r| r.accepted_value.is_some())
            .max_by_key(|r| r.accepted_proposal);
        if let Some(best) = best {
            if !self.defect.skip_adoption {
                self.value = best.accepted_value;
            }
        }
        let doomed = resolved.iter().any(|r| match r {
            Ok(reply) => !reply.ack,
            Err(()) => true,
        });
        if doomed {
            self.phase = DirectPhase::Idle;
            return Some(ProposeEvent::Aborted);
        }
        port.count_round(false);
        let value = self.value.expect("value set in propose");
        let mut legs = Vec::with_capacity(self.n);
        for a in 0..self.n {
            let mut leg = CasRpcLeg::new(
                AcceptSpec,
                (self.proposal, value),
                ProcessId(a as u32),
                self.slot,
                self.layout,
            );
            let immediate = leg.start(port, Fetch::Fresh);
            debug_assert!(immediate.is_none());
            legs.push(leg);
        }
        self.phase = DirectPhase::Accept {
            legs,
            results: vec![None; self.n],
            evaluated: false,
        };
        None
    }

    fn evaluate_accept(&mut self, port: &mut dyn Port) -> Option<ProposeEvent> {
        let DirectPhase::Accept {
            results, evaluated, ..
        } = &mut self.phase
        else {
            unreachable!()
        };
        if *evaluated {
            return None;
        }
        let resolved: Vec<&Result<ProposalNumber, ()>> = results.iter().flatten().collect();
        if resolved.len() < majority(self.n) {
            return None;
        }
        *evaluated = true;
        let doomed = resolved.iter().any(|r| match r {
            Ok(min) => *min > self.proposal,
            Err(()) => true,
        });
        self.phase = DirectPhase::Idle;
        if doomed && !self.defect.skip_cas_fail_abort {
            return Some(ProposeEvent::Aborted);
        }
        let value = self.value.expect("value set in propose");
        self.decided = Some(value);
        port.emit(TraceRecord::Decide {
            t_us: port.now().as_us(),
            process: self.id.0,
            slot: self.slot,
            value: value.0,
        });
        Some(ProposeEvent::Decided(value))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::casrpc::{CasRpcLeg, CasRpcResult, Fetch, PrepareSpec};
    use crate::fabric::{Fabric, FabricConfig, OpKind, Sim, TraceSink, VTime};
    use crate::rpcpaxos::HostNode;

    fn st(min: u64, acc: u64, v: Option<u8>) -> AcceptorState {
        AcceptorState::new(min, acc, v)
    }

    fn sim(n: u32, seed: u64) -> Sim<HostNode> {
        let cfg = FabricConfig {
            processes: n,
            seed,
            ..Default::default()
        };
        Sim::new(
            Fabric::new(cfg, TraceSink::Memory(Vec::new())),
            (0..n).map(|_| HostNode::default()).collect(),
        )
    }

    enum Sm<'a> {
        Stream(&'a mut StreamlinedProposer),
        Direct(&'a mut DirectProposer),
    }

    /// Route every queued completion/reply at `me` into the proposer.
    fn drain(sim: &mut Sim<HostNode>, sm: &mut Sm) -> Option<ProposeEvent> {
        let me = match sm {
            Sm::Stream(p) => p.id,
            Sm::Direct(p) => p.id,
        };
        let completions: Vec<_> = sim.nodes[me.index()].completions.drain(..).collect();
        let replies: Vec<_> = sim.nodes[me.index()].replies.drain(..).collect();
        let mut out = None;
        for (ticket, completion) in completions {
            let ev = sim.with_port(me, |port, _| match sm {
                Sm::Stream(p) => p.on_completion(port, ticket, &completion),
                Sm::Direct(p) => p.on_completion(port, ticket, &completion),
            });
            out = out.or(ev);
        }
        for (src, msg) in replies {
            let ev = match sm {
                Sm::Stream(p) => sim.with_port(me, |port, _| p.on_message(port, src, msg)),
                Sm::Direct(_) => None,
            };
            out = out.or(ev);
        }
        out
    }

    fn pump(sim: &mut Sim<HostNode>, sm: &mut Sm) -> ProposeEvent {
        loop {
            if let Some(ev) = drain(sim, sm) {
                return ev;
            }
            assert!(sim.step(), "drained fabric without an outcome");
        }
    }

    #[test]
    fn streamlined_solo_correct_predictions_decides_in_two_cas_rounds() {
        let mut s = sim(3, 1);
        let mut p = StreamlinedProposer::new(ProcessId(0), 3, SlotLayout::default(), 0);
        s.with_port(ProcessId(0), |port, _| {
            p.propose(port, RunMode::Full, ValueId(1), None)
        });
        let ev = pump(&mut s, &mut Sm::Stream(&mut p));
        assert_eq!(ev, ProposeEvent::Decided(ValueId(1)));
        assert_eq!(s.fabric.counters().issued_total(OpKind::Cas), 6);
        assert_eq!(s.fabric.counters().issued_total(OpKind::Read), 0);
        assert_eq!(s.fabric.counters().rounds[0], 2);
        let layout = SlotLayout::default();
        s.run_to_quiescence(1000);
        for a in 0..3 {
            assert_eq!(
                s.fabric.word(ProcessId(a), 0).unpack(layout).unwrap(),
                st(3, 3, Some(1))
            );
        }
        s.fabric.audit().unwrap();
    }

    #[test]
    fn direct_solo_decides_with_fresh_fetch_per_phase() {
        let mut s = sim(3, 1);
        let mut p = DirectProposer::new(ProcessId(1), 3, SlotLayout::default(), 0);
        s.with_port(ProcessId(1), |port, _| p.propose(port, ValueId(2)));
        let ev = pump(&mut s, &mut Sm::Direct(&mut p));
        assert_eq!(ev, ProposeEvent::Decided(ValueId(2)));
        assert_eq!(p.proposal, ProposalNumber(4)); // id + n
        assert_eq!(s.fabric.counters().issued_total(OpKind::Read), 6);
        assert_eq!(s.fabric.counters().issued_total(OpKind::Cas), 6);
        assert_eq!(s.fabric.counters().rounds[1], 2);
    }

    #[test]
    fn cas_prepare_fresh_fetch_with_low_proposal_replies_without_cas() {
        // Remote promise already at 5; a fresh-fetching prepare at 3 reports
        // the refusal and issues no CAS.
        let layout = SlotLayout::default();
        let mut s = sim(2, 1);
        s.fabric
            .preset_word(ProcessId(1), 0, st(5, 0, None).pack(layout).unwrap());
        let mut leg = CasRpcLeg::new(PrepareSpec, ProposalNumber(3), ProcessId(1), 0, layout);
        s.with_port(ProcessId(0), |port, _| leg.start(port, Fetch::Fresh));
        let mut result = None;
        while result.is_none() {
            assert!(s.step());
            let pending: Vec<_> = s.nodes[0].completions.drain(..).collect();
            for (t, c) in pending {
                result = s.with_port(ProcessId(0), |port, _| leg.on_completion(port, t, &c));
            }
        }
        let CasRpcResult::Reply(reply) = result.unwrap() else {
            panic!("expected reply");
        };
        assert!(!reply.ack);
        assert_eq!(reply.accepted_proposal, ProposalNumber(0));
        assert_eq!(reply.accepted_value, None);
        assert_eq!(s.fabric.counters().issued_total(OpKind::Cas), 0);
    }

    #[test]
    fn stale_prediction_aborts_and_leaves_word_unchanged() {
        // Remote word moved to {1,0,none}; a prepare still predicting the
        // initial state aborts without touching it.
        let layout = SlotLayout::default();
        let mut s = sim(2, 1);
        let moved = st(1, 0, None).pack(layout).unwrap();
        s.fabric.preset_word(ProcessId(1), 0, moved);
        let mut p = StreamlinedProposer::new(ProcessId(0), 2, layout, 0);
        s.with_port(ProcessId(0), |port, _| {
            p.propose(port, RunMode::Full, ValueId(0), None)
        });
        let ev = pump(&mut s, &mut Sm::Stream(&mut p));
        assert_eq!(ev, ProposeEvent::Aborted);
        assert_eq!(s.fabric.word(ProcessId(1), 0), moved);
        // The abort refreshed the prediction from the read-back word.
        assert_eq!(p.predicted[1], st(1, 0, None));
    }

    #[test]
    fn race_loser_aborts_despite_larger_proposal_then_adopts() {
        let layout = SlotLayout::default();
        let mut s = sim(3, 1);
        let mut first = StreamlinedProposer::new(ProcessId(1), 3, layout, 0);
        let mut second = StreamlinedProposer::new(ProcessId(0), 3, layout, 0);

        // First proposer (smaller proposal number 1) runs to decision.
        s.with_port(ProcessId(1), |port, _| {
            first.propose(port, RunMode::Full, ValueId(1), None)
        });
        let ev = pump(&mut s, &mut Sm::Stream(&mut first));
        assert_eq!(ev, ProposeEvent::Decided(ValueId(1)));
        s.run_to_quiescence(1000);

        // Second proposer bumps to 3 > 1 but still aborts: its CASes expect
        // the initial word.
        s.with_port(ProcessId(0), |port, _| {
            second.propose(port, RunMode::Full, ValueId(2), None)
        });
        assert_eq!(second.proposal, ProposalNumber(3));
        let ev = pump(&mut s, &mut Sm::Stream(&mut second));
        assert_eq!(ev, ProposeEvent::Aborted);

        // Retry adopts the decided value: agreement holds.
        s.with_port(ProcessId(0), |port, _| {
            second.propose(port, RunMode::Full, ValueId(2), None)
        });
        let ev = pump(&mut s, &mut Sm::Stream(&mut second));
        assert_eq!(ev, ProposeEvent::Decided(ValueId(1)));
    }

    #[test]
    fn wrong_predictions_converge_within_group_size_attempts() {
        let layout = SlotLayout::default();
        let mut s = sim(3, 7);
        s.fabric
            .preset_word(ProcessId(0), 0, st(5, 0, None).pack(layout).unwrap());
        s.fabric
            .preset_word(ProcessId(1), 0, st(7, 7, Some(1)).pack(layout).unwrap());
        let mut p = StreamlinedProposer::new(ProcessId(0), 3, layout, 0);
        let mut attempts = 0;
        let decided = loop {
            attempts += 1;
            assert!(attempts <= 3, "should converge within n attempts");
            s.with_port(ProcessId(0), |port, _| {
                p.propose(port, RunMode::Full, ValueId(0), None)
            });
            match pump(&mut s, &mut Sm::Stream(&mut p)) {
                ProposeEvent::Decided(v) => break v,
                ProposeEvent::Aborted => continue,
                ProposeEvent::Prepared => unreachable!(),
            }
        };
        // The accepted pair at proposal 7 must be adopted.
        assert_eq!(decided, ValueId(1));
        assert!(attempts >= 2);
    }

    #[test]
    fn prepare_only_then_accept_only_writes_payload_before_cas() {
        let layout = SlotLayout::default();
        let mut s = sim(3, 3);
        let mut p = StreamlinedProposer::new(ProcessId(0), 3, layout, 0);
        p.critical_accepts = true;
        s.with_port(ProcessId(0), |port, _| {
            p.propose(port, RunMode::PrepareOnly, ValueId(0), None)
        });
        assert_eq!(
            pump(&mut s, &mut Sm::Stream(&mut p)),
            ProposeEvent::Prepared
        );
        assert_eq!(s.fabric.counters().critical_rounds[0], 0);

        s.with_port(ProcessId(0), |port, _| {
            p.propose(port, RunMode::AcceptOnly, ValueId(0), Some(b"abc".to_vec()))
        });
        let ev = pump(&mut s, &mut Sm::Stream(&mut p));
        assert_eq!(ev, ProposeEvent::Decided(ValueId(0)));
        assert_eq!(s.fabric.counters().critical_rounds[0], 1);
        assert_eq!(s.fabric.counters().issued_total(OpKind::WriteCas), 3);
        s.run_to_quiescence(1000);
        for a in 0..3 {
            assert_eq!(
                s.fabric.payload(ProcessId(a), 0, ProcessId(0)),
                Some(&b"abc"[..])
            );
        }
    }

    #[test]
    fn propose_resolves_with_a_majority_alive_and_blocks_without_one() {
        // One dead acceptor of three: the attempt still resolves.
        let mut s = sim(3, 6);
        s.fabric.schedule_crash(ProcessId(2), VTime::ZERO);
        let mut p = StreamlinedProposer::new(ProcessId(0), 3, SlotLayout::default(), 0);
        s.with_port(ProcessId(0), |port, _| {
            p.propose(port, RunMode::Full, ValueId(1), None)
        });
        assert_eq!(
            pump(&mut s, &mut Sm::Stream(&mut p)),
            ProposeEvent::Decided(ValueId(1))
        );

        // Two dead acceptors: the attempt never returns; the fabric goes
        // quiescent with the proposer still in flight.
        let mut s = sim(3, 6);
        s.fabric.schedule_crash(ProcessId(1), VTime::ZERO);
        s.fabric.schedule_crash(ProcessId(2), VTime::ZERO);
        let mut p = StreamlinedProposer::new(ProcessId(0), 3, SlotLayout::default(), 0);
        s.with_port(ProcessId(0), |port, _| {
            p.propose(port, RunMode::Full, ValueId(1), None)
        });
        let mut outcome = None;
        loop {
            let drained = drain(&mut s, &mut Sm::Stream(&mut p));
            outcome = outcome.or(drained);
            if !s.step() {
                break;
            }
        }
        assert_eq!(outcome, None);
        assert!(p.in_flight());
    }

    #[test]
    fn fallback_range_acceptor_in_a_required_majority_switches_to_messages() {
        let layout = SlotLayout::default();
        let n = 3;
        let threshold = layout.fallback_threshold(n);
        let mut s = sim(3, 5);
        let frozen = st(threshold.0, 0, None);
        s.fabric
            .preset_word(ProcessId(2), 0, frozen.pack(layout).unwrap());
        // The acceptor-side handler takes ownership seeded from the word.
        s.nodes[2].acceptor.ctx(0).state = frozen;
        // Crash the other remote acceptor so any majority must include the
        // fallback-range one.
        s.fabric.schedule_crash(ProcessId(1), VTime::ZERO);

        let mut p = StreamlinedProposer::new(ProcessId(0), n, layout, 0);
        s.with_port(ProcessId(0), |port, _| {
            p.propose(port, RunMode::Full, ValueId(2), None)
        });
        let ev = pump(&mut s, &mut Sm::Stream(&mut p));
        assert_eq!(ev, ProposeEvent::Aborted);
        assert_eq!(p.transports[2], Transport::Rpc);
        assert!(matches!(
            crate::types::next_proposal(
                p.proposal,
                &p.predicted
                    .iter()
                    .map(|x| x.min_proposal)
                    .collect::<Vec<_>>(),
                n,
                layout
            ),
            Err(_)
        ));

        // The retry bumps past the fallback threshold (still packable) and
        // decides over a mixed CAS/message majority.
        s.with_port(ProcessId(0), |port, _| {
            p.propose(port, RunMode::Full, ValueId(2), None)
        });
        assert!(p.overflowed);
        assert!(p.proposal > threshold && p.proposal <= layout.max_proposal());
        let ev = pump(&mut s, &mut Sm::Stream(&mut p));
        assert_eq!(ev, ProposeEvent::Decided(ValueId(2)));
        assert!(s.fabric.counters().issued_total(OpKind::Msg) >= 2);
        // The frozen word never moved; the handler owns the state now.
        assert_eq!(s.fabric.word(ProcessId(2), 0), frozen.pack(layout).unwrap());
        assert!(s.nodes[2].acceptor.ctx(0).state.min_proposal > threshold);
    }
}
