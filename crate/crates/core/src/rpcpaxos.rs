//! Message-passing abortable consensus: the classic prepare/accept protocol
//! with explicit RPCs.
//!
//! This module is the correctness oracle for the one-sided protocol and the
//! engine behind the proposal-overflow fallback, so its handlers are written
//! as a direct transcription of the two acceptor rules -- deliberately *not*
//! shared with the `casrpc` specs they are later cross-checked against.
//!
//! Acceptors reply even when a condition fails, so proposers always learn
//! the competing `min_proposal`.

use crate::defect::Defect;
use crate::fabric::{Port, SlotIndex, TraceRecord};
use crate::msg::{Message, PreparedReply};
use crate::types::{majority, AcceptorState, Outcome, ProcessId, ProposalNumber, ValueId};

/// Prepare handler: promise the proposal if it beats the current minimum,
/// and report the accepted pair either way.
pub fn handle_prepare(state: &mut AcceptorState, proposal: ProposalNumber) -> PreparedReply {
    if proposal > state.min_proposal {
        state.min_proposal = proposal;
    }
    PreparedReply {
        ack: state.min_proposal == proposal,
        min_proposal: state.min_proposal,
        accepted_proposal: state.accepted_proposal,
        accepted_value: state.accepted_value,
    }
}

/// Accept handler: store the value if the proposal still meets the promise;
/// reply with the resulting minimum.
pub fn handle_accept(
    state: &mut AcceptorState,
    proposal: ProposalNumber,
    value: ValueId,
) -> ProposalNumber {
    if proposal >= state.min_proposal {
        state.min_proposal = proposal;
        state.accepted_proposal = proposal;
        state.accepted_value = Some(value);
    }
    state.min_proposal
}

/// One acceptor's state for one slot, with monotonicity checked on every
/// handler call (unless a defect is deliberately injected).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AcceptorCtx {
    pub state: AcceptorState,
    pub defect: Defect,
}

impl AcceptorCtx {
    pub fn new() -> AcceptorCtx {
        AcceptorCtx {
            state: AcceptorState::INITIAL,
            defect: Defect::NONE,
        }
    }

    /// Seed from an existing packed state (the fallback handoff).
    pub fn from_state(state: AcceptorState) -> AcceptorCtx {
        AcceptorCtx {
            state,
            defect: Defect::NONE,
        }
    }

    pub fn prepare(&mut self, proposal: ProposalNumber) -> PreparedReply {
        let before = self.state;
        let reply = handle_prepare(&mut self.state, proposal);
        self.assert_monotone(before);
        reply
    }

    pub fn accept(&mut self, proposal: ProposalNumber, value: ValueId) -> ProposalNumber {
        let before = self.state;
        let reply = if self.defect.accept_below_min {
            self.state.min_proposal = proposal;
            self.state.accepted_proposal = proposal;
            self.state.accepted_value = Some(value);
            self.state.min_proposal
        } else {
            handle_accept(&mut self.state, proposal, value)
        };
        self.assert_monotone(before);
        reply
    }

    fn assert_monotone(&self, before: AcceptorState) {
        if self.defect.is_none() {
            debug_assert!(self.state.min_proposal >= before.min_proposal);
            debug_assert!(self.state.accepted_proposal >= before.accepted_proposal);
            debug_assert!(self.state.well_formed());
        }
    }
}

impl Default for AcceptorCtx {
    fn default() -> Self {
        Self::new()
    }
}

/// Acceptor role over fabric messages: one [`AcceptorCtx`] per slot,
/// created on first touch.
#[derive(Debug, Default, Clone, PartialEq, Eq, Hash)]
pub struct RefAcceptor {
    pub slots: std::collections::BTreeMap<SlotIndex, AcceptorCtx>,
    pub defect: Defect,
}

impl RefAcceptor {
    pub fn ctx(&mut self, slot: SlotIndex) -> &mut AcceptorCtx {
        let defect = self.defect;
        self.slots.entry(slot).or_insert_with(|| AcceptorCtx {
            state: AcceptorState::INITIAL,
            defect,
        })
    }

    /// Handle a request message, replying through the port. Non-request
    /// messages are ignored.
    pub fn on_message(&mut self, port: &mut dyn Port, src: ProcessId, msg: Message) {
        match msg {
            Message::Prepare { slot, proposal } => {
                let reply = self.ctx(slot).prepare(proposal);
                port.send(
                    src,
                    Message::Prepared {
                        slot,
                        re: proposal,
                        reply,
                    },
                );
            }
            Message::Accept {
                slot,
                proposal,
                value,
            } => {
                let min = self.ctx(slot).accept(proposal, value);
                port.send(
                    src,
                    Message::Accepted {
                        slot,
                        re: proposal,
                        min_proposal: min,
                    },
                );
            }
            _ => {}
        }
    }
}

/// Simulation node hosting an acceptor: request messages are served in
/// place, everything else (completions, replies, wakeups) queues up for an
/// external driver. Protocol harnesses that keep proposer state machines
/// outside the node tree run on this.
#[derive(Debug, Default)]
pub struct HostNode {
    pub acceptor: RefAcceptor,
    pub completions: Vec<(crate::fabric::TicketId, crate::fabric::Completion)>,
    pub replies: Vec<(ProcessId, Message)>,
    pub wakeups: Vec<u64>,
    pub notices: Vec<ProcessId>,
}

impl crate::fabric::Node for HostNode {
    fn on_completion(
        &mut self,
        _port: &mut dyn Port,
        ticket: crate::fabric::TicketId,
        completion: crate::fabric::Completion,
    ) {
        self.completions.push((ticket, completion));
    }

    fn on_message(&mut self, port: &mut dyn Port, src: ProcessId, msg: Message) {
        match msg {
            Message::Prepare { .. } | Message::Accept { .. } => {
                self.acceptor.on_message(port, src, msg)
            }
            other => self.replies.push((src, other)),
        }
    }

    fn on_wakeup(&mut self, _port: &mut dyn Port, tag: u64) {
        self.wakeups.push(tag);
    }

    fn on_crash_notice(&mut self, _port: &mut dyn Port, crashed: ProcessId) {
        self.notices.push(crashed);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum RefPhase {
    Idle,
    Preparing {
        replies: Vec<Option<PreparedReply>>,
        evaluated: bool,
    },
    Accepting {
        mins: Vec<Option<ProposalNumber>>,
        evaluated: bool,
    },
}

/// Proposer role of the message-passing protocol, driven by reply messages.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RefProposer {
    pub id: ProcessId,
    pub n: usize,
    pub slot: SlotIndex,
    pub proposal: ProposalNumber,
    pub proposed_value: Option<ValueId>,
    pub decided: Option<ValueId>,
    phase: RefPhase,
}

impl RefProposer {
    pub fn new(id: ProcessId, n: usize, slot: SlotIndex) -> RefProposer {
        RefProposer {
            id,
            n,
            slot,
            proposal: ProposalNumber(id.0 as u64),
            proposed_value: None,
            decided: None,
            phase: RefPhase::Idle,
        }
    }

    pub fn in_flight(&self) -> bool {
        self.phase != RefPhase::Idle
    }

    /// Start one attempt. Precondition: idle and undecided.
    pub fn propose(&mut self, port: &mut dyn Port, value: ValueId) {
        assert!(!self.in_flight() && self.decided.is_none());
        self.proposed_value = Some(value);
        self.proposal = ProposalNumber(self.proposal.0 + self.n as u64);
        self.phase = RefPhase::Preparing {
            replies: vec![None; self.n],
            evaluated: false,
        };
        for a in 0..self.n {
            port.send(
                ProcessId(a as u32),
                Message::Prepare {
                    slot: self.slot,
                    proposal: self.proposal,
                },
            );
        }
    }

    /// Feed a reply; returns the attempt outcome when it resolves.
    pub fn on_message(
        &mut self,
        port: &mut dyn Port,
        src: ProcessId,
        msg: Message,
    ) -> Option<Outcome> {
        match (&mut self.phase, msg) {
            (RefPhase::Preparing { replies, evaluated }, Message::Prepared { slot, re, reply })
                if slot == self.slot && re == self.proposal && !*evaluated =>
            {
                if replies[src.index()].replace(reply).is_some() {
                    return None;
                }
                let received: Vec<PreparedReply> = replies.iter().filter_map(|r| *r).collect();
                if received.len() < majority(self.n) {
                    return None;
                }
                *evaluated = true;
                // Adopt the accepted value with the highest accepted
                // proposal, then check acks; adoption happens even on the
                // abort path.
                if let Some(best) = received
                    .iter()
                    .filter(|r| r.accepted_value.is_some())
                    .max_by_key(|r| r.accepted_proposal)
                {
                    self.proposed_value = best.accepted_value;
                }
                if received.iter().any(|r| !r.ack) {
                    self.phase = RefPhase::Idle;
                    return Some(Outcome::Abort);
                }
                self.phase = RefPhase::Accepting {
                    mins: vec![None; self.n],
                    evaluated: false,
                };
                let value = self.proposed_value.expect("value set in propose");
                for a in 0..self.n {
                    port.send(
                        ProcessId(a as u32),
                        Message::Accept {
                            slot: self.slot,
                            proposal: self.proposal,
                            value,
                        },
                    );
                }
                None
            }
            (
                RefPhase::Accepting { mins, evaluated },
                Message::Accepted {
                    slot,
                    re,
                    min_proposal,
                },
            ) if slot == self.slot && re == self.proposal && !*evaluated => {
                if mins[src.index()].replace(min_proposal).is_some() {
                    return None;
                }
                let received: Vec<ProposalNumber> = mins.iter().filter_map(|m| *m).collect();
                if received.len() < majority(self.n) {
                    return None;
                }
                *evaluated = true;
                self.phase = RefPhase::Idle;
                if received.iter().any(|m| *m > self.proposal) {
                    Some(Outcome::Abort)
                } else {
                    let value = self.proposed_value.expect("value set in propose");
                    self.decided = Some(value);
                    port.emit(TraceRecord::Decide {
                        t_us: port.now().as_us(),
                        process: self.id.0,
                        slot: self.slot,
                        value: value.0,
                    });
                    Some(Outcome::Decide(value))
                }
            }
            _ => None, // stale or foreign message
        }
    }
}
