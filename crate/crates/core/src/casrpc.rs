//! The RPC-to-CAS transformation.
//!
//! A qualifying RPC is a triple of pure functions over the callee's state:
//! `compare` guards, `transition` mutates, `project` builds the reply. Such
//! an RPC can run entirely from the caller's side: fetch the remote word,
//! evaluate `compare` locally, and install `transition`'s result with a
//! single CAS. A failed CAS means the invocation was obstructed; it then has
//! no side effect and reports [`CasRpcResult::Aborted`] instead of a reply.
//!
//! The fetch is injectable: callers with a cached view of the remote word
//! skip the read and swap against their prediction.

use crate::fabric::{Completion, Port, SlotIndex, TicketId};
use crate::msg::PreparedReply;
use crate::types::{AcceptorState, ProposalNumber, SlotLayout, SlotWord, ValueId};

/// A remote procedure expressible as (compare, transition, project), all
/// pure and deterministic.
pub trait RpcSpec {
    type Input: Copy + Eq + std::hash::Hash + std::fmt::Debug;
    type Reply;

    fn compare(&self, x: &Self::Input, state: &AcceptorState) -> bool;
    fn transition(&self, state: &AcceptorState, x: &Self::Input) -> AcceptorState;
    /// Reply projected from the *post*-transition state (which equals the
    /// pre-state when `compare` failed).
    fn project(&self, x: &Self::Input, state: &AcceptorState) -> Self::Reply;
}

/// Reference execution of the RPC against local state.
pub fn rpc<S: RpcSpec>(spec: &S, x: &S::Input, state: &mut AcceptorState) -> S::Reply {
    if spec.compare(x, state) {
        *state = spec.transition(state, x);
    }
    spec.project(x, state)
}

/// How a [`CasRpcLeg`] learns the expected remote state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Fetch {
    /// Read the word first (one extra round trip).
    Fresh,
    /// Trust a cached state and go straight to the CAS.
    Predicted(AcceptorState),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CasRpcResult<R> {
    Reply(R),
    /// The CAS found a different word than expected; the invocation had no
    /// effect on the target.
    Aborted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum LegPhase {
    Fetching(TicketId),
    Swapping(TicketId),
    Done,
}

/// One in-flight one-sided invocation against a single acceptor word.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CasRpcLeg<S: RpcSpec> {
    pub spec: S,
    pub x: S::Input,
    pub target: crate::types::ProcessId,
    pub slot: SlotIndex,
    layout: SlotLayout,
    /// Payload for the ordered write prepended to the CAS, when any.
    payload: Option<Vec<u8>>,
    /// The word this leg swaps from / to, once known.
    pub expected: Option<SlotWord>,
    pub move_to: Option<SlotWord>,
    phase: LegPhase,
}

impl<S: RpcSpec> CasRpcLeg<S> {
    pub fn new(
        spec: S,
        x: S::Input,
        target: crate::types::ProcessId,
        slot: SlotIndex,
        layout: SlotLayout,
    ) -> CasRpcLeg<S> {
        CasRpcLeg {
            spec,
            x,
            target,
            slot,
            layout,
            payload: None,
            expected: None,
            move_to: None,
            phase: LegPhase::Done,
        }
    }

    pub fn with_payload(mut self, payload: Vec<u8>) -> CasRpcLeg<S> {
        self.payload = Some(payload);
        self
    }

    /// Begin the invocation. May resolve immediately when the fetch is
    /// predicted and the comparison fails.
    pub fn start(&mut self, port: &mut dyn Port, fetch: Fetch) -> Option<CasRpcResult<S::Reply>> {
        match fetch {
            Fetch::Fresh => {
                let ticket = port.post_read(self.target, self.slot);
                self.phase = LegPhase::Fetching(ticket);
                None
            }
            Fetch::Predicted(state) => self.proceed(port, state),
        }
    }

    fn proceed(
        &mut self,
        port: &mut dyn Port,
        state: AcceptorState,
    ) -> Option<CasRpcResult<S::Reply>> {
        if !self.spec.compare(&self.x, &state) {
            self.phase = LegPhase::Done;
            return Some(CasRpcResult::Reply(self.spec.project(&self.x, &state)));
        }
        let next = self.spec.transition(&state, &self.x);
        let expected = state.pack(self.layout).expect("fetched state packs");
        let move_to = next.pack(self.layout).expect("transitioned state packs");
        self.expected = Some(expected);
        self.move_to = Some(move_to);
        let ticket = match &self.payload {
            Some(bytes) => {
                port.post_write_then_cas(self.target, self.slot, bytes, expected, move_to)
            }
            None => port.post_cas(self.target, self.slot, expected, move_to),
        };
        self.phase = LegPhase::Swapping(ticket);
        None
    }

    /// True when `ticket` belongs to this leg.
    pub fn owns(&self, ticket: TicketId) -> bool {
        matches!(self.phase, LegPhase::Fetching(t) | LegPhase::Swapping(t) if t == ticket)
    }

    /// The in-flight ticket, if any.
    pub fn ticket(&self) -> Option<TicketId> {
        match self.phase {
            LegPhase::Fetching(t) | LegPhase::Swapping(t) => Some(t),
            LegPhase::Done => None,
        }
    }

    pub fn on_completion(
        &mut self,
        port: &mut dyn Port,
        ticket: TicketId,
        completion: &Completion,
    ) -> Option<CasRpcResult<S::Reply>> {
        match (self.phase, completion) {
            (LegPhase::Fetching(t), Completion::Read { word }) if t == ticket => {
                let state = word
                    .unpack(self.layout)
                    .expect("remote word is well-formed");
                self.proceed(port, state)
            }
            (LegPhase::Swapping(t), Completion::Cas { old }) if t == ticket => {
                self.phase = LegPhase::Done;
                if Some(*old) == self.expected {
                    let installed = self
                        .move_to
                        .unwrap()
                        .unpack(self.layout)
                        .expect("installed word is well-formed");
                    Some(CasRpcResult::Reply(self.spec.project(&self.x, &installed)))
                } else {
                    Some(CasRpcResult::Aborted)
                }
            }
            _ => None,
        }
    }
}

/// Prepare as (compare, transition, project).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct PrepareSpec;

impl RpcSpec for PrepareSpec {
    type Input = ProposalNumber;
    type Reply = PreparedReply;

    fn compare(&self, x: &ProposalNumber, state: &AcceptorState) -> bool {
        *x > state.min_proposal
    }

    fn transition(&self, state: &AcceptorState, x: &ProposalNumber) -> AcceptorState {
        AcceptorState {
            min_proposal: *x,
            ..*state
        }
    }

    fn project(&self, x: &ProposalNumber, state: &AcceptorState) -> PreparedReply {
        PreparedReply {
            ack: state.min_proposal == *x,
            min_proposal: state.min_proposal,
            accepted_proposal: state.accepted_proposal,
            accepted_value: state.accepted_value,
        }
    }
}

/// Accept as (compare, transition, project).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct AcceptSpec;

impl RpcSpec for AcceptSpec {
    type Input = (ProposalNumber, ValueId);
    type Reply = ProposalNumber;

    fn compare(&self, x: &(ProposalNumber, ValueId), state: &AcceptorState) -> bool {
        x.0 >= state.min_proposal
    }

    fn transition(&self, _state: &AcceptorState, x: &(ProposalNumber, ValueId)) -> AcceptorState {
        AcceptorState {
            min_proposal: x.0,
            accepted_proposal: x.0,
            accepted_value: Some(x.1),
        }
    }

    fn project(&self, _x: &(ProposalNumber, ValueId), state: &AcceptorState) -> ProposalNumber {
        state.min_proposal
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fabric::{Fabric, FabricConfig, InboxNode, Sim, TraceSink, VTime};
    use crate::rpcpaxos;
    use crate::types::ProcessId;
    use rand::{Rng, SeedableRng};

    fn st(min: u64, acc: u64, v: Option<u8>) -> AcceptorState {
        AcceptorState::new(min, acc, v)
    }

    #[test]
    fn rpc_compare_failure_leaves_state_and_projects_it() {
        let mut s = st(5, 0, None);
        let reply = rpc(&PrepareSpec, &ProposalNumber(3), &mut s);
        assert_eq!(s, st(5, 0, None));
        assert!(!reply.ack);
        assert_eq!(reply.min_proposal, ProposalNumber(5));
    }

    #[test]
    fn rpc_compare_success_transitions_and_projects_post_state() {
        let mut s = st(5, 0, None);
        let reply = rpc(&AcceptSpec, &(ProposalNumber(5), ValueId(2)), &mut s);
        assert_eq!(s, st(5, 5, Some(2)));
        assert_eq!(reply, ProposalNumber(5));
    }

    #[test]
    fn specs_reproduce_the_message_handlers_on_random_states() {
        let layout = SlotLayout::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let min = rng.gen_range(0..1000u64);
            let acc = rng.gen_range(0..=min);
            let v = (acc > 0).then(|| rng.gen_range(0..=layout.max_value_id()));
            let x = ProposalNumber(rng.gen_range(0..1200u64));
            let mut via_spec = st(min, acc, v);
            let mut via_handler = via_spec;
            let a = rpc(&PrepareSpec, &x, &mut via_spec);
            let b = rpcpaxos::handle_prepare(&mut via_handler, x);
            assert_eq!(via_spec, via_handler);
            assert_eq!(a, b);

            let value = ValueId(rng.gen_range(0..=layout.max_value_id()));
            let mut via_spec = st(min, acc, v);
            let mut via_handler = via_spec;
            let a = rpc(&AcceptSpec, &(x, value), &mut via_spec);
            let b = rpcpaxos::handle_accept(&mut via_handler, x, value);
            assert_eq!(via_spec, via_handler);
            assert_eq!(a, b);
        }
    }

    fn one_acceptor_sim(seed: u64) -> Sim<InboxNode> {
        let cfg = FabricConfig {
            processes: 2,
            seed,
            ..Default::default()
        };
        Sim::new(
            Fabric::new(cfg, TraceSink::Null),
            vec![InboxNode::default(), InboxNode::default()],
        )
    }

    /// Drive a leg to resolution on an otherwise idle fabric.
    fn run_leg<S: RpcSpec>(
        sim: &mut Sim<InboxNode>,
        leg: &mut CasRpcLeg<S>,
        fetch: Fetch,
    ) -> CasRpcResult<S::Reply> {
        if let Some(done) = sim.with_port(ProcessId(0), |port, _| leg.start(port, fetch)) {
            return done;
        }
        loop {
            assert!(sim.step(), "leg never resolved");
            let pending: Vec<_> = sim.nodes[0].completions.drain(..).collect();
            for (ticket, completion) in pending {
                if let Some(done) = sim.with_port(ProcessId(0), |port, _| {
                    leg.on_completion(port, ticket, &completion)
                }) {
                    return done;
                }
            }
        }
    }

    #[test]
    fn unobstructed_leg_matches_rpc_and_never_aborts() {
        let layout = SlotLayout::default();
        let mut sim = one_acceptor_sim(3);
        let remote = st(5, 0, None);
        sim.fabric
            .preset_word(ProcessId(1), 0, remote.pack(layout).unwrap());

        let mut leg = CasRpcLeg::new(PrepareSpec, ProposalNumber(9), ProcessId(1), 0, layout);
        let got = run_leg(&mut sim, &mut leg, Fetch::Fresh);
        let mut oracle_state = remote;
        let want = rpc(&PrepareSpec, &ProposalNumber(9), &mut oracle_state);
        assert_eq!(got, CasRpcResult::Reply(want));
        assert_eq!(
            sim.fabric.word(ProcessId(1), 0).unpack(layout).unwrap(),
            oracle_state
        );
    }

    #[test]
    fn interposed_cas_aborts_and_leaves_only_the_interposer() {
        let layout = SlotLayout::default();
        let mut sim = one_acceptor_sim(3);
        let mut leg = CasRpcLeg::new(PrepareSpec, ProposalNumber(2), ProcessId(1), 0, layout);
        assert!(sim
            .with_port(ProcessId(0), |port, _| leg.start(port, Fetch::Fresh))
            .is_none());

        // Let the read land, then interpose a competing prepare before the
        // leg's CAS reaches the word.
        sim.run_until(VTime::from_us(1.0));
        let competing = st(1, 0, None).pack(layout).unwrap();
        sim.with_port(ProcessId(1), |port, _| {
            port.post_cas(ProcessId(1), 0, SlotWord::ZERO, competing)
        });

        let mut outcome = None;
        while outcome.is_none() {
            assert!(sim.step());
            let pending: Vec<_> = sim.nodes[0].completions.drain(..).collect();
            for (ticket, completion) in pending {
                outcome = sim.with_port(ProcessId(0), |port, _| {
                    leg.on_completion(port, ticket, &completion)
                });
            }
        }
        assert_eq!(outcome, Some(CasRpcResult::Aborted));
        assert_eq!(sim.fabric.word(ProcessId(1), 0), competing);
    }

    #[test]
    fn predicted_fetch_with_failing_compare_resolves_without_any_op() {
        let layout = SlotLayout::default();
        let mut sim = one_acceptor_sim(3);
        let mut leg = CasRpcLeg::new(PrepareSpec, ProposalNumber(3), ProcessId(1), 0, layout);
        let predicted = st(5, 0, None);
        let got = sim.with_port(ProcessId(0), |port, _| {
            leg.start(port, Fetch::Predicted(predicted))
        });
        let Some(CasRpcResult::Reply(reply)) = got else {
            panic!("expected immediate reply");
        };
        assert!(!reply.ack);
        assert_eq!(
            sim.fabric
                .counters()
                .issued_total(crate::fabric::OpKind::Cas),
            0
        );
        assert_eq!(
            sim.fabric
                .counters()
                .issued_total(crate::fabric::OpKind::Read),
            0
        );
    }
}
