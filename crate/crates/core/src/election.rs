//! Leader election from crash notifications, and the wrapper that turns
//! abortable consensus into consensus.
//!
//! The failure signal here is a notification broadcast issued at crash time
//! and delivered a fixed detection delay later, so correct processes are
//! never falsely suspected and a crashed one is suspected everywhere within
//! the delay. Leadership is the lowest-id unsuspected proposer; after the
//! last crash settles, every correct process trusts the same one.

use crate::fabric::{Node, Port, SlotIndex, TraceRecord};
use crate::msg::Message;
use crate::onesided::{ProposeEvent, RunMode, StreamlinedProposer};
use crate::types::{ProcessId, SlotLayout, ValueId};

/// One process's view of who is still alive.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FailureView {
    alive: Vec<bool>,
    proposers: usize,
}

impl FailureView {
    /// `n` processes, of which the first `proposers` may lead.
    pub fn new(n: usize, proposers: usize) -> FailureView {
        assert!(proposers >= 1 && proposers <= n);
        FailureView {
            alive: vec![true; n],
            proposers,
        }
    }

    pub fn suspect(&mut self, p: ProcessId) {
        self.alive[p.index()] = false;
    }

    pub fn trusts(&self, p: ProcessId) -> bool {
        self.alive[p.index()]
    }

    /// Lowest-id unsuspected proposer, if any.
    pub fn leader(&self) -> Option<ProcessId> {
        (0..self.proposers)
            .find(|i| self.alive[*i])
            .map(|i| ProcessId(i as u32))
    }
}

/// Single-shot consensus: retry abortable consensus while trusted leader,
/// broadcast the decision, decide exactly once on delivery.
#[derive(Debug)]
pub struct ConsensusNode {
    pub me: ProcessId,
    pub view: FailureView,
    pub engine: StreamlinedProposer,
    pub value: Option<ValueId>,
    pub leader: bool,
    pub proposed: bool,
    pub decided: Option<ValueId>,
    /// How many times this node triggered the decide event; must end at 1.
    pub decide_triggers: u32,
    pub aborts_seen: u32,
    n: usize,
}

impl ConsensusNode {
    pub fn new(me: ProcessId, n: usize, proposers: usize, slot: SlotIndex) -> ConsensusNode {
        ConsensusNode {
            me,
            view: FailureView::new(n, proposers),
            engine: StreamlinedProposer::new(me, n, SlotLayout::default(), slot),
            value: None,
            leader: false,
            proposed: false,
            decided: None,
            decide_triggers: 0,
            aborts_seen: 0,
            n,
        }
    }

    pub fn with_value(mut self, value: ValueId) -> ConsensusNode {
        self.value = Some(value);
        self
    }

    fn refresh_leadership(&mut self, port: &mut dyn Port) {
        let now_leader = self.view.leader() == Some(self.me);
        if now_leader && !self.leader {
            port.emit(TraceRecord::LeaderChange {
                t_us: port.now().as_us(),
                process: self.me.0,
                leader: self.me.0,
            });
        }
        self.leader = now_leader;
        self.try_propose(port);
    }

    fn try_propose(&mut self, port: &mut dyn Port) {
        if !self.leader || self.proposed || self.decided.is_some() || self.engine.in_flight() {
            return;
        }
        let Some(value) = self.value else { return };
        if self.engine.decided.is_some() {
            return;
        }
        self.proposed = true;
        let ev = self.engine.propose(port, RunMode::Full, value, None);
        debug_assert!(ev.is_none(), "full propose always starts with a prepare");
    }

    fn handle_event(&mut self, port: &mut dyn Port, event: ProposeEvent) {
        match event {
            ProposeEvent::Decided(v) => {
                // Announce to every process, ourselves included.
                for p in 0..self.n {
                    port.send(
                        ProcessId(p as u32),
                        Message::Decided {
                            slot: self.engine.slot,
                            value: v,
                            writer: self.me,
                        },
                    );
                }
            }
            ProposeEvent::Aborted => {
                self.aborts_seen += 1;
                self.proposed = false;
                self.try_propose(port);
            }
            ProposeEvent::Prepared => {}
        }
    }
}

impl Node for ConsensusNode {
    fn on_init(&mut self, port: &mut dyn Port) {
        self.refresh_leadership(port);
    }

    fn on_crash_notice(&mut self, port: &mut dyn Port, crashed: ProcessId) {
        self.view.suspect(crashed);
        self.refresh_leadership(port);
    }

    fn on_completion(
        &mut self,
        port: &mut dyn Port,
        ticket: crate::fabric::TicketId,
        completion: crate::fabric::Completion,
    ) {
        if let Some(ev) = self.engine.on_completion(port, ticket, &completion) {
            self.handle_event(port, ev);
        }
    }

    fn on_message(&mut self, port: &mut dyn Port, src: ProcessId, msg: Message) {
        if let Message::Decided { value, .. } = msg {
            if self.decided.is_none() {
                self.decided = Some(value);
                self.decide_triggers += 1;
            }
            return;
        }
        if let Some(ev) = self.engine.on_message(port, src, msg) {
            self.handle_event(port, ev);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fabric::{Fabric, FabricConfig, Sim, TraceSink, VTime};

    #[test]
    fn leader_is_lowest_unsuspected_proposer() {
        let mut view = FailureView::new(3, 3);
        assert_eq!(view.leader(), Some(ProcessId(0)));
        view.suspect(ProcessId(0));
        assert_eq!(view.leader(), Some(ProcessId(1)));
        view.suspect(ProcessId(1));
        view.suspect(ProcessId(2));
        assert_eq!(view.leader(), None);

        // Non-proposer processes never lead.
        let mut view = FailureView::new(4, 2);
        view.suspect(ProcessId(0));
        view.suspect(ProcessId(1));
        assert_eq!(view.leader(), None);
    }

    fn cluster(seed: u64) -> Sim<ConsensusNode> {
        let cfg = FabricConfig {
            processes: 3,
            seed,
            ..Default::default()
        };
        let nodes = (0..3)
            .map(|i| ConsensusNode::new(ProcessId(i), 3, 3, 0).with_value(ValueId(i as u8)))
            .collect();
        Sim::new(Fabric::new(cfg, TraceSink::Memory(Vec::new())), nodes)
    }

    #[test]
    fn stable_sole_leader_decides_in_one_attempt_and_everyone_learns() {
        let mut sim = cluster(1);
        sim.init();
        sim.run_to_quiescence(10_000);
        for node in &sim.nodes {
            assert_eq!(node.decided, Some(ValueId(0))); // leader 0's input
            assert_eq!(node.decide_triggers, 1);
        }
        assert_eq!(sim.nodes[0].aborts_seen, 0);
        sim.fabric.audit().unwrap();
    }

    #[test]
    fn views_lag_during_the_detection_window_then_converge() {
        let mut sim = cluster(2);
        sim.init();
        sim.fabric
            .schedule_crash(ProcessId(0), VTime::from_us(100.0));
        // Inside the detection window the survivors still trust the dead
        // leader.
        sim.run_until(VTime::from_us(115.0));
        assert_eq!(sim.nodes[1].view.leader(), Some(ProcessId(0)));
        assert_eq!(sim.nodes[2].view.leader(), Some(ProcessId(0)));
        // After the detection delay every survivor trusts the same successor.
        sim.run_until(VTime::from_us(131.0));
        assert_eq!(sim.nodes[1].view.leader(), Some(ProcessId(1)));
        assert_eq!(sim.nodes[2].view.leader(), Some(ProcessId(1)));
    }

    #[test]
    fn leader_crash_mid_accept_successor_adopts_and_redecides() {
        let mut sim = cluster(3);
        sim.init();
        // Leader 0's accept CASes apply at the remote majority by ~2.9us but
        // their completions (and the decision broadcast) would land at 3.8us.
        // Crash in between: the value is accepted at a majority yet nobody
        // knows.
        sim.fabric.schedule_crash(ProcessId(0), VTime::from_us(3.0));
        sim.run_to_quiescence(100_000);
        for node in &sim.nodes[1..] {
            assert_eq!(node.decided, Some(ValueId(0)), "adopted the accepted value");
            assert_eq!(node.decide_triggers, 1);
        }
        sim.fabric.audit().unwrap();
    }

    #[test]
    fn jittery_prefix_still_decides_after_stabilization() {
        // An asynchronous prefix (heavy seeded extra delay before the
        // stabilization time) followed by a synchronous tail: every correct
        // process still decides exactly once.
        let cfg = FabricConfig {
            processes: 3,
            latency: {
                let mut m = crate::fabric::LatencyModel::jittered(0.3, 2.5);
                m.gst = Some(VTime::from_us(40.0));
                m.pre_gst_extra = VTime::from_us(25.0);
                m
            },
            seed: 11,
            ..Default::default()
        };
        let nodes = (0..3)
            .map(|i| ConsensusNode::new(ProcessId(i), 3, 3, 0).with_value(ValueId(i as u8)))
            .collect();
        let mut sim = Sim::new(Fabric::new(cfg, TraceSink::Null), nodes);
        sim.init();
        sim.run_to_quiescence(100_000);
        let decided = sim.nodes[0].decided.expect("leader decides");
        for node in &sim.nodes {
            assert_eq!(node.decided, Some(decided));
            assert_eq!(node.decide_triggers, 1);
        }
    }

    #[test]
    fn leadership_converges_after_the_last_crash() {
        let mut sim = cluster(4);
        sim.init();
        sim.fabric.schedule_crash(ProcessId(0), VTime::from_us(5.0));
        sim.fabric
            .schedule_crash(ProcessId(1), VTime::from_us(12.0));
        sim.run_to_quiescence(100_000);
        assert_eq!(sim.nodes[2].view.leader(), Some(ProcessId(2)));
        // The last correct proposer still decides some proposed value.
        let v = sim.nodes[2].decided.expect("survivor decides");
        assert!(v.0 <= 2);
    }
}
