//! Real-thread execution mode: slot words are hardware 64-bit atomics and
//! processes are OS threads. No virtual time, no messages, no crash
//! injection -- this mode exists to exercise true CAS concurrency and check
//! safety properties only.

use crate::fabric::{latency::VTime, Completion, Port, SlotIndex, TicketId};
use crate::msg::Message;
use crate::types::{AcceptorState, ProcessId, SlotLayout, SlotWord};
use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

/// Shared memory regions: one atomic word per (acceptor, slot) and mutexed
/// payload buffers keyed by (acceptor, slot, writer).
pub struct ThreadRegions {
    words: Vec<Vec<AtomicU64>>,
    payloads: Mutex<std::collections::BTreeMap<(u32, SlotIndex, u32), Vec<u8>>>,
}

impl ThreadRegions {
    pub fn new(processes: u32, slots: u64) -> ThreadRegions {
        ThreadRegions {
            words: (0..processes)
                .map(|_| (0..slots).map(|_| AtomicU64::new(0)).collect())
                .collect(),
            payloads: Mutex::new(std::collections::BTreeMap::new()),
        }
    }

    pub fn word(&self, owner: ProcessId, slot: SlotIndex) -> SlotWord {
        SlotWord(self.words[owner.index()][slot as usize].load(Ordering::SeqCst))
    }
}

/// A successful or failed CAS observed by one thread.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CasTransition {
    pub target: ProcessId,
    pub slot: SlotIndex,
    pub old: SlotWord,
    pub new: SlotWord,
    pub swapped: bool,
}

/// [`Port`] over [`ThreadRegions`]: operations apply immediately through the
/// hardware atomics and completions queue up for the caller to drain, so the
/// state machines see the same completion-driven interface as in virtual
/// mode.
pub struct ThreadPort<'a> {
    me: ProcessId,
    regions: &'a ThreadRegions,
    next_ticket: u64,
    pub pending: VecDeque<(TicketId, Completion)>,
    pub cas_log: Vec<CasTransition>,
}

impl<'a> ThreadPort<'a> {
    pub fn new(me: ProcessId, regions: &'a ThreadRegions) -> ThreadPort<'a> {
        ThreadPort {
            me,
            regions,
            next_ticket: (me.0 as u64) << 32,
            pending: VecDeque::new(),
            cas_log: Vec::new(),
        }
    }

    fn ticket(&mut self) -> TicketId {
        let t = TicketId(self.next_ticket);
        self.next_ticket += 1;
        t
    }

    fn cas(
        &mut self,
        target: ProcessId,
        slot: SlotIndex,
        expected: SlotWord,
        desired: SlotWord,
    ) -> Completion {
        let cell = &self.regions.words[target.index()][slot as usize];
        let res = cell.compare_exchange(expected.0, desired.0, Ordering::SeqCst, Ordering::SeqCst);
        let (old, swapped) = match res {
            Ok(prev) => (SlotWord(prev), true),
            Err(prev) => (SlotWord(prev), false),
        };
        self.cas_log.push(CasTransition {
            target,
            slot,
            old,
            new: if swapped { desired } else { old },
            swapped,
        });
        Completion::Cas { old }
    }
}

impl Port for ThreadPort<'_> {
    fn me(&self) -> ProcessId {
        self.me
    }

    fn now(&self) -> VTime {
        VTime::ZERO
    }

    fn post_read(&mut self, target: ProcessId, slot: SlotIndex) -> TicketId {
        let word = self.regions.word(target, slot);
        let t = self.ticket();
        self.pending.push_back((t, Completion::Read { word }));
        t
    }

    fn post_payload_read(
        &mut self,
        target: ProcessId,
        slot: SlotIndex,
        writer: ProcessId,
    ) -> TicketId {
        let bytes = self
            .regions
            .payloads
            .lock()
            .unwrap()
            .get(&(target.0, slot, writer.0))
            .cloned();
        let t = self.ticket();
        self.pending
            .push_back((t, Completion::PayloadRead { bytes }));
        t
    }

    fn post_cas(
        &mut self,
        target: ProcessId,
        slot: SlotIndex,
        expected: SlotWord,
        desired: SlotWord,
    ) -> TicketId {
        let completion = self.cas(target, slot, expected, desired);
        let t = self.ticket();
        self.pending.push_back((t, completion));
        t
    }

    fn post_write(&mut self, target: ProcessId, slot: SlotIndex, payload: &[u8]) -> TicketId {
        self.regions
            .payloads
            .lock()
            .unwrap()
            .insert((target.0, slot, self.me.0), payload.to_vec());
        let t = self.ticket();
        self.pending.push_back((t, Completion::Write));
        t
    }

    fn post_write_then_cas(
        &mut self,
        target: ProcessId,
        slot: SlotIndex,
        payload: &[u8],
        expected: SlotWord,
        desired: SlotWord,
    ) -> TicketId {
        self.regions
            .payloads
            .lock()
            .unwrap()
            .insert((target.0, slot, self.me.0), payload.to_vec());
        let completion = self.cas(target, slot, expected, desired);
        let t = self.ticket();
        self.pending.push_back((t, completion));
        t
    }

    fn send(&mut self, _target: ProcessId, _msg: Message) {
        unimplemented!("thread mode has no message channel");
    }

    fn schedule(&mut self, _delay: VTime, _tag: u64) {
        unimplemented!("thread mode has no clock");
    }

    fn read_local_word(&self, slot: SlotIndex) -> SlotWord {
        self.regions.word(self.me, slot)
    }

    fn read_local_payload(&self, slot: SlotIndex, writer: ProcessId) -> Option<Vec<u8>> {
        self.regions
            .payloads
            .lock()
            .unwrap()
            .get(&(self.me.0, slot, writer.0))
            .cloned()
    }

    fn local_slots(&self) -> SlotIndex {
        self.regions.words[self.me.index()].len() as SlotIndex
    }

    fn fence_local_word(&mut self, slot: SlotIndex, word: SlotWord) -> SlotWord {
        SlotWord(self.regions.words[self.me.index()][slot as usize].swap(word.0, Ordering::SeqCst))
    }

    fn emit(&mut self, _record: super::TraceRecord) {}

    fn count_round(&mut self, _critical: bool) {}
}

/// Check that the successful CAS transitions collected from all threads for
/// one (acceptor, slot) word form a single chain from zero with monotone
/// proposal fields. This is the thread-mode linearizability and monotonicity
/// audit: hardware atomicity guarantees a total order exists, the chain
/// reconstruction proves the observed old/new values are consistent with one.
pub fn verify_cas_chain(
    mut transitions: Vec<CasTransition>,
    layout: SlotLayout,
) -> Result<Vec<AcceptorState>, String> {
    transitions.retain(|t| t.swapped);
    let mut chain = vec![AcceptorState::INITIAL];
    let mut word = SlotWord::ZERO;
    while !transitions.is_empty() {
        let pos = transitions
            .iter()
            .position(|t| t.old == word)
            .ok_or_else(|| format!("no successful CAS continues the chain from {word}"))?;
        let t = transitions.swap_remove(pos);
        let prev = word.unpack(layout).map_err(|e| e.to_string())?;
        let next = t.new.unpack(layout).map_err(|e| e.to_string())?;
        if next.min_proposal < prev.min_proposal || next.accepted_proposal < prev.accepted_proposal
        {
            return Err(format!("non-monotone transition {:?} -> {:?}", prev, next));
        }
        chain.push(next);
        word = t.new;
    }
    Ok(chain)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concurrent_raw_cas_forms_a_single_chain() {
        let layout = SlotLayout::default();
        let regions = ThreadRegions::new(1, 1);
        let logs: Vec<Vec<CasTransition>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..4u32)
                .map(|id| {
                    let regions = &regions;
                    scope.spawn(move || {
                        let mut port = ThreadPort::new(ProcessId(id), regions);
                        for round in 0..200u64 {
                            // min_proposal-only updates, one writer lane per id
                            let proposal = (round + 1) * 4 + id as u64;
                            loop {
                                let cur = regions.word(ProcessId(0), 0);
                                let state = cur.unpack(layout).unwrap();
                                if state.min_proposal.0 >= proposal {
                                    break;
                                }
                                let mut next = state;
                                next.min_proposal = crate::types::ProposalNumber(proposal);
                                port.post_cas(ProcessId(0), 0, cur, next.pack(layout).unwrap());
                                let (_, Completion::Cas { old }) = port.pending.pop_back().unwrap()
                                else {
                                    unreachable!()
                                };
                                if old == cur {
                                    break;
                                }
                            }
                        }
                        port.cas_log
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        let all: Vec<CasTransition> = logs.into_iter().flatten().collect();
        let chain = verify_cas_chain(all, layout).unwrap();
        assert!(chain.len() > 1);
    }
}
