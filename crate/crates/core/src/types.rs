//! Domain types shared by every protocol module: process and proposal
//! identifiers, the acceptor state triple, its packed 64-bit form, and
//! proposal-number arithmetic.
//!
//! The packed layout puts `min_proposal` in the top bits, `accepted_proposal`
//! below it and the inline value id in the lowest bits, so the initial state
//! `{0, 0, none}` packs to the all-zero word and freshly zeroed memory regions
//! are already well-formed.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identifier of a process in the group, in `[0, n)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ProcessId(pub u32);

impl ProcessId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl std::fmt::Display for ProcessId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "p{}", self.0)
    }
}

/// A proposal number. Residue modulo the group size identifies the
/// originating proposer; each proposer bumps in steps of the group size.
///
/// Held as a `u64`: packed slot words constrain proposals to the layout's
/// field width, but message-passing contexts may exceed it after the
/// overflow fallback kicks in.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct ProposalNumber(pub u64);

impl ProposalNumber {
    pub const ZERO: ProposalNumber = ProposalNumber(0);

    /// Proposer that owns this number, by residue.
    pub fn proposer(self, n: usize) -> ProcessId {
        ProcessId((self.0 % n as u64) as u32)
    }
}

impl std::fmt::Display for ProposalNumber {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

/// Inline value identifier stored in the low bits of a slot word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ValueId(pub u8);

impl std::fmt::Display for ValueId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "v{}", self.0)
    }
}

/// Bit layout of a packed slot word.
///
/// `value_bits` low bits hold the inline value id; the remaining bits are
/// split evenly between `accepted_proposal` and `min_proposal` (top). The
/// default gives the 31/31/2 split that fits a single 64-bit CAS.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SlotLayout {
    value_bits: u32,
}

impl Default for SlotLayout {
    fn default() -> Self {
        SlotLayout { value_bits: 2 }
    }
}

impl SlotLayout {
    /// A layout with a custom inline-value width. Width must be even (so the
    /// two proposal fields stay the same size) and between 2 and 8.
    pub fn with_value_bits(value_bits: u32) -> Result<Self, WordError> {
        if !(2..=8).contains(&value_bits) || value_bits % 2 != 0 {
            return Err(WordError::BadLayout { value_bits });
        }
        Ok(SlotLayout { value_bits })
    }

    pub fn value_bits(self) -> u32 {
        self.value_bits
    }

    /// Width of each proposal field.
    pub fn proposal_bits(self) -> u32 {
        (64 - self.value_bits) / 2
    }

    /// Largest proposal number that fits a packed word.
    pub fn max_proposal(self) -> ProposalNumber {
        ProposalNumber((1u64 << self.proposal_bits()) - 1)
    }

    /// First proposal value at which the message-passing fallback engages:
    /// `2^w - n` for proposal width `w` and group size `n`.
    pub fn fallback_threshold(self, n: usize) -> ProposalNumber {
        ProposalNumber((1u64 << self.proposal_bits()) - n as u64)
    }

    pub fn max_value_id(self) -> u8 {
        ((1u32 << self.value_bits) - 1) as u8
    }

    fn accepted_shift(self) -> u32 {
        self.value_bits
    }

    fn min_shift(self) -> u32 {
        self.value_bits + self.proposal_bits()
    }
}

/// Errors from packing or unpacking slot words.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WordError {
    #[error("{field} value {value} exceeds {bits}-bit field")]
    FieldOverflow {
        field: &'static str,
        value: u64,
        bits: u32,
    },
    #[error("malformed state: {reason}")]
    Malformed { reason: &'static str },
    #[error("unsupported layout: {value_bits} value bits")]
    BadLayout { value_bits: u32 },
}

/// The acceptor's per-slot state triple.
///
/// Invariants: `accepted_proposal <= min_proposal`, and `accepted_proposal`
/// is zero exactly when no value has been accepted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AcceptorState {
    pub min_proposal: ProposalNumber,
    pub accepted_proposal: ProposalNumber,
    pub accepted_value: Option<ValueId>,
}

impl AcceptorState {
    pub const INITIAL: AcceptorState = AcceptorState {
        min_proposal: ProposalNumber::ZERO,
        accepted_proposal: ProposalNumber::ZERO,
        accepted_value: None,
    };

    pub fn new(min: u64, accepted: u64, value: Option<u8>) -> Self {
        AcceptorState {
            min_proposal: ProposalNumber(min),
            accepted_proposal: ProposalNumber(accepted),
            accepted_value: value.map(ValueId),
        }
    }

    pub fn well_formed(&self) -> bool {
        self.accepted_proposal <= self.min_proposal
            && (self.accepted_proposal.0 == 0) == self.accepted_value.is_none()
    }

    /// Pack into a slot word under `layout`.
    pub fn pack(&self, layout: SlotLayout) -> Result<SlotWord, WordError> {
        let pbits = layout.proposal_bits();
        if self.min_proposal > layout.max_proposal() {
            return Err(WordError::FieldOverflow {
                field: "min_proposal",
                value: self.min_proposal.0,
                bits: pbits,
            });
        }
        if self.accepted_proposal > layout.max_proposal() {
            return Err(WordError::FieldOverflow {
                field: "accepted_proposal",
                value: self.accepted_proposal.0,
                bits: pbits,
            });
        }
        if let Some(v) = self.accepted_value {
            if v.0 > layout.max_value_id() {
                return Err(WordError::FieldOverflow {
                    field: "accepted_value",
                    value: v.0 as u64,
                    bits: layout.value_bits(),
                });
            }
        }
        if self.accepted_proposal > self.min_proposal {
            return Err(WordError::Malformed {
                reason: "accepted_proposal exceeds min_proposal",
            });
        }
        if (self.accepted_proposal.0 == 0) != self.accepted_value.is_none() {
            return Err(WordError::Malformed {
                reason: "accepted_value must be present exactly when accepted_proposal > 0",
            });
        }
        let word = (self.min_proposal.0 << layout.min_shift())
            | (self.accepted_proposal.0 << layout.accepted_shift())
            | self.accepted_value.map_or(0, |v| v.0 as u64);
        Ok(SlotWord(word))
    }
}

/// A packed 64-bit acceptor state, the unit of atomic CAS.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct SlotWord(pub u64);

impl SlotWord {
    pub const ZERO: SlotWord = SlotWord(0);

    /// Unpack under `layout`. Rejects words whose fields violate the state
    /// invariants; the protocols never produce such words.
    pub fn unpack(self, layout: SlotLayout) -> Result<AcceptorState, WordError> {
        let pmask = (1u64 << layout.proposal_bits()) - 1;
        let vmask = (1u64 << layout.value_bits()) - 1;
        let min = ProposalNumber(self.0 >> layout.min_shift());
        let accepted = ProposalNumber((self.0 >> layout.accepted_shift()) & pmask);
        let vraw = self.0 & vmask;
        if accepted > min {
            return Err(WordError::Malformed {
                reason: "accepted_proposal exceeds min_proposal",
            });
        }
        if accepted.0 == 0 && vraw != 0 {
            return Err(WordError::Malformed {
                reason: "value bits set on a word with no accepted proposal",
            });
        }
        Ok(AcceptorState {
            min_proposal: min,
            accepted_proposal: accepted,
            accepted_value: (accepted.0 > 0).then_some(ValueId(vraw as u8)),
        })
    }

    /// `min_proposal` field without unpacking the rest.
    pub fn min_proposal(self, layout: SlotLayout) -> ProposalNumber {
        ProposalNumber(self.0 >> layout.min_shift())
    }
}

impl std::fmt::Display for SlotWord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

/// Result of a propose attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    Decide(ValueId),
    Abort,
}

/// Signalled by [`next_proposal`] when the bumped number enters the
/// fallback range `[2^w - n, ..)`. The value itself is still usable; the
/// signal tells the caller to start switching the affected acceptors to
/// message-passing mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("proposal {} reached the fallback range", proposal.0)]
pub struct ProposalOverflow {
    pub proposal: ProposalNumber,
}

/// Smallest proposal `p >= current` with `p ≡ current (mod n)` that strictly
/// exceeds every predicted `min_proposal`; `current` itself when it already
/// does.
pub fn next_proposal(
    current: ProposalNumber,
    predicted_mins: &[ProposalNumber],
    n: usize,
    layout: SlotLayout,
) -> Result<ProposalNumber, ProposalOverflow> {
    debug_assert!(n > 0);
    let max_min = predicted_mins
        .iter()
        .copied()
        .max()
        .unwrap_or(ProposalNumber::ZERO);
    let value = if max_min < current {
        current
    } else {
        let steps = (max_min.0 - current.0) / n as u64 + 1;
        ProposalNumber(current.0 + steps * n as u64)
    };
    if value >= layout.fallback_threshold(n) {
        Err(ProposalOverflow { proposal: value })
    } else {
        Ok(value)
    }
}

/// Majority size for a group of `n`.
pub fn majority(n: usize) -> usize {
    n / 2 + 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn st(min: u64, acc: u64, v: Option<u8>) -> AcceptorState {
        AcceptorState::new(min, acc, v)
    }

    /// Independent oracle: compose the word with plain shift-and-add
    /// arithmetic on u128, per the declared field positions.
    fn pack_oracle(min: u64, acc: u64, v: u64) -> u64 {
        let w: u128 = (min as u128) * (1u128 << 33) + (acc as u128) * 4 + v as u128;
        u64::try_from(w).unwrap()
    }

    #[test]
    fn pack_examples() {
        let l = SlotLayout::default();
        assert_eq!(st(0, 0, None).pack(l).unwrap(), SlotWord(0));
        assert_eq!(st(1, 0, None).pack(l).unwrap(), SlotWord(8_589_934_592));
        assert_eq!(st(1, 0, None).pack(l).unwrap().0, pack_oracle(1, 0, 0));
        assert_eq!(st(7, 7, Some(2)).pack(l).unwrap(), SlotWord(60_129_542_174));
        assert_eq!(st(7, 7, Some(2)).pack(l).unwrap().0, pack_oracle(7, 7, 2));
    }

    #[test]
    fn unpack_examples() {
        let l = SlotLayout::default();
        assert_eq!(SlotWord(0).unpack(l).unwrap(), st(0, 0, None));
        assert_eq!(SlotWord(8_589_934_592).unpack(l).unwrap(), st(1, 0, None));
        assert_eq!(
            SlotWord(60_129_542_174).unpack(l).unwrap(),
            st(7, 7, Some(2))
        );
    }

    #[test]
    fn pack_rejects_overflow_and_malformed() {
        let l = SlotLayout::default();
        let max = l.max_proposal().0;
        assert!(matches!(
            st(max + 1, 0, None).pack(l),
            Err(WordError::FieldOverflow {
                field: "min_proposal",
                ..
            })
        ));
        assert!(matches!(
            st(3, 5, Some(1)).pack(l),
            Err(WordError::Malformed { .. })
        ));
        assert!(matches!(
            st(3, 0, Some(1)).pack(l),
            Err(WordError::Malformed { .. })
        ));
        assert!(matches!(
            st(3, 2, None).pack(l),
            Err(WordError::Malformed { .. })
        ));
    }

    #[test]
    fn unpack_rejects_malformed() {
        let l = SlotLayout::default();
        // accepted_proposal = 5 > min_proposal = 3
        let bad = (3u64 << 33) | (5 << 2);
        assert!(SlotWord(bad).unpack(l).is_err());
        // value bits without an accepted proposal
        assert!(SlotWord(1).unpack(l).is_err());
    }

    #[test]
    fn round_trip_one_million_random_states() {
        let l = SlotLayout::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0xc0ffee);
        let max = l.max_proposal().0;
        for _ in 0..1_000_000 {
            let min = rng.gen_range(0..=max);
            let accepted = rng.gen_range(0..=min);
            let value = (accepted > 0).then(|| rng.gen_range(0..=l.max_value_id()));
            let s = st(min, accepted, value);
            assert_eq!(s.pack(l).unwrap().unpack(l).unwrap(), s);
        }
    }

    #[test]
    fn wide_value_layout_round_trips() {
        let l = SlotLayout::with_value_bits(4).unwrap();
        assert_eq!(l.proposal_bits(), 30);
        let s = st(9, 9, Some(11));
        assert_eq!(s.pack(l).unwrap().unpack(l).unwrap(), s);
        assert!(SlotLayout::with_value_bits(3).is_err());
        assert!(SlotLayout::with_value_bits(10).is_err());
    }

    /// Simulate the bump loop literally, as an oracle for the arithmetic form.
    fn next_proposal_loop(current: u64, mins: &[u64], n: u64) -> u64 {
        let mut p = current;
        for &m in mins {
            while m >= p {
                p += n;
            }
        }
        p
    }

    #[test]
    fn next_proposal_examples() {
        let l = SlotLayout::default();
        let p = |v: u64| ProposalNumber(v);
        let mins = |v: &[u64]| v.iter().map(|&x| ProposalNumber(x)).collect::<Vec<_>>();
        assert_eq!(next_proposal(p(2), &mins(&[0, 0, 0]), 5, l).unwrap(), p(2));
        assert_eq!(next_proposal_loop(2, &[0, 0, 0], 5), 2);
        assert_eq!(
            next_proposal(p(2), &mins(&[11, 0, 3]), 5, l).unwrap(),
            p(12)
        );
        assert_eq!(next_proposal_loop(2, &[11, 0, 3], 5), 12);
        assert_eq!(next_proposal(p(0), &mins(&[0]), 3, l).unwrap(), p(3));
        assert_eq!(next_proposal_loop(0, &[0], 3), 3);
    }

    #[test]
    fn next_proposal_signals_fallback_range() {
        let l = SlotLayout::default();
        let threshold = l.fallback_threshold(3);
        let err =
            next_proposal(ProposalNumber(1), &[ProposalNumber(threshold.0)], 3, l).unwrap_err();
        assert!(err.proposal >= threshold);
        assert_eq!(err.proposal.0 % 3, 1);
    }

    proptest! {
        #[test]
        fn pack_monotone_in_min_proposal(acc in 0u64..100, v in 0u8..4, min_a in 0u64..1000, min_b in 0u64..1000) {
            let l = SlotLayout::default();
            let lo = acc.max(min_a.min(min_b));
            let hi = acc.max(min_a.max(min_b));
            let value = (acc > 0).then_some(v);
            let wa = st(lo, acc, value).pack(l).unwrap();
            let wb = st(hi, acc, value).pack(l).unwrap();
            prop_assert!(wa <= wb);
        }

        #[test]
        fn next_proposal_exceeds_all_mins_and_keeps_residue(
            current in 0u64..50,
            mins in prop::collection::vec(0u64..200, 1..6),
            n in 2usize..8,
        ) {
            let l = SlotLayout::default();
            let cur = ProposalNumber(current);
            let ms: Vec<_> = mins.iter().map(|&m| ProposalNumber(m)).collect();
            let got = next_proposal(cur, &ms, n, l).unwrap();
            prop_assert!(ms.iter().all(|m| got > *m));
            prop_assert_eq!(got.0 % n as u64, current % n as u64);
            prop_assert!(got >= cur);
            prop_assert_eq!(got.0, next_proposal_loop(current, &mins, n as u64));
            if ms.iter().all(|m| *m < cur) {
                prop_assert_eq!(got, cur);
            }
        }

        #[test]
        fn round_trip_is_identity(min in 0u64..(1u64 << 31), frac in 0.0f64..1.0, v in 0u8..4) {
            let l = SlotLayout::default();
            let accepted = (min as f64 * frac) as u64;
            let value = (accepted > 0).then_some(v);
            let s = st(min, accepted, value);
            prop_assert_eq!(s.pack(l).unwrap().unpack(l).unwrap(), s);
        }
    }

    #[test]
    fn majority_sizes() {
        assert_eq!(majority(3), 2);
        assert_eq!(majority(5), 3);
        assert_eq!(majority(4), 3);
        assert_eq!(majority(1), 1);
    }

    #[test]
    fn proposal_residue_identifies_proposer() {
        assert_eq!(ProposalNumber(7).proposer(3), ProcessId(1));
        assert_eq!(ProposalNumber(9).proposer(3), ProcessId(0));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let n = rng.gen_range(2..8usize);
            let id = rng.gen_range(0..n) as u64;
            let p = ProposalNumber(id + rng.gen_range(0..100u64) * n as u64);
            assert_eq!(p.proposer(n), ProcessId(id as u32));
        }
    }
}
