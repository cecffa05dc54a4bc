//! Two-sided message types and their fixed-layout wire encoding.
//!
//! Every message encodes to exactly [`WIRE_LEN`] bytes:
//! `[tag:1][slot:8][a:8][b:8][c:8][d:1][flags:1]`, little-endian fields.
//! The layout version is stamped into each trace header so recorded traces
//! stay interpretable if the encoding ever changes.

use crate::types::{ProcessId, ProposalNumber, ValueId};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Version of the wire layout below.
pub const WIRE_VERSION: u16 = 1;

/// Encoded length of every message.
pub const WIRE_LEN: usize = 35;

/// Reply to a prepare, carrying the acceptor's post-handler state.
///
/// `min_proposal` is wider than the classic `(ack, accepted)` pair; callers
/// need the observed promise to compute their next proposal bump after a
/// refused prepare.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PreparedReply {
    pub ack: bool,
    pub min_proposal: ProposalNumber,
    pub accepted_proposal: ProposalNumber,
    pub accepted_value: Option<ValueId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Message {
    Prepare {
        slot: u64,
        proposal: ProposalNumber,
    },
    Prepared {
        slot: u64,
        /// Proposal this reply answers, for phase matching at the proposer.
        re: ProposalNumber,
        reply: PreparedReply,
    },
    Accept {
        slot: u64,
        proposal: ProposalNumber,
        value: ValueId,
    },
    Accepted {
        slot: u64,
        re: ProposalNumber,
        min_proposal: ProposalNumber,
    },
    /// Decision announcement. `writer` names the process whose
    /// write-exclusive payload buffer holds the decided bytes.
    Decided {
        slot: u64,
        value: ValueId,
        writer: ProcessId,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("message has {len} bytes, expected {expected}")]
    BadLength { len: usize, expected: usize },
    #[error("unknown message tag {0}")]
    BadTag(u8),
}

impl Message {
    pub fn slot(&self) -> u64 {
        match *self {
            Message::Prepare { slot, .. }
            | Message::Prepared { slot, .. }
            | Message::Accept { slot, .. }
            | Message::Accepted { slot, .. }
            | Message::Decided { slot, .. } => slot,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let (tag, slot, a, b, c, d, flags) = match *self {
            Message::Prepare { slot, proposal } => (0u8, slot, proposal.0, 0, 0, 0u8, 0u8),
            Message::Prepared { slot, re, reply } => (
                1,
                slot,
                re.0,
                reply.min_proposal.0,
                reply.accepted_proposal.0,
                reply.accepted_value.map_or(0, |v| v.0),
                u8::from(reply.ack) | (u8::from(reply.accepted_value.is_some()) << 1),
            ),
            Message::Accept {
                slot,
                proposal,
                value,
            } => (2, slot, proposal.0, 0, 0, value.0, 0),
            Message::Accepted {
                slot,
                re,
                min_proposal,
            } => (3, slot, re.0, min_proposal.0, 0, 0, 0),
            Message::Decided {
                slot,
                value,
                writer,
            } => (4, slot, writer.0 as u64, 0, 0, value.0, 0),
        };
        let mut out = Vec::with_capacity(WIRE_LEN);
        out.push(tag);
        out.extend_from_slice(&slot.to_le_bytes());
        out.extend_from_slice(&a.to_le_bytes());
        out.extend_from_slice(&b.to_le_bytes());
        out.extend_from_slice(&c.to_le_bytes());
        out.push(d);
        out.push(flags);
        debug_assert_eq!(out.len(), WIRE_LEN);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Message, WireError> {
        if bytes.len() != WIRE_LEN {
            return Err(WireError::BadLength {
                len: bytes.len(),
                expected: WIRE_LEN,
            });
        }
        let u64_at = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().unwrap());
        let tag = bytes[0];
        let slot = u64_at(1);
        let a = u64_at(9);
        let b = u64_at(17);
        let c = u64_at(25);
        let d = bytes[33];
        let flags = bytes[34];
        Ok(match tag {
            0 => Message::Prepare {
                slot,
                proposal: ProposalNumber(a),
            },
            1 => Message::Prepared {
                slot,
                re: ProposalNumber(a),
                reply: PreparedReply {
                    ack: flags & 1 != 0,
                    min_proposal: ProposalNumber(b),
                    accepted_proposal: ProposalNumber(c),
                    accepted_value: (flags & 2 != 0).then_some(ValueId(d)),
                },
            },
            2 => Message::Accept {
                slot,
                proposal: ProposalNumber(a),
                value: ValueId(d),
            },
            3 => Message::Accepted {
                slot,
                re: ProposalNumber(a),
                min_proposal: ProposalNumber(b),
            },
            4 => Message::Decided {
                slot,
                value: ValueId(d),
                writer: ProcessId(a as u32),
            },
            t => return Err(WireError::BadTag(t)),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_message() -> impl Strategy<Value = Message> {
        prop_oneof![
            (any::<u64>(), any::<u64>()).prop_map(move |(s, a)| Message::Prepare {
                slot: s,
                proposal: ProposalNumber(a)
            }),
            (
                any::<u64>(),
                any::<u64>(),
                any::<u64>(),
                any::<u64>(),
                any::<bool>(),
                proptest::option::of(0u8..4)
            )
                .prop_map(move |(s, re, min, acc, ack, v)| Message::Prepared {
                    slot: s,
                    re: ProposalNumber(re),
                    reply: PreparedReply {
                        ack,
                        min_proposal: ProposalNumber(min),
                        accepted_proposal: ProposalNumber(acc),
                        accepted_value: v.map(ValueId),
                    },
                }),
            (any::<u64>(), any::<u64>(), 0u8..4).prop_map(move |(s, a, v)| Message::Accept {
                slot: s,
                proposal: ProposalNumber(a),
                value: ValueId(v)
            }),
            (any::<u64>(), any::<u64>(), any::<u64>()).prop_map(move |(s, re, m)| {
                Message::Accepted {
                    slot: s,
                    re: ProposalNumber(re),
                    min_proposal: ProposalNumber(m),
                }
            }),
            (any::<u64>(), 0u8..4, 0u32..8).prop_map(move |(s, v, w)| Message::Decided {
                slot: s,
                value: ValueId(v),
                writer: ProcessId(w)
            }),
        ]
    }

    proptest! {
        #[test]
        fn wire_round_trip(msg in arb_message()) {
            let bytes = msg.encode();
            prop_assert_eq!(bytes.len(), WIRE_LEN);
            prop_assert_eq!(Message::decode(&bytes).unwrap(), msg);
        }
    }

    #[test]
    fn decode_rejects_garbage() {
        assert!(matches!(
            Message::decode(&[0u8; 4]),
            Err(WireError::BadLength { .. })
        ));
        let mut bytes = Message::Prepare {
            slot: 0,
            proposal: ProposalNumber(1),
        }
        .encode();
        bytes[0] = 9;
        assert!(matches!(Message::decode(&bytes), Err(WireError::BadTag(9))));
    }
}
