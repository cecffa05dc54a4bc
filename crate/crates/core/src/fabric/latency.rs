//! Virtual time and per-operation-kind delay models.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// A point in virtual time, in nanosecond-equivalents (1000 per virtual µs).
///
/// Integer ticks keep event ordering exact; outputs convert to µs-equivalents
/// at the edges.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct VTime(pub u64);

impl VTime {
    pub const ZERO: VTime = VTime(0);

    pub fn from_us(us: f64) -> VTime {
        VTime((us * 1000.0).round() as u64)
    }

    pub fn as_us(self) -> f64 {
        self.0 as f64 / 1000.0
    }

    pub fn saturating_sub(self, other: VTime) -> VTime {
        VTime(self.0.saturating_sub(other.0))
    }
}

impl std::ops::Add for VTime {
    type Output = VTime;
    fn add(self, rhs: VTime) -> VTime {
        VTime(self.0 + rhs.0)
    }
}

impl std::fmt::Display for VTime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3}us", self.as_us())
    }
}

/// One-way delay of a single operation: a constant, or seeded jitter drawn
/// uniformly from `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Delay {
    Const(VTime),
    Jitter { lo: VTime, hi: VTime },
}

impl Delay {
    fn sample(self, rng: &mut ChaCha8Rng) -> VTime {
        match self {
            Delay::Const(v) => v,
            Delay::Jitter { lo, hi } => VTime(rng.gen_range(lo.0..=hi.0.max(lo.0))),
        }
    }
}

/// Kinds of fabric operations, for delays and counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpKind {
    Read,
    Cas,
    Write,
    WriteCas,
    Msg,
}

impl OpKind {
    pub const ALL: [OpKind; 5] = [
        OpKind::Read,
        OpKind::Cas,
        OpKind::Write,
        OpKind::WriteCas,
        OpKind::Msg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Read => "read",
            OpKind::Cas => "cas",
            OpKind::Write => "write",
            OpKind::WriteCas => "write_cas",
            OpKind::Msg => "msg",
        }
    }
}

/// Per-kind one-way delays plus the local processing overhead.
///
/// Defaults are calibrated so that a CAS fan-out to a remote majority takes
/// 1.9 virtual-µs round trip, a plain write round 1.25, local hops 0.6, and
/// crash detection 30 -- the figures the scenario suite checks against.
///
/// `pre_gst_extra` adds seeded extra delay to every operation issued before
/// `gst`, giving liveness tests an asynchronous prefix that settles into a
/// synchronous tail.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub read_one_way: Delay,
    pub cas_one_way: Delay,
    pub write_one_way: Delay,
    pub msg_one_way: Delay,
    /// One-way delay for self-addressed operations, and the unit of local
    /// processing overhead.
    pub local_overhead: VTime,
    pub gst: Option<VTime>,
    pub pre_gst_extra: VTime,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel {
            read_one_way: Delay::Const(VTime(950)),
            cas_one_way: Delay::Const(VTime(950)),
            write_one_way: Delay::Const(VTime(625)),
            msg_one_way: Delay::Const(VTime(950)),
            local_overhead: VTime(300),
            gst: None,
            pre_gst_extra: VTime::ZERO,
        }
    }
}

impl LatencyModel {
    /// Zero network delay everywhere; only local overhead remains.
    pub fn zero() -> Self {
        LatencyModel {
            read_one_way: Delay::Const(VTime::ZERO),
            cas_one_way: Delay::Const(VTime::ZERO),
            write_one_way: Delay::Const(VTime::ZERO),
            msg_one_way: Delay::Const(VTime::ZERO),
            local_overhead: VTime::ZERO,
            gst: None,
            pre_gst_extra: VTime::ZERO,
        }
    }

    /// Uniform seeded jitter on every kind, for schedule-shuffling tests.
    pub fn jittered(lo_us: f64, hi_us: f64) -> Self {
        let j = Delay::Jitter {
            lo: VTime::from_us(lo_us),
            hi: VTime::from_us(hi_us),
        };
        LatencyModel {
            read_one_way: j,
            cas_one_way: j,
            write_one_way: j,
            msg_one_way: j,
            ..Default::default()
        }
    }

    pub(crate) fn one_way(
        &self,
        kind: OpKind,
        self_addressed: bool,
        now: VTime,
        rng: &mut ChaCha8Rng,
    ) -> VTime {
        let base = if self_addressed {
            self.local_overhead
        } else {
            match kind {
                OpKind::Read => self.read_one_way.sample(rng),
                OpKind::Cas | OpKind::WriteCas => self.cas_one_way.sample(rng),
                OpKind::Write => self.write_one_way.sample(rng),
                OpKind::Msg => self.msg_one_way.sample(rng),
            }
        };
        match self.gst {
            Some(gst) if now < gst && self.pre_gst_extra > VTime::ZERO => {
                base + VTime(rng.gen_range(0..=self.pre_gst_extra.0))
            }
            _ => base,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn vtime_us_conversion() {
        assert_eq!(VTime::from_us(1.9).0, 1900);
        assert_eq!(VTime(1900).as_us(), 1.9);
        assert_eq!(VTime(300) + VTime(300), VTime(600));
    }

    #[test]
    fn jitter_is_seed_deterministic_and_bounded() {
        let model = LatencyModel::jittered(0.5, 2.0);
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let da = model.one_way(OpKind::Cas, false, VTime::ZERO, &mut a);
            let db = model.one_way(OpKind::Cas, false, VTime::ZERO, &mut b);
            assert_eq!(da, db);
            assert!(da >= VTime::from_us(0.5) && da <= VTime::from_us(2.0));
        }
    }

    #[test]
    fn pre_gst_extra_vanishes_after_gst() {
        let model = LatencyModel {
            gst: Some(VTime::from_us(10.0)),
            pre_gst_extra: VTime::from_us(5.0),
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let after = model.one_way(OpKind::Cas, false, VTime::from_us(10.0), &mut rng);
        assert_eq!(after, VTime(950));
        let mut saw_extra = false;
        for _ in 0..100 {
            let before = model.one_way(OpKind::Cas, false, VTime::ZERO, &mut rng);
            assert!(before >= VTime(950));
            saw_extra |= before > VTime(950);
        }
        assert!(saw_extra);
    }
}
