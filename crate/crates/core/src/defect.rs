//! Deliberate protocol defects.
//!
//! The bounded checker's own tests switch these on to confirm the explorer
//! detects broken protocol variants. Every production path runs with
//! `Defect::default()` (all off).

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct Defect {
    /// Decide the accept phase even when a CAS in it failed.
    pub skip_cas_fail_abort: bool,
    /// Keep the proposer's own value instead of adopting the
    /// highest-accepted one seen during prepare.
    pub skip_adoption: bool,
    /// Acceptor stores an accept regardless of its promised minimum.
    pub accept_below_min: bool,
}

impl Defect {
    pub const NONE: Defect = Defect {
        skip_cas_fail_abort: false,
        skip_adoption: false,
        accept_below_min: false,
    };

    pub fn is_none(&self) -> bool {
        *self == Defect::NONE
    }
}
