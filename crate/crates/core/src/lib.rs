//! Split dynamic bandwidth allocation for a virtualized PON OLT.
//!
//! The host-resident vDBA ([`vdba`]) computes the upstream BWMAP for
//! Normal-class T-CONTs while leaving a reserved tail region free. The NIC
//! dataplane ([`intercept`]) captures low-latency DBRus and merges grants for
//! them into that region of the next downstream frame. [`sim`] wires both
//! together with ONUs, links and traffic sources ([`traffic`]) in a
//! deterministic discrete-event simulator; [`metrics`] turns stage
//! timestamps into latency summaries and [`codec`] handles the wire format.

pub mod codec;
pub mod config;
pub mod intercept;
pub mod metrics;
pub mod sim;
pub mod traffic;
pub mod types;
pub mod vdba;

pub use types::{AllocId, Fraction, Nanos, TrafficClass, Words, WORD_BYTES};
