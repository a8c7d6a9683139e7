//! Deterministic slot-driven simulator of a packetized-energy virtual
//! microgrid.
//!
//! Flexible loads (washing machines, space heating, EV chargers) are
//! discretized into *energy packets* — fixed chunks of x Wh delivered over
//! y-minute slots — and coordinated through a request/accept/deliver/ack
//! handshake with a central energy server. The server runs a four-stage
//! pipeline every slot: admit incoming requests against forecast inventory,
//! classify them into priority classes, cut the slot capacity into
//! per-class slices (optionally extended by storage discharge), and
//! allocate packets to requests earliest-deadline-first.
//!
//! Everything in this crate is integer packet arithmetic plus seeded RNG:
//! a run is a pure function of its [`engine::ScenarioConfig`], and two runs
//! with the same config produce byte-identical message traces. The crate is
//! `no_std`-compatible (`alloc` required); file formats, scenario loading
//! and the command-line front end live in the companion `sden-cli` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod engine;
pub mod loads;
mod math;
pub mod oracle;
pub mod pem;
pub mod protocol;
pub mod resources;
pub mod server;

pub use pem::{
    packetize_energy, slots_in_horizon, ClientId, PacketSpec, PriorityClass, RequestId, Schedule,
    ServiceRequest, ShapeConstraint, SlotIndex,
};
