//! An OpenFlow 1.0 learning-switch controller testbed.
//!
//! The crate has two halves that speak to each other over TCP:
//!
//! * an **engine** ([`engine`]) — a reactive learning-switch controller whose
//!   threading model, packet-buffer strategy, and MAC-table layout are all
//!   pluggable, with per-worker instrumentation counters so the cost of each
//!   choice is observable rather than guessed at;
//! * a **harness** ([`bench`]) — a CBench-compatible switch emulator that
//!   opens N switch connections, blasts 82-byte packet-in probes, counts and
//!   audits the responses, and sweeps load axes (engine workers, unique MACs,
//!   switch count).
//!
//! [`ofwire`] is the shared OpenFlow 1.0 codec, [`bufferpool`] the reusable
//! I/O buffer machinery, [`learnswitch`] the MAC-learning application,
//! [`report`] the aggregation/CSV/JSON layer, and [`cli`] the `ofbench`
//! binary's subcommands.

pub mod bench;
pub mod bufferpool;
pub mod cli;
pub mod config;
pub mod engine;
pub mod learnswitch;
pub mod ofwire;
pub mod report;

/// The classic OpenFlow controller port.
pub const DEFAULT_OPENFLOW_PORT: u16 = 6633;
