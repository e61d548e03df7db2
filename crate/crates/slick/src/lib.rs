//! Slick: network functions that keep their packet contents, rules and state
//! confidential while running on machines you do not trust.
//!
//! A network function is described as a graph of small processing elements in
//! a `.slick` configuration file. The runtime instantiates the graph inside a
//! simulated enclave: packet buffers live in an explicitly untrusted memory
//! region, every address crossing into the trusted region is validated, and
//! traffic, rules and runtime state only ever leave the trusted region under
//! authenticated encryption. Instances prove what they are running to a
//! configuration service through measurement-based attestation before any
//! secret is released to them.
//!
//! The crate is organised along that pipeline:
//!
//! * [`packet`]: buffer pools in tagged memory regions and address validation
//! * [`config`]: the `.slick` graph language (parse, print, validate)
//! * [`elements`]: the processing elements themselves
//! * [`chain`]: lockless rings for chaining processes over shared memory
//! * [`runtime`]: the poll-mode scheduler, clocks, timers and instances
//! * [`persist`]: sealed state files that survive restarts
//! * [`attest`]: the attestation and provisioning services
//! * [`bench`], [`pktgen`], [`pcap`]: measurement and traffic tooling

pub mod attest;
pub mod bench;
pub mod chain;
pub mod config;
pub mod crypto;
pub mod elements;
pub mod packet;
pub mod pcap;
pub mod persist;
pub mod pktgen;
pub mod runtime;

mod guide;
