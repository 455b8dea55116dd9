//! LTE-LAA / Wi-Fi coexistence simulator with an implicit-monitoring misbehavior detector.
//!
//! The pipeline runs in four stages:
//! [`mac`] simulates channel access and produces a ground-truth [`mac::EventTrace`],
//! [`monitor`] turns what each AP can sense into observation vectors,
//! [`hub`] merges the reports, reconstructs backoff counters and scores each eNB,
//! and [`experiment`] sweeps scenarios and builds ROC curves.

pub mod signal;
pub mod mac;
pub mod monitor;
pub mod hub;
pub mod experiment;
