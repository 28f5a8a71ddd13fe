//! Label-noise memorization lab: small rectifier networks trained on
//! partially corrupted labels, and probes that read class structure out of
//! their hidden layers.

pub mod data;
pub mod linalg;
pub mod mlp;
pub mod rng;
pub mod checkpoint;
pub mod probes;
pub mod lr_probe;
pub mod config;
pub mod harness;
pub mod intervention;
pub mod report;
pub mod selftest;
