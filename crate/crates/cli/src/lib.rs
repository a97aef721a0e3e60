//! Distributed trainer around the core grasping world and Q-function:
//! wire protocol, All-Reduce transport, the three process roles, and the
//! experiment harness. The binary in `main.rs` is a thin dispatcher over
//! these modules.

pub mod actor;
pub mod allreduce;
pub mod config;
pub mod controller;
pub mod harness;
pub mod img;
pub mod learner;
pub mod synccheck;
pub mod wire;
