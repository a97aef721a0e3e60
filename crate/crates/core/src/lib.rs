//! Core algorithms for desk-scale goal-conditioned grasping RL.
//!
//! This crate is `no_std`-compatible (alloc required) and holds everything
//! that does not touch the OS: the deterministic 2D grasping world, the
//! fixed-architecture Q-network with analytic gradients, the cross-entropy
//! action maximizer, HER replay, and the synchronous-SGD learner math.
//! Process management, sockets and file formats live in the `graspq`
//! companion crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod cem;
pub mod nn;
pub mod qnet;
pub mod replay;
pub mod rngutil;
pub mod train;
pub mod world;

pub use cem::{cem_maximize, CemConfig};
pub use qnet::{Network, NetworkSpec, ParamVector};
pub use replay::{EpisodeRecord, RelabeledTransition, ReplayBuffer, Transition};
pub use world::{GoalImage, GraspAction, GripperState, Observation, Split, World, WorldConfig};
