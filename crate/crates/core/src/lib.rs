//! Reinforcement-learning toolkit for optimising sales talk-tracks.
//!
//! A conversation is modelled as a finite-horizon decision process over
//! dialogue states. Agents pick utterances from a fixed catalog, a compliance
//! gate removes disallowed lines, and a scripted customer simulator supplies
//! replies and rewards.

pub mod compliance;
pub mod config;
pub mod dialogue;
pub mod dqn;
pub mod error;
pub mod experience;
pub mod mdp;
pub mod nn;
pub mod orchestrator;
pub mod policy;
pub mod ppo;
pub mod rlhf;
pub mod scenario;
pub mod world;

pub use error::{Error, ErrorKind, Result};
