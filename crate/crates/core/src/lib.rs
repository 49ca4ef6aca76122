//! Batch reinforcement learning for load tap changer control on radial
//! distribution feeders.
//!
//! The crate is layered bottom-up: [`feeder`] validates topologies and tap
//! windows, [`powerflow`] solves linear and AC branch-flow models and
//! estimates voltages under new taps, [`mdp`] defines states, rewards and the
//! transition history, [`learner`] builds features and runs LSTDQ over
//! virtual transitions, [`control`] turns weights into tap moves next to the
//! conventional and exhaustive baselines, and [`harness`] drives episodes.

pub mod config;
pub mod control;
pub mod feeder;
pub mod harness;
pub mod io;
pub mod learner;
pub mod loads;
pub mod mdp;
pub mod powerflow;
pub mod scenario;
