//! Experience-guided Monte Carlo tree search over AND-OR decomposition trees.

pub mod egn;
pub mod fingerprint;
pub mod problem;
pub mod synthetic;
pub mod tree;
pub mod search;
pub mod seed;
pub mod phase1;
pub mod metrics;
pub mod routes;
pub mod baselines;
pub mod noc;
pub mod remote;
pub mod harness;
