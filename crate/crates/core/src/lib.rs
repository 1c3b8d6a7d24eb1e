//! Discrete-time simulator for single-copy packet routing in mobile wireless
//! networks.
//!
//! The crate is organized around the life of a packet:
//!
//! - [`mobility`] — steady-state random-waypoint traces and geometric queries;
//! - [`contact`] — per-pair contact statistics (renewal delay estimates),
//!   last-encounter timers with transitivity, and location gossip;
//! - [`features`] — normalized state/action feature vectors for learned routing;
//! - [`sim`] — the discrete-time world: traffic, queues, forwarding, metrics;
//! - [`strategies`] — forwarding policies (direct, utility, seek-and-focus)
//!   plus an offline optimal-delivery oracle;
//! - [`deeprl`] — Q-network, experience collection and fitted-Q training.
//!
//! All numeric code is generic over [`Scalar`] (any `num-traits` float);
//! [`Real`] pins the width used by the command-line tools.

pub mod contact;
pub mod deeprl;
pub mod error;
pub mod features;
pub mod mobility;
pub mod sim;
pub mod strategies;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Scalar width used by the command-line tools. `f32` keeps the Q-network
/// inner loops vectorizable; metrics accumulate in integers/`f64` regardless.
pub type Real = f32;

/// Mobility trace at the default width.
pub type Trace = mobility::MobilityTrace<Real>;
