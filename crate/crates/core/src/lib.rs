//! Simulation of secure, energy-aware cluster formation with private
//! aggregator election and masked data collection in sensor networks.

pub mod adversary;
pub mod crypto;
pub mod energy;
pub mod error;
pub mod netsim;
pub mod metrics;
pub mod protocol;
pub mod scenario;

pub use error::{Error, Result};
pub use scenario::Scenario;
