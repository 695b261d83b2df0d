//! Three-stage vehicular fog market: vehicles lease compute to an RSU through a
//! screening contract, the RSU resells it to an MEC server, and the server
//! prices offloading for its users.

pub mod audit;
pub mod error;
pub mod experiments;
pub mod game;
pub mod model;
pub mod oracle;
pub mod scenario;
pub mod stage1;
pub mod stage2;
pub mod stage3;

pub use error::{Error, Result};
pub use model::{ContractMenu, MarketParams, UserProfile, UserSpec, VehiclePopulation};
