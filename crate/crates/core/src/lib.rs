//! Simulation, learning and fleet coordination for shared heavy-duty truck
//! powertrain control policies.

pub mod agent;
pub mod coordinator;
pub mod driver;
pub mod env;
pub mod dynamics;
pub mod error;
pub mod harness;
pub mod nn;
pub mod protocol;
pub mod routes;

pub use error::{DecodeError, Error, Result};
