//! Series-parallel human-powered e-bike: freewheel plant, scripted rider,
//! coast-down identification, virtual-chain and virtual-bike controllers and
//! a fixed-step simulator.
//!
//! The crate is `no_std` and only needs `alloc`.

#![no_std]

extern crate alloc;

pub mod controllers;
pub mod error;
pub mod ident;
pub mod params;
pub mod powertrain;
pub mod rider;
pub mod sim;

pub use error::{Error, Result};
