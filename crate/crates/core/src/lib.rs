//! Soft-prompted flow-matching policies over heterogeneous embodiments.
//!
//! The crate is `no_std` (with `alloc`); file formats, the command line and
//! experiment orchestration live in the `embodiflow` companion crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod adapt;
pub mod analysis;
pub mod dataset;
pub mod flow;
pub mod geometry;
pub mod model;
pub mod synthenv;
pub mod trainer;
pub mod real;
