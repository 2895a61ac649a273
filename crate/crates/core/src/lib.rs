//! Core algorithms for estimating the metric distance between the camera
//! centers of two frames from a monocular camera.
//!
//! Everything in this crate is pure computation and builds without `std`
//! (an allocator is required). File formats, image decoding and the CLI live
//! in the `scalenet` crate.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod imaging;
pub mod model;
pub mod nn;
pub mod sampling;
pub mod synthgen;
pub mod training;

pub use error::{Error, Result};
