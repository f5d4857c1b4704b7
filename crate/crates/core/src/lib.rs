//! Passport-protected convolutional networks.
//!
//! A passport layer derives its per-channel scale and shift from the
//! preceding convolution weights and a secret passport tensor. The network
//! only performs well when the matching passport is supplied at inference.

pub mod attack;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod model;
pub mod opcheck;
pub mod passgen;
pub mod passport;
pub mod persist;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
