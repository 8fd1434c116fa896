//! Federated exchange of GAN generators and frozen-generator fusion.
//!
//! Clients train generators locally ([`gan`]), publish them through a
//! versioned registry ([`federation`]), and a fusion network ([`fusion`])
//! freezes the downloaded generators, feeds them and one trainable generator
//! from the same noise batch, and trains the new generator against a
//! discriminator over concatenated real combinations. [`cascade`] chains two
//! fusion stages with periodic re-fetch. [`synthdata`] supplies ground-truth
//! clustered distributions and the metrics used to score all of it.

pub mod cascade;
pub mod diffcore;
pub mod federation;
pub mod fusion;
pub mod gan;
pub mod synthdata;

mod error;
pub use error::{Error, Result};
