//! Off-policy contextual bandit learning under per-domain replication
//! constraints.
//!
//! The crate is `no_std` (with `alloc`) and purely computational: a small
//! reverse-mode autodiff tape ([`gradcore`]), a shared-scorer softmax policy
//! ([`policy`]), the replication / IPS / hinge objectives ([`objectives`]),
//! constraint benchmarks ([`bench`]), four trainers ([`trainers`]), a
//! synthetic logged-bandit environment ([`synthenv`]) and evaluation metrics
//! ([`eval`]). File formats and the command-line front end live in the
//! `ctrlbandit` crate.

#![no_std]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod bench;
pub mod error;
pub mod eval;
pub mod gradcore;
pub mod math;
pub mod objectives;
pub mod optim;
pub mod policy;
pub mod synthenv;
pub mod trainers;

pub use error::{Error, Result};
