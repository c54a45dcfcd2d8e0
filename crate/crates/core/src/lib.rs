//! Cascade cross-domain image retrieval core.
//!
//! Everything in this crate is pure computation over in-memory data and
//! builds without `std` (an allocator is required). File formats, timing,
//! the HTTP service and the CLI live in the `cbir` companion crate.
//!
//! The pipeline is: a [`catalog::Catalog`] of images grouped into products
//! and top-level categories (TLCs), an [`catalog::EmbeddingMatrix`] of unit
//! vectors, per-TLC [`vecindex::VectorIndex`] partitions, a
//! [`router`] that predicts the TLC of a query, and a
//! [`cascade::CascadeEngine`] that searches only the routed partition(s).

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod cascade;
pub mod catalog;
pub mod clock;
pub mod error;
pub mod metrics;
pub mod router;
pub mod synthgen;
pub mod vecindex;

mod math;

pub use error::{Error, Result};
