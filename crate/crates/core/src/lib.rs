//! Federated visible/infrared person re-identification.
//!
//! Clients train a small encoder with an identity loss, a pairwise circle
//! loss and a memory-bank alignment term; a server averages their
//! parameters and class centers each round. Retrieval is scored with CMC,
//! mAP and mINP over infrared queries against a visible gallery.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod federation;
pub mod losses;
pub mod memory;
pub mod model;

pub use error::{Error, Result};
