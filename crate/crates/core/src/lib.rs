//! Daily PM10 and oxidative-potential estimation from 1 km² satellite image
//! patches and meteorology.
//!
//! The crate is organised by pipeline stage: [`dataset`] ingestion and
//! filtering, [`synthgen`] synthetic corpora, [`backbone`] and [`head`] for
//! the network, [`contrastive`] self-supervised pre-training, [`metembed`]
//! forest embedding of meteorology, [`eval`] metrics and [`runner`]
//! orchestration.

pub mod backbone;
pub mod contrastive;
pub mod dataset;
pub mod error;
pub mod head;
pub mod eval;
pub mod metembed;
pub mod nn;
pub mod runner;
pub mod seed;
pub mod synthgen;

pub use error::{Error, Result};
