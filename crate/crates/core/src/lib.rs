//! Contrastive attention for abnormality-aware report generation.
//!
//! The crate is `no_std` (it needs `alloc`) and carries only the numerical
//! side of the pipeline:
//!
//! - [`tensor`] and [`tape`]: a small dense matrix type and a reverse-mode
//!   tape with exact adjoints, plus [`gradcheck`] for finite differences.
//! - [`features`]: projection of raw patch features and global pooling.
//! - [`pool`]: the normality pool of global features from normal images.
//! - [`contrastive`]: aggregate attention over the pool, differentiate
//!   attention, and fusion into enhanced features.
//! - [`decoder`], [`model`] and [`train`]: a gated recurrent report decoder,
//!   its teacher-forced loss, greedy decoding and an Adam training loop.
//! - [`metrics`]: corpus BLEU, ROUGE-L and tag-level precision/recall/F1.
//! - [`synth`]: a seeded synthetic corpus of feature grids and reports.
//!
//! File formats, corpus IO and the command line live in the `contrastive`
//! crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod contrastive;
pub mod corpus;
pub mod decoder;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod pool;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
