//! File formats, corpus tooling and the command-line pipeline around
//! [`contrastive_core`].

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fmat;
pub mod gradcheck;
pub mod inspect;
pub mod npol;
pub mod pipeline;

pub use error::{CliError, FormatError, Result};
