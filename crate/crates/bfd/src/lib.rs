//! Archive IO, analysis stages and the `bfd` command line.

pub mod cli;
pub mod error;
pub mod model;
pub mod output;
pub mod pipeline;
pub mod render;
pub mod store;

pub use error::{BfdError, Result};
