pub mod cli;
pub mod correspondence;
pub mod error;
pub mod geometry;
pub mod image;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod splat;
pub mod wavelet;

pub use error::{Error, Result};
