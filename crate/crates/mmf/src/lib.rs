//! File formats, a threaded executor and the command-line front end for the
//! meta-learned matrix factorization model in `mmf-core`.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod exec;
pub mod num;
pub mod report;

pub use error::{Error, Result};
pub use exec::Threaded;
