use alloc::boxed::Box;
use alloc::string::String;

use crate::metatrain::Checkpoint;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("episode sampling failed: {0}")]
    Sampling(String),

    #[error("partition failed: {0}")]
    Partition(String),

    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("baseline failed: {0}")]
    Baseline(String),

    #[error("meta-training diverged at epoch {epoch}; last finite state retained")]
    Diverged { epoch: usize, last_finite: Box<Checkpoint> },
}
