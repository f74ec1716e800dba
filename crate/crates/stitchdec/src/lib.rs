//! Streaming blockwise beam-search decoding with endpoint prediction and
//! back-jump recovery.

pub mod attention_monitor;
pub mod beam_search;
pub mod block_stream;
pub mod cli;
pub mod ctc_endpoint;
pub mod error;
pub mod metrics;
pub mod scenario;
pub mod scorer;

pub use error::{Error, Result};
