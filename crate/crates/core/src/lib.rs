//! Speech separation engine: an STFT front end feeds a recurrent network
//! that embeds each time-frequency bin, embeddings are clustered into
//! per-source binary masks, and masked spectra are resynthesized with the
//! mixture phase. Includes an offline path, a streaming low-latency path,
//! training, and projection-based separation metrics.

pub mod cluster;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod harness;
pub mod net;
pub mod pipeline;
pub mod train;
pub mod wav;

pub use error::{Error, Result};
