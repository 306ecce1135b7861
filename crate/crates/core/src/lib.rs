//! Streaming lip-reading transducer at desk scale.
//!
//! A segment-by-segment visual encoder (truncated 3-D convolution plus
//! time-restricted self-attention), an attention-guided adaptive memory over
//! past segments, a transducer decoder with CTC pre-training, staged
//! training with curriculum ordering, and latency/accuracy evaluation —
//! all on a small self-contained autodiff tape so every piece is testable
//! against independent oracles.

pub mod config;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod selftest;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::rng::Rng;
pub use tensor::{BoolMat, Precision, Tape, Tensor};
