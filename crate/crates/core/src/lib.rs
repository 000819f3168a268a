//! Symbolic semantic segmentation.
//!
//! An encoder-decoder backbone produces a feature map `x`; a Sender LSTM
//! turns it into a fixed-length sentence of discrete symbols, a Receiver
//! LSTM decodes the sentence into a conditioning vector, and a fusion head
//! co-generates the final mask from both. The [`analysis`] module then
//! relates emitted symbols to region outcomes.

pub mod analysis;
pub mod backbone;
pub mod channel;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod grad;
pub mod model;
pub mod params;
pub mod postprocess;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
