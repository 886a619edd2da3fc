//! Personalized acoustic echo cancellation laboratory.
//!
//! The crate synthesizes full-duplex microphone scenes, implements the gated
//! temporal convolutional network (GTCNN) family on a small reverse-mode
//! autodiff engine, and trains and evaluates it with spectral-mapping loss
//! and echo/quality metrics.

pub mod autodiff;
pub mod db;
pub mod dsp;
pub mod error;
pub mod metrics;
pub mod model;
pub mod scene;
pub mod selftest;
pub mod speaker;
pub mod train;
pub mod voice;
pub mod wav;

pub use error::{Error, Result};
