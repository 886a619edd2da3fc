//! The GTCNN model family and its training objective.

pub mod checkpoint;
mod config;
mod gtcnn;
pub mod layers;

pub use config::{ModelConfig, Selection, ENCODER_LAYERS};
pub use gtcnn::{spectral_loss, spectral_mse, spectrogram_of, Conditioning, ForwardVars, Gtcnn, ParamReport};
