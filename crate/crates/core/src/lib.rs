//! Audio deepfake detection posed as question answering over a toy audio
//! language model: corpus tooling, prompt templates, model, low-rank
//! adaptation, training, evaluation and inference backends.

pub mod audio;
pub mod backend;
pub mod corpus;
pub mod eval;
pub mod label;
pub mod lora;
pub mod model;
pub mod promptkit;
pub mod train;

pub use label::Label;
