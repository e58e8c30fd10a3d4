//! Compositional replace/mask augmentation with cosine-similarity losses for
//! ultra-fine-grained image classification, small enough to train on a laptop.

pub mod augment;
pub mod backbone;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod rng;
pub mod trainer;
pub mod tensor;

pub use error::{Error, Result};
