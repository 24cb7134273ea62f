//! Meta-learned fast adaptation and one-shot channel pruning for a small
//! convolutional tracker, trained on simulated tracking episodes.

pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod metalearn;
pub mod network;
pub mod pruning;
pub mod tracker;
pub mod simworld;

pub use error::{Error, Result};
