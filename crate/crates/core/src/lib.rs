//! Joint self-supervised denoising and few-shot instance segmentation.
//!
//! A single U-Net predicts four channels per pixel: a denoised intensity
//! trained with blind-spot masking on every raw image, and three class
//! scores (background, foreground, border) trained with cross-entropy on
//! the few images that carry annotations. Instances are recovered by
//! thresholding the foreground probability and labeling connected
//! components.

pub mod blindspot;
pub mod dataio;
pub mod error;
pub mod experiments;
pub mod labelgen;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod pipeline;
pub mod postprocess;
pub mod seed;
pub mod storage;
pub mod trainer;

pub use error::{Error, Result};
