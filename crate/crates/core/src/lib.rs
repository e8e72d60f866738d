//! M²UNet: a MetaFormer encoder and UNet decoder with multi-scale
//! upsampling links for binary polyp segmentation, built on a small
//! self-contained reverse-mode tensor engine.

pub mod blocks;
pub mod data;
pub mod engine;
pub mod error;
pub mod gradcheck;
pub mod kv;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
