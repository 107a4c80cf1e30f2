//! Parameter-efficient finetuning of a small SAM-style segmentation model.

pub mod autodiff;
pub mod error;
pub mod export;
pub mod instanceseg;
pub mod interactive;
pub mod memory;
pub mod npa;
pub mod optim;
pub mod params;
pub mod peft;
pub mod quant;
pub mod samlite;
pub mod synth;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
