pub mod bpi;
pub mod budget;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod masking;
pub mod params;
pub mod report;
pub mod schedule;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
pub use params::ParamStore;
pub use tensor::{AdamW, AdamWConfig, Gradients, Scalar, Tape, Tensor, Var};
pub use vit::{BlockKind, BlockTrace, MaskSet, Vit, VitConfig};
