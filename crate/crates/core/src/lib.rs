//! Desk-scale self-supervised pre-training for remote sensing imagery.

pub mod augment;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod graph;
pub mod image;
pub mod kernels;
pub mod optim;
pub mod raster;
pub mod strata;
pub mod tensor;
pub mod train;
pub mod vit;

pub use graph::{Graph, Var};
pub use image::Image;
pub use optim::{Parameters, Sgd};
pub use tensor::{Tensor, TensorError};
