//! Irregular point-cloud convolution toolkit.
//!
//! * [`tensor`]: dense tensors, reverse-mode tape, normalisation, ADAM
//! * [`geometry`]: k-NN graphs, farthest point sampling, kernel density
//! * [`transport`]: Chamfer, exact / auction EMD and Sinkhorn distances
//! * [`pcconv`]: the low-rank spatially weighted point convolution
//! * [`autoencoder`]: hierarchical encoder and AdaIN patch decoder
//! * [`dynamics`]: Interaction-Network simulator on latent clouds
//! * [`datasets`]: synthetic shapes, Lennard-Jones particles, file IO

pub mod autoencoder;
pub mod checkpoint;
pub mod datasets;
pub mod dynamics;
mod error;
pub mod geometry;
pub mod pcconv;
pub mod precision;
pub mod seed;
pub mod tensor;
pub mod transport;

pub use error::{Error, Result};
pub use geometry::PointCloud;

pub use precision::Precision;
