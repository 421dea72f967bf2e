//! Quadrature-based convolutions on arbitrary point clouds, a small reverse-mode
//! autodiff engine, and convolutional autoencoders for compressing time series
//! of fields sampled on such meshes.

pub mod autodiff;
pub mod cache;
pub mod compression;
pub mod config;
pub mod data;
pub(crate) mod binio;
pub mod error;
pub mod index_map;
pub mod kernel;
pub mod mesh;
pub mod quadconv;
pub mod quadrature;

pub use error::{Error, Result};
