//! Multimodal human pose forecasting with heatmap mode representations.

pub mod error;
pub mod export;
pub mod autoencoder;
pub mod config;
pub mod data;
pub mod embedding;
pub mod kinematics;
pub mod motionmap;
pub mod pipeline;
pub mod train;
pub mod nn;

pub use error::{Error, Result};
