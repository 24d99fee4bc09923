//! Training and evaluation harness on synthetic scenes.

pub mod config;
pub mod data;
pub mod eval;
pub mod heatmap;
pub mod model;
pub mod report;
pub mod sweep;
pub mod train;

pub use config::RunConfig;
pub use model::Model;
