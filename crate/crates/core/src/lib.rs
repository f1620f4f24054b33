pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod generation;
pub mod geometry;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod renderer;
pub mod sky;
pub mod synthetic;
pub mod training;
pub mod trajectory;

pub use error::{Error, Result};
