pub mod error;
pub mod kernels;

pub use error::{Error, Result};
pub mod backbone;
pub mod checkpoint;
pub mod datakit;
pub mod evaluate;
pub mod export;
pub mod geometry;
pub mod glore;
pub mod gradcheck;
pub mod labels;
pub mod model;
pub mod mtlopt;
pub mod nn;
pub mod params;
pub mod precision;
pub mod scenegraph;
pub mod seghead;
pub mod selftest;
