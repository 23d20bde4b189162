pub mod cli;
pub mod config;
pub mod detector;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fpsm;
pub mod geometry;
pub mod ifem;
pub mod maskhead;
pub mod numerics;
pub mod pipeline;
pub mod synthdata;
pub mod train;
pub mod verify;
pub mod ticam;

pub use error::{Error, Result};
