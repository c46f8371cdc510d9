//! Reflection/transmission separation from unpaired flash and no-flash captures
//! using four independently optimized Gaussian-splat clouds.

pub mod camera;
pub mod composite;
pub mod error;
pub mod eval;
pub mod init;
pub mod io;
pub mod losses;
pub mod optim;
pub mod pipeline;
pub mod map;
pub mod raster;
pub mod splat;
pub mod synth;

pub use error::{Error, Result};
pub use map::ImageMap;
