//! Panoramic space-time reconstruction.
//!
//! Turns a fixed-camera equirectangular video into temporally consistent panoramic depth,
//! optical-flow motion masks, a time-stamped point cloud and a perspective training rig.

pub mod error;
pub mod frame;
pub mod grid;
pub mod io;
pub mod field;
pub mod align;
pub mod curate;
pub mod lift;
pub mod motion;
pub mod oracle;
pub mod pipeline;
pub mod seam;
pub mod spacetime;
pub mod sphere;
pub mod warp;

pub use error::{Error, Result};
