//! Panorama frame and depth containers.

use crate::error::{Error, Result};
use crate::grid::{Grid, Rgb};

/// One equirectangular RGB frame; `W == 2H`, channels in [0,1], `index` is 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct EquirectFrame {
    pub index: usize,
    pixels: Grid<Rgb>,
}

impl EquirectFrame {
    pub fn new(index: usize, pixels: Grid<Rgb>) -> Result<Self> {
        if pixels.width() != 2 * pixels.height() || pixels.height() == 0 {
            return Err(Error::invalid(format!(
                "equirectangular frame must be W = 2H, got {}x{}",
                pixels.width(),
                pixels.height()
            )));
        }
        if let Some(bad) = pixels
            .as_slice()
            .iter()
            .flatten()
            .find(|v| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::invalid(format!("channel value {bad} outside [0,1]")));
        }
        Ok(EquirectFrame { index, pixels })
    }

    pub fn pixels(&self) -> &Grid<Rgb> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Grid<Rgb> {
        self.pixels
    }

    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    pub fn height(&self) -> usize {
        self.pixels.height()
    }
}

/// Panoramic depth (ray length from the panorama center) for frame `frame`.
#[derive(Debug, Clone, PartialEq)]
pub struct PanoDepth {
    pub frame: usize,
    pub values: Grid<f32>,
}

/// Affine-ambiguous monocular depth of one perspective view.
#[derive(Debug, Clone, PartialEq)]
pub struct PerspectiveDepth {
    pub view: usize,
    pub frame: usize,
    pub values: Grid<f32>,
}

impl PerspectiveDepth {
    pub fn new(view: usize, frame: usize, values: Grid<f32>) -> Result<Self> {
        if let Some(v) = values.as_slice().iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Numeric(format!(
                "perspective depth for view {view} contains invalid value {v}"
            )));
        }
        Ok(PerspectiveDepth {
            view,
            frame,
            values,
        })
    }

    /// Convert disparity-like input to depth with `d <- 1 / max(d, eps)`.
    pub fn from_disparity(view: usize, frame: usize, disparity: &Grid<f32>, eps: f32) -> Result<Self> {
        Self::new(view, frame, disparity.map(|d| 1.0 / d.max(eps)))
    }
}
