//! Equirectangular geometry.
//!
//! Axis convention: `x` right, `y` up, `z` forward. Panorama pixel `(row, col)` has its
//! center at longitude `phi = 2*pi*(col + 0.5)/W - pi` and latitude
//! `theta = pi/2 - pi*(row + 0.5)/H`, and looks along
//! `(cos(theta) sin(phi), sin(theta), cos(theta) cos(phi))`.

mod camera;
mod projection;
mod rig;

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::grid::{Grid, Texel};

pub use camera::PerspectiveCamera;
pub use projection::{
    backproject, backproject_mask, camera_ray_grid, project, project_mask, project_nearest,
    PerspectiveImage,
};
pub use rig::{
    icosahedron_axes, icosahedron_rig, parse_rig_manifest, read_rig_manifest, rig_manifest,
    write_rig_manifest, ICOSAHEDRON_MIN_FOV_DEG,
};

pub type Vec3 = Vector3<f64>;

/// Per-pixel unit view directions.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionGrid {
    width: usize,
    height: usize,
    dirs: Vec<Vec3>,
}

impl DirectionGrid {
    pub fn from_vec(width: usize, height: usize, dirs: Vec<Vec3>) -> Result<Self> {
        if dirs.len() != width * height {
            return Err(Error::invalid("direction count does not match grid size"));
        }
        Ok(DirectionGrid {
            width,
            height,
            dirs: dirs.into_iter().map(|d| d.normalize()).collect(),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.dirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dirs.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> Vec3 {
        self.dirs[row * self.width + col]
    }

    pub fn as_slice(&self) -> &[Vec3] {
        &self.dirs
    }
}

pub fn longitude_of_col(col: f64, width: usize) -> f64 {
    2.0 * PI * (col + 0.5) / width as f64 - PI
}

pub fn latitude_of_row(row: f64, height: usize) -> f64 {
    FRAC_PI_2 - PI * (row + 0.5) / height as f64
}

pub fn direction_from_angles(phi: f64, theta: f64) -> Vec3 {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    Vec3::new(ct * sp, st, ct * cp)
}

/// `(longitude, latitude)` of a direction; need not be normalized.
pub fn angles_of_direction(dir: &Vec3) -> (f64, f64) {
    let n = dir.norm();
    let phi = dir.x.atan2(dir.z);
    let theta = (dir.y / n).clamp(-1.0, 1.0).asin();
    (phi, theta)
}

pub fn pixel_direction(row: usize, col: usize, height: usize, width: usize) -> Vec3 {
    direction_from_angles(
        longitude_of_col(col as f64, width),
        latitude_of_row(row as f64, height),
    )
}

/// Continuous panorama coordinates `(col, row)` of a direction, pixel centers at integers.
/// The column lies in `[-0.5, W - 0.5)`.
pub fn direction_to_pixel(dir: &Vec3, height: usize, width: usize) -> (f64, f64) {
    let (phi, theta) = angles_of_direction(dir);
    let col = (phi + PI) / (2.0 * PI) * width as f64 - 0.5;
    let row = (FRAC_PI_2 - theta) / PI * height as f64 - 0.5;
    (col, row)
}

/// Nearest panorama pixel `(row, col)` of a direction.
pub fn nearest_pixel(dir: &Vec3, height: usize, width: usize) -> (usize, usize) {
    let (col, row) = direction_to_pixel(dir, height, width);
    let c = (col.round() as i64).rem_euclid(width as i64) as usize;
    let r = (row.round() as i64).clamp(0, height as i64 - 1) as usize;
    (r, c)
}

/// Unit direction of every panorama pixel center.
pub fn make_direction_grid(height: usize, width: usize) -> Result<DirectionGrid> {
    if height == 0 || width == 0 {
        return Err(Error::invalid(format!(
            "direction grid needs nonzero size, got {height}x{width}"
        )));
    }
    let mut dirs = Vec::with_capacity(height * width);
    for row in 0..height {
        for col in 0..width {
            dirs.push(pixel_direction(row, col, height, width));
        }
    }
    Ok(DirectionGrid {
        width,
        height,
        dirs,
    })
}

/// Bilinear lookup at continuous `(col, row)`: columns wrap, rows clamp.
pub fn sample_wrapped<T: Texel>(grid: &Grid<T>, col: f64, row: f64) -> T {
    let w = grid.width() as i64;
    let h = grid.height() as i64;
    let c0 = col.floor();
    let r0 = row.floor();
    let fc = (col - c0) as f32;
    let fr = (row - r0) as f32;
    let c0 = c0 as i64;
    let r0 = r0 as i64;
    let ca = c0.rem_euclid(w) as usize;
    let cb = (c0 + 1).rem_euclid(w) as usize;
    let ra = r0.clamp(0, h - 1) as usize;
    let rb = (r0 + 1).clamp(0, h - 1) as usize;
    T::zero()
        .add_scaled(grid.get(ra, ca), (1.0 - fc) * (1.0 - fr))
        .add_scaled(grid.get(ra, cb), fc * (1.0 - fr))
        .add_scaled(grid.get(rb, ca), (1.0 - fc) * fr)
        .add_scaled(grid.get(rb, cb), fc * fr)
}

/// Bilinear panorama lookup along a direction.
pub fn sample_equirect<T: Texel>(grid: &Grid<T>, dir: &Vec3) -> T {
    let (col, row) = direction_to_pixel(dir, grid.height(), grid.width());
    sample_wrapped(grid, col, row)
}

/// Nearest-neighbor panorama lookup along a direction.
pub fn sample_equirect_nearest<T: Copy>(grid: &Grid<T>, dir: &Vec3) -> T {
    let (r, c) = nearest_pixel(dir, grid.height(), grid.width());
    grid.get(r, c)
}

/// Solid-angle weight (proportional to `cos(latitude)`) of each panorama row.
pub fn row_area_weight(row: usize, height: usize) -> f64 {
    latitude_of_row(row as f64, height).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn two_pixel_panorama() {
        let g = make_direction_grid(1, 2).unwrap();
        assert_relative_eq!(g.get(0, 0), Vec3::new(-1.0, 0.0, 0.0), epsilon = 1e-12);
        assert_relative_eq!(g.get(0, 1), Vec3::new(1.0, 0.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn hand_evaluated_pixel() {
        // phi = -pi/4, theta = pi/4
        let g = make_direction_grid(2, 4).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert_relative_eq!(g.get(0, 1), Vec3::new(-0.5, h, 0.5), epsilon = 1e-12);
    }

    #[test]
    fn zero_size_rejected() {
        assert!(make_direction_grid(0, 4).is_err());
        assert!(make_direction_grid(4, 0).is_err());
    }

    #[test]
    fn unit_norm_everywhere() {
        for (h, w) in [(1, 1), (3, 7), (64, 128)] {
            let g = make_direction_grid(h, w).unwrap();
            assert!(g.as_slice().iter().all(|d| (d.norm() - 1.0).abs() < 1e-6));
        }
    }

    #[test]
    fn pixel_direction_roundtrip() {
        let (h, w) = (17, 34);
        for r in 0..h {
            for c in 0..w {
                let (col, row) = direction_to_pixel(&pixel_direction(r, c, h, w), h, w);
                assert!((col - c as f64).abs() < 1e-9 && (row - r as f64).abs() < 1e-9);
                assert_eq!(nearest_pixel(&pixel_direction(r, c, h, w), h, w), (r, c));
            }
        }
    }

    #[test]
    fn wrapped_sampling_interpolates_across_seam() {
        let g = Grid::from_vec(4, 1, vec![0.0f32, 1.0, 2.0, 3.0]).unwrap();
        assert_relative_eq!(sample_wrapped(&g, 3.5, 0.0), 1.5);
        assert_relative_eq!(sample_wrapped(&g, -0.5, 0.0), 1.5);
        assert_relative_eq!(sample_wrapped(&g, 1.25, -3.0), 1.25);
    }
}
