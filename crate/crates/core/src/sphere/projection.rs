use rayon::prelude::*;

use super::{
    make_direction_grid, sample_equirect, sample_equirect_nearest, DirectionGrid,
    PerspectiveCamera,
};
use crate::grid::{Grid, Mask, Texel};

/// Perspective raster with a per-pixel validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PerspectiveImage<T> {
    pub pixels: Grid<T>,
    pub valid: Mask,
}

impl<T: Copy> PerspectiveImage<T> {
    pub fn all_valid(pixels: Grid<T>) -> Self {
        let valid = Grid::new(pixels.width(), pixels.height(), true);
        PerspectiveImage { pixels, valid }
    }

    pub fn valid_fraction(&self) -> f64 {
        self.valid.count() as f64 / self.valid.len().max(1) as f64
    }
}

/// World-space unit rays through every pixel center of `cam`.
pub fn camera_ray_grid(cam: &PerspectiveCamera) -> DirectionGrid {
    let rot = cam.rotation();
    let dirs = (0..cam.height)
        .flat_map(|r| (0..cam.width).map(move |c| (r, c)))
        .map(|(r, c)| rot * cam.pixel_ray_local(r as f64, c as f64))
        .collect();
    DirectionGrid::from_vec(cam.width, cam.height, dirs).expect("ray count matches camera size")
}

fn resample<T: Send>(cam: &PerspectiveCamera, f: impl Fn(&super::Vec3) -> T + Sync + Send) -> Grid<T>
where
    T: Copy,
{
    let rays = camera_ray_grid(cam);
    let data: Vec<T> = rays.as_slice().par_iter().map(f).collect();
    Grid::from_vec(cam.width, cam.height, data).expect("size matches")
}

/// Panorama to perspective: bilinear sampling along each camera ray, longitude wrapping,
/// latitude clamped. Every output pixel is valid. The camera position is ignored.
pub fn project<T: Texel + Send + Sync>(pano: &Grid<T>, cam: &PerspectiveCamera) -> PerspectiveImage<T> {
    PerspectiveImage::all_valid(resample(cam, |d| sample_equirect(pano, d)))
}

/// Nearest-neighbor variant of [`project`], exact for labels and masks.
pub fn project_nearest<T: Copy + Send + Sync>(pano: &Grid<T>, cam: &PerspectiveCamera) -> PerspectiveImage<T> {
    PerspectiveImage::all_valid(resample(cam, |d| sample_equirect_nearest(pano, d)))
}

pub fn project_mask(mask: &Mask, cam: &PerspectiveCamera) -> Mask {
    resample(cam, |d| sample_equirect_nearest(mask, d))
}

/// Perspective to panorama. Pixels whose direction lies in the camera frustum are
/// covered and receive a bilinear sample renormalized over valid source pixels;
/// a frustum pixel with no valid neighbor stays uncovered.
pub fn backproject<T: Texel + Send + Sync>(
    img: &PerspectiveImage<T>,
    cam: &PerspectiveCamera,
    height: usize,
    width: usize,
) -> (Grid<T>, Mask) {
    let dirs = make_direction_grid(height, width).expect("nonzero panorama size");
    let inv = cam.rotation().inverse();
    let samples: Vec<Option<T>> = dirs
        .as_slice()
        .par_iter()
        .map(|d| {
            if !cam.contains_direction(d) {
                return None;
            }
            let (u, v) = cam.local_to_pixel(&(inv * d))?;
            sample_valid(img, u, v)
        })
        .collect();
    let coverage = Grid::from_vec(width, height, samples.iter().map(Option::is_some).collect())
        .expect("size matches");
    let values = Grid::from_vec(
        width,
        height,
        samples.into_iter().map(|s| s.unwrap_or(T::zero())).collect(),
    )
    .expect("size matches");
    (values, coverage)
}

/// Nearest-neighbor inverse of [`project_mask`]: covered pixels copy the nearest
/// perspective pixel, everything else is false.
pub fn backproject_mask(mask: &Mask, cam: &PerspectiveCamera, height: usize, width: usize) -> (Mask, Mask) {
    let dirs = make_direction_grid(height, width).expect("nonzero panorama size");
    let inv = cam.rotation().inverse();
    let w = mask.width() as i64;
    let h = mask.height() as i64;
    let mut coverage = Grid::new(width, height, false);
    let mut out = Grid::new(width, height, false);
    for (i, d) in dirs.as_slice().iter().enumerate() {
        if !cam.contains_direction(d) {
            continue;
        }
        if let Some((u, v)) = cam.local_to_pixel(&(inv * d)) {
            let c = (u.round() as i64).clamp(0, w - 1) as usize;
            let r = (v.round() as i64).clamp(0, h - 1) as usize;
            coverage.as_mut_slice()[i] = true;
            out.as_mut_slice()[i] = mask.get(r, c);
        }
    }
    (out, coverage)
}

fn sample_valid<T: Texel>(img: &PerspectiveImage<T>, u: f64, v: f64) -> Option<T> {
    let w = img.pixels.width() as i64;
    let h = img.pixels.height() as i64;
    let c0 = u.floor();
    let r0 = v.floor();
    let fc = (u - c0) as f32;
    let fr = (v - r0) as f32;
    let (c0, r0) = (c0 as i64, r0 as i64);
    let mut acc = T::zero();
    let mut total = 0.0f32;
    for (dr, wr) in [(0, 1.0 - fr), (1, fr)] {
        for (dc, wc) in [(0, 1.0 - fc), (1, fc)] {
            let weight = wr * wc;
            if weight <= 0.0 {
                continue;
            }
            let r = (r0 + dr).clamp(0, h - 1) as usize;
            let c = (c0 + dc).clamp(0, w - 1) as usize;
            if img.valid.get(r, c) {
                acc = acc.add_scaled(img.pixels.get(r, c), weight);
                total += weight;
            }
        }
    }
    (total > 0.0).then(|| T::zero().add_scaled(acc, 1.0 / total))
}
