//! Row-major 2D grids used for images, depth maps, flow and masks.

use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

pub type Rgb = [f32; 3];
pub type Flow = [f32; 2];
pub type Mask = Grid<bool>;

#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn new(width: usize, height: usize, fill: T) -> Self {
        Grid {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid(format!(
                "grid data has {} elements, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Grid {
            width,
            height,
            data,
        })
    }

    /// Build a grid from `f(row, col)`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                data.push(f(row, col));
            }
        }
        Grid {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.width + col] = value;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, row: usize) -> &[T] {
        &self.data[row * self.width..(row + 1) * self.width]
    }

    pub fn map<U: Copy>(&self, mut f: impl FnMut(T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Circularly shift columns right by `shift` (negative shifts left).
    pub fn roll_columns(&self, shift: isize) -> Self {
        let w = self.width as isize;
        Grid::from_fn(self.width, self.height, |r, c| {
            let src = (c as isize - shift).rem_euclid(w) as usize;
            self.get(r, src)
        })
    }

    pub fn flip_vertical(&self) -> Self {
        Grid::from_fn(self.width, self.height, |r, c| self.get(self.height - 1 - r, c))
    }

    /// Copy of the sub-rectangle starting at (`row`, `col`).
    pub fn crop(&self, row: usize, col: usize, width: usize, height: usize) -> Self {
        assert!(row + height <= self.height && col + width <= self.width);
        Grid::from_fn(width, height, |r, c| self.get(row + r, col + c))
    }
}

impl<T> Index<(usize, usize)> for Grid<T> {
    type Output = T;

    #[inline]
    fn index(&self, (row, col): (usize, usize)) -> &T {
        &self.data[row * self.width + col]
    }
}

impl<T> IndexMut<(usize, usize)> for Grid<T> {
    #[inline]
    fn index_mut(&mut self, (row, col): (usize, usize)) -> &mut T {
        &mut self.data[row * self.width + col]
    }
}

impl Grid<bool> {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&b| b)
    }

    pub fn or(&self, other: &Mask) -> Mask {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn and(&self, other: &Mask) -> Mask {
        self.zip_with(other, |a, b| a && b)
    }

    pub fn not(&self) -> Mask {
        self.map(|b| !b)
    }

    pub fn or_assign(&mut self, other: &Mask) {
        assert!(self.same_shape(other));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a |= b;
        }
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.same_shape(other) && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    /// Flat indices of set pixels, in row-major order.
    pub fn indices(&self) -> Vec<usize> {
        self.data
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    fn zip_with(&self, other: &Mask, f: impl Fn(bool, bool) -> bool) -> Mask {
        assert!(self.same_shape(other), "mask shape mismatch");
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }
}

/// Values that can be blended by bilinear interpolation.
pub trait Texel: Copy {
    fn zero() -> Self;
    fn add_scaled(self, other: Self, weight: f32) -> Self;
}

impl Texel for f32 {
    #[inline]
    fn zero() -> Self {
        0.0
    }

    #[inline]
    fn add_scaled(self, other: Self, weight: f32) -> Self {
        self + other * weight
    }
}

impl<const N: usize> Texel for [f32; N] {
    #[inline]
    fn zero() -> Self {
        [0.0; N]
    }

    #[inline]
    fn add_scaled(mut self, other: Self, weight: f32) -> Self {
        for (a, b) in self.iter_mut().zip(other) {
            *a += b * weight;
        }
        self
    }
}

/// ITU-R BT.601 luma on a 0..255 scale.
pub fn gray255(rgb: Rgb) -> f32 {
    (0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]) * 255.0
}

pub fn to_gray255(image: &Grid<Rgb>) -> Grid<f32> {
    image.map(gray255)
}

/// Peak signal-to-noise ratio (dB) of RGB values in [0,1] over pixels where `valid` holds.
/// Returns `None` when no pixel qualifies.
pub fn psnr(a: &Grid<Rgb>, b: &Grid<Rgb>, valid: Option<&Mask>) -> Option<f64> {
    assert!(a.same_shape(b));
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for i in 0..a.len() {
        if valid.is_some_and(|m| !m.as_slice()[i]) {
            continue;
        }
        for ch in 0..3 {
            let d = (a.as_slice()[i][ch] - b.as_slice()[i][ch]) as f64;
            sum += d * d;
        }
        n += 3;
    }
    if n == 0 {
        return None;
    }
    let mse = sum / n as f64;
    Some(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roll_wraps_columns() {
        let g = Grid::from_fn(4, 1, |_, c| c as i32);
        assert_eq!(g.roll_columns(1).as_slice(), &[3, 0, 1, 2]);
        assert_eq!(g.roll_columns(-1).as_slice(), &[1, 2, 3, 0]);
        assert_eq!(g.roll_columns(4), g);
    }

    #[test]
    fn mask_algebra() {
        let a = Grid::from_vec(2, 1, vec![true, false]).unwrap();
        let b = Grid::from_vec(2, 1, vec![false, false]).unwrap();
        assert!(b.is_subset_of(&a));
        assert!(!a.is_subset_of(&b));
        assert_eq!(a.or(&b), a);
        assert_eq!(a.and(&b).count(), 0);
        assert_eq!(a.indices(), vec![0]);
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Grid::from_vec(2, 2, vec![0u8; 3]).is_err());
    }

    #[test]
    fn psnr_identical_is_infinite() {
        let g = Grid::new(3, 2, [0.5f32; 3]);
        assert_eq!(psnr(&g, &g, None), Some(f64::INFINITY));
        let h = g.map(|p| [p[0] + 0.1, p[1], p[2]]);
        let v = psnr(&g, &h, None).unwrap();
        // mse = 0.01 / 3
        assert!((v - 10.0 * (3.0f64 / 0.01).log10()).abs() < 1e-3);
    }
}
