//! Horizontal wrap-around tools for equirectangular grids.
//!
//! An extended frame appends a copy of the leftmost `W/15` columns on the right, so
//! the extended width is `16W/15` and both end bands are `1/16` of it. Widths must be
//! multiples of 240 for every fraction to be a whole number of columns.

use crate::error::{Error, Result};
use crate::grid::{Grid, Rgb, Texel};

pub fn check_base_width(width: usize) -> Result<()> {
    if width == 0 || width % 240 != 0 {
        return Err(Error::invalid(format!("panorama width {width} must be a positive multiple of 240")));
    }
    Ok(())
}

/// Append the left `W/15` columns on the right.
pub fn circular_extend<T: Copy>(grid: &Grid<T>) -> Result<Grid<T>> {
    let w = grid.width();
    check_base_width(w)?;
    let band = w / 15;
    Ok(Grid::from_fn(w + band, grid.height(), |r, c| grid.get(r, if c < w { c } else { c - w })))
}

/// Drop the right `1/16` of an extended grid.
pub fn circular_crop<T: Copy>(grid: &Grid<T>) -> Result<Grid<T>> {
    let ext = grid.width();
    if ext % 16 != 0 {
        return Err(Error::invalid(format!("extended width {ext} is not a multiple of 16")));
    }
    let w = ext - ext / 16;
    check_base_width(w)?;
    Ok(grid.crop(0, 0, w, grid.height()))
}

/// Width of each end band of an extended grid.
pub fn band_width(extended_width: usize) -> usize {
    extended_width / 16
}

/// One cross-fade step between the end bands. Even steps pull the right band toward
/// the left one with weights falling linearly from 1 to 0 across the band; odd steps
/// pull the left band toward the right one with the mirrored ramp. Columns outside
/// the bands are untouched.
pub fn alternating_blend<T: Texel>(grid: &Grid<T>, step: usize) -> Result<Grid<T>> {
    let ext = grid.width();
    let b = band_width(ext);
    if b < 2 || 2 * b > ext {
        return Err(Error::invalid(format!("extended width {ext} leaves no usable band")));
    }
    let mut out = grid.clone();
    let span = (b - 1) as f32;
    for r in 0..grid.height() {
        for i in 0..b {
            let left = grid.get(r, i);
            let right = grid.get(r, ext - b + i);
            if step % 2 == 0 {
                let w = 1.0 - i as f32 / span;
                out.set(r, ext - b + i, T::zero().add_scaled(left, w).add_scaled(right, 1.0 - w));
            } else {
                let v = i as f32 / span;
                out.set(r, i, T::zero().add_scaled(right, v).add_scaled(left, 1.0 - v));
            }
        }
    }
    Ok(out)
}

/// Wrap-pad `p` columns on each side and replicate `p` edge rows above and below.
pub fn circular_pad<T: Copy>(grid: &Grid<T>, p: usize) -> Result<Grid<T>> {
    let (w, h) = (grid.width(), grid.height());
    if p >= w {
        return Err(Error::invalid(format!("pad {p} must be smaller than width {w}")));
    }
    Ok(Grid::from_fn(w + 2 * p, h + 2 * p, |r, c| {
        let rr = (r as i64 - p as i64).clamp(0, h as i64 - 1) as usize;
        let cc = (c as i64 - p as i64).rem_euclid(w as i64) as usize;
        grid.get(rr, cc)
    }))
}

/// Remove `p` border pixels on every side.
pub fn unpad<T: Copy>(grid: &Grid<T>, p: usize) -> Grid<T> {
    grid.crop(p, p, grid.width() - 2 * p, grid.height() - 2 * p)
}

/// Seam statistics of one frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SeamGap {
    /// Mean absolute step from the last column to the first, less the mean of the
    /// one-sided slopes on either side of the wrap. Zero for a smooth periodic image.
    pub jump: f64,
    /// Mean absolute difference between the last and first columns.
    pub raw: f64,
}

pub fn seam_gap(frame: &Grid<Rgb>) -> Result<SeamGap> {
    let (w, h) = (frame.width(), frame.height());
    if w < 3 || h == 0 {
        return Err(Error::invalid("seam metric needs at least 3 columns"));
    }
    let mut jump = 0.0;
    let mut raw = 0.0;
    for r in 0..h {
        let (a, b) = (frame.get(r, 0), frame.get(r, 1));
        let (z, y) = (frame.get(r, w - 1), frame.get(r, w - 2));
        for ch in 0..3 {
            let (a, b, z, y) = (a[ch] as f64, b[ch] as f64, z[ch] as f64, y[ch] as f64);
            raw += (a - z).abs();
            jump += ((a - z) - 0.5 * ((b - a) + (z - y))).abs();
        }
    }
    let n = (3 * h) as f64;
    Ok(SeamGap {
        jump: jump / n,
        raw: raw / n,
    })
}

/// Per-frame gaps and their means over the video.
pub fn seam_metric(frames: &[Grid<Rgb>]) -> Result<(Vec<SeamGap>, SeamGap)> {
    let gaps = frames.iter().map(seam_gap).collect::<Result<Vec<_>>>()?;
    let n = gaps.len().max(1) as f64;
    let mean = SeamGap {
        jump: gaps.iter().map(|g| g.jump).sum::<f64>() / n,
        raw: gaps.iter().map(|g| g.raw).sum::<f64>() / n,
    };
    Ok((gaps, mean))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f32::consts::PI;

    fn ramp(w: usize, h: usize) -> Grid<f32> {
        Grid::from_fn(w, h, |r, c| (r * w + c) as f32)
    }

    #[test]
    fn extend_and_crop() {
        let g = ramp(240, 3);
        let e = circular_extend(&g).unwrap();
        assert_eq!(e.width(), 256);
        for r in 0..3 {
            assert_eq!(&e.row(r)[240..], &g.row(r)[..16]);
        }
        assert_eq!(circular_crop(&e).unwrap(), g);
        assert!(circular_extend(&ramp(241, 2)).is_err());
    }

    #[test]
    fn blend_fixed_point_and_sides() {
        let e = circular_extend(&ramp(240, 2)).unwrap();
        assert_eq!(alternating_blend(&e, 0).unwrap(), e);
        let mut g = Grid::from_fn(256, 2, |r, c| (r + c) as f32);
        g.set(0, 3, 100.0);
        let even = alternating_blend(&g, 0).unwrap();
        let odd = alternating_blend(&g, 1).unwrap();
        for c in 0..256 {
            if c >= 240 {
                assert_eq!(odd.get(0, c), g.get(0, c));
            } else {
                assert_eq!(even.get(0, c), g.get(0, c));
            }
            if (16..240).contains(&c) {
                assert_eq!(odd.get(0, c), g.get(0, c));
            }
        }
    }

    #[test]
    fn pad_examples() {
        let g = Grid::from_vec(4, 1, vec![0, 1, 2, 3]).unwrap();
        let p = circular_pad(&g, 1).unwrap();
        assert_eq!(p.row(1), &[3, 0, 1, 2, 3, 0]);
        assert_eq!(p.row(0), p.row(1));
        assert_eq!(p.row(2), p.row(1));
        assert_eq!(circular_pad(&g, 0).unwrap(), g);
        assert!(circular_pad(&g, 4).is_err());
        assert_eq!(unpad(&p, 1), g);
    }

    #[test]
    fn padded_box_filter_commutes_with_roll() {
        let g = Grid::from_fn(12, 3, |r, c| ((r * 5 + c * 7) % 11) as f32);
        let blur = |x: &Grid<f32>| {
            let p = circular_pad(x, 1).unwrap();
            Grid::from_fn(x.width(), x.height(), |r, c| {
                (p.get(r + 1, c) + p.get(r + 1, c + 1) + p.get(r + 1, c + 2)) / 3.0
            })
        };
        assert_eq!(blur(&g.roll_columns(5)), blur(&g).roll_columns(5));
    }

    #[test]
    fn seam_metric_examples() {
        let periodic = Grid::from_fn(240, 8, |_, c| {
            let v = 0.5 + 0.4 * (2.0 * PI * (c as f32 + 0.5) / 240.0).sin();
            [v, v, v]
        });
        let gap = seam_gap(&periodic).unwrap();
        assert!(gap.jump <= 1.0 / 255.0, "{gap:?}");
        // neighbouring columns of the sine differ by about 0.01, which the raw gap sees
        assert!(gap.raw > 1.0 / 255.0);
        let seam = Grid::from_fn(240, 8, |_, c| if c < 120 { [0.2; 3] } else { [0.7; 3] });
        let g = seam_gap(&seam).unwrap();
        assert!((g.raw - 0.5).abs() < 1e-6 && (g.jump - 0.5).abs() < 1e-6);
        // a seamful image measures differently once the seam is rolled inside
        assert!(seam_gap(&seam.roll_columns(60)).unwrap().jump < 1e-6);
        assert!(seam_gap(&periodic.roll_columns(60)).unwrap().jump <= 1.0 / 255.0);
        assert_eq!(seam_gap(&seam.flip_vertical()).unwrap(), seam_gap(&seam).unwrap());
    }

    proptest! {
        #[test]
        fn blend_contracts(seed in any::<u64>()) {
            let g = Grid::from_fn(256, 2, |r, c| (((r as u64 * 977 + c as u64 * 131) ^ seed) % 1000) as f32 / 1000.0);
            let gap = |x: &Grid<f32>| (0..2).flat_map(|r| (0..16).map(move |i| (r, i)))
                .map(|(r, i)| (x.get(r, 240 + i) - x.get(r, i)).abs())
                .fold(0.0f32, f32::max);
            let before = gap(&g);
            let after = gap(&alternating_blend(&alternating_blend(&g, 0).unwrap(), 1).unwrap());
            prop_assert!(after <= 0.25 * before + 1e-6);
            if before > 0.0 {
                prop_assert!(after < before);
            }
        }
    }
}
