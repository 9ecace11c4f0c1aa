//! Optical-flow motion masks and motion-driven view selection.
//!
//! For a video of `L` frames with flow slices `F_1..F_{L-1}` (frame `l` to `l + 1`):
//! the source mask `M_l` marks pixels moving more than a threshold, the destination
//! mask `M'_{l+1}` marks where they land, and the per-frame region is
//! `M^l = M_{l-1} | M'_l | M_l` with missing terms dropped at both ends.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{Flow, Grid, Mask, Rgb};
use crate::sphere::{project_mask, PerspectiveCamera};

/// Default motion threshold in pixels.
pub const DEFAULT_FLOW_THRESHOLD: f32 = 1.0;

/// Flow slices between consecutive frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    slices: Vec<Grid<Flow>>,
}

impl FlowField {
    pub fn new(width: usize, height: usize, slices: Vec<Grid<Flow>>) -> Result<Self> {
        for (i, s) in slices.iter().enumerate() {
            if s.width() != width || s.height() != height {
                return Err(Error::invalid(format!(
                    "flow slice {} is {}x{}, expected {width}x{height}",
                    i + 1,
                    s.width(),
                    s.height()
                )));
            }
            let bad = s.as_slice().iter().any(|[u, v]| {
                !(u.is_finite() && v.is_finite()) || u.abs() > width as f32 || v.abs() > height as f32
            });
            if bad {
                return Err(Error::invalid(format!("flow slice {} has non-finite or out-of-range values", i + 1)));
            }
        }
        Ok(FlowField { width, height, slices })
    }

    /// Flow for a video of `frames` frames with no motion.
    pub fn zeros(width: usize, height: usize, frames: usize) -> Self {
        FlowField {
            width,
            height,
            slices: vec![Grid::new(width, height, [0.0, 0.0]); frames.saturating_sub(1)],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn frames(&self) -> usize {
        self.slices.len() + 1
    }

    /// Flow from frame `l` to `l + 1`, `l` starting at 1.
    pub fn slice(&self, l: usize) -> &Grid<Flow> {
        &self.slices[l - 1]
    }

    pub fn slices(&self) -> &[Grid<Flow>] {
        &self.slices
    }
}

fn wrap_u(u: f32, width: usize) -> f32 {
    let w = width as f32;
    u - w * (u / w).round()
}

/// Pixels whose displacement (horizontal part on the shorter way around) exceeds `tau`.
pub fn source_mask(flow: &Grid<Flow>, tau: f32) -> Mask {
    let w = flow.width();
    flow.map(|[u, v]| {
        let u = wrap_u(u, w);
        (u * u + v * v).sqrt() > tau
    })
}

/// Forward splat of `mask` along `flow` onto the bilinear neighbors of each landing point.
/// Columns wrap; rows leaving the panorama are dropped.
pub fn destination_mask(mask: &Mask, flow: &Grid<Flow>) -> Mask {
    let (w, h) = (mask.width(), mask.height());
    let mut out = Grid::new(w, h, false);
    for i in mask.indices() {
        let (r, c) = (i / w, i % w);
        let [u, v] = flow.as_slice()[i];
        let x = c as f64 + u as f64;
        let y = r as f64 + v as f64;
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
                if wx * wy <= 0.0 {
                    continue;
                }
                let rr = y0 as i64 + dy;
                if rr < 0 || rr >= h as i64 {
                    continue;
                }
                let cc = (x0 as i64 + dx).rem_euclid(w as i64) as usize;
                out.set(rr as usize, cc, true);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionMasks {
    /// `M_l` for `l = 1..L-1`.
    pub source: Vec<Mask>,
    /// `M'_l` for `l = 2..L`, stored from index 0.
    pub destination: Vec<Mask>,
    /// `M^l` for `l = 1..L`.
    pub regions: Vec<Mask>,
    /// Union of all regions.
    pub overall: Mask,
}

impl MotionMasks {
    pub fn from_flow(flow: &FlowField, tau: f32) -> Self {
        let source: Vec<Mask> = flow.slices().par_iter().map(|f| source_mask(f, tau)).collect();
        let destination: Vec<Mask> = source
            .par_iter()
            .zip(flow.slices())
            .map(|(m, f)| destination_mask(m, f))
            .collect();
        let frames = flow.frames();
        let mut regions = Vec::with_capacity(frames);
        let mut overall = Grid::new(flow.width(), flow.height(), false);
        for l in 1..=frames {
            let mut m = Grid::new(flow.width(), flow.height(), false);
            if l >= 2 {
                m.or_assign(&source[l - 2]);
                m.or_assign(&destination[l - 2]);
            }
            if l < frames {
                m.or_assign(&source[l - 1]);
            }
            overall.or_assign(&m);
            regions.push(m);
        }
        MotionMasks {
            source,
            destination,
            regions,
            overall,
        }
    }

    pub fn frames(&self) -> usize {
        self.regions.len()
    }

    /// `M^l`, `l` starting at 1.
    pub fn region(&self, l: usize) -> &Mask {
        &self.regions[l - 1]
    }
}

/// Views whose nearest-neighbor projection of the motion region has at least one set pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSelection {
    pub frame: usize,
    pub views: Vec<usize>,
    /// Overlap pixel count for every rig camera, selected or not.
    pub overlap: Vec<usize>,
}

pub fn select_views(frame: usize, region: &Mask, rig: &[PerspectiveCamera]) -> ViewSelection {
    let overlap: Vec<usize> = if region.any() {
        rig.par_iter().map(|cam| project_mask(region, cam).count()).collect()
    } else {
        vec![0; rig.len()]
    };
    let views = overlap
        .iter()
        .enumerate()
        .filter(|(_, &n)| n > 0)
        .map(|(i, _)| i)
        .collect();
    ViewSelection { frame, views, overlap }
}

/// Integer block flow from `a` to `b` minimizing the sum of absolute RGB differences.
/// Candidate blocks wrap horizontally and clamp vertically. Ties prefer the smaller
/// `|dx| + |dy|`, then the earlier candidate in row-major search order.
pub fn block_matching_flow(a: &Grid<Rgb>, b: &Grid<Rgb>, block: usize, search: usize) -> Result<Grid<Flow>> {
    if !a.same_shape(b) {
        return Err(Error::invalid("block matching needs frames of equal size"));
    }
    if block == 0 || search == 0 {
        return Err(Error::invalid("block and search must be at least 1"));
    }
    let (w, h) = (a.width(), a.height());
    let s = search as i64;
    let bw = w.div_ceil(block);
    let bh = h.div_ceil(block);
    let best: Vec<(i64, i64)> = (0..bw * bh)
        .into_par_iter()
        .map(|bi| {
            let (br, bc) = (bi / bw * block, bi % bw * block);
            let rows = br..(br + block).min(h);
            let cols = bc..(bc + block).min(w);
            let mut best = (f32::INFINITY, i64::MAX, 0i64, 0i64);
            for dy in -s..=s {
                for dx in -s..=s {
                    let mut sad = 0.0f32;
                    for r in rows.clone() {
                        let rr = (r as i64 + dy).clamp(0, h as i64 - 1) as usize;
                        for c in cols.clone() {
                            let cc = (c as i64 + dx).rem_euclid(w as i64) as usize;
                            let p = a.get(r, c);
                            let q = b.get(rr, cc);
                            sad += (p[0] - q[0]).abs() + (p[1] - q[1]).abs() + (p[2] - q[2]).abs();
                        }
                    }
                    let dist = dx.abs() + dy.abs();
                    if sad < best.0 || (sad == best.0 && dist < best.1) {
                        best = (sad, dist, dx, dy);
                    }
                }
            }
            (best.2, best.3)
        })
        .collect();
    Ok(Grid::from_fn(w, h, |r, c| {
        let (dx, dy) = best[(r / block) * bw + c / block];
        [dx as f32, dy as f32]
    }))
}

/// Nearest-pixel forward warp of `image` along `flow`. With `depth`, the nearer source
/// wins collisions; otherwise the later source in row-major order wins. Pixels nothing
/// lands on are invalid.
pub fn forward_warp<T: Copy + Default>(
    image: &Grid<T>,
    flow: &Grid<Flow>,
    depth: Option<&Grid<f32>>,
) -> (Grid<T>, Mask) {
    let (w, h) = (image.width(), image.height());
    let mut out = Grid::new(w, h, T::default());
    let mut zbuf = Grid::new(w, h, f32::INFINITY);
    let mut valid = Grid::new(w, h, false);
    for r in 0..h {
        for c in 0..w {
            let [u, v] = flow.get(r, c);
            let rr = (r as f32 + v).round() as i64;
            if rr < 0 || rr >= h as i64 {
                continue;
            }
            let cc = ((c as f32 + u).round() as i64).rem_euclid(w as i64) as usize;
            let rr = rr as usize;
            let z = depth.map_or(0.0, |d| d.get(r, c));
            if depth.is_some() && valid.get(rr, cc) && z >= zbuf.get(rr, cc) {
                continue;
            }
            out.set(rr, cc, image.get(r, c));
            zbuf.set(rr, cc, z);
            valid.set(rr, cc, true);
        }
    }
    (out, valid)
}
