//! Procedural panoramic scenes with analytic depth and flow.
//!
//! The background is a star-shaped surface around the panorama center with radius
//! `r(phi, theta) = r0 + sum_m a_m sin(m phi) cos(m theta)`, textured with seeded value
//! noise. An optional disk slides along a great circle in front of it while its depth
//! changes linearly over time. Frames are indexed from 1.

use nalgebra::{Rotation3, Unit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::frame::{EquirectFrame, PanoDepth, PerspectiveDepth};
use crate::grid::{Flow, Grid, Rgb};
use crate::sphere::{
    angles_of_direction, camera_ray_grid, direction_from_angles, direction_to_pixel, make_direction_grid, project,
    PerspectiveCamera, Vec3,
};

/// A disk of constant angular radius moving on a great circle.
#[derive(Debug, Clone, PartialEq)]
pub struct MovingDisk {
    pub radius_deg: f64,
    /// Center direction at frame 1.
    pub start: Vec3,
    /// Rotation axis of the path; the center moves by `speed_deg` about it per frame.
    pub axis: Vec3,
    pub speed_deg: f64,
    pub depth_start: f64,
    pub depth_end: f64,
    pub seed: u64,
}

impl MovingDisk {
    /// Disk on the equator starting at longitude `start_lon_deg`, moving east.
    pub fn on_equator(start_lon_deg: f64, radius_deg: f64, speed_deg: f64, depth_start: f64, depth_end: f64) -> Self {
        MovingDisk {
            radius_deg,
            start: direction_from_angles(start_lon_deg.to_radians(), 0.0),
            axis: Vec3::y(),
            speed_deg,
            depth_start,
            depth_end,
            seed: 0x0b1ec7,
        }
    }

    fn rotation(&self, frames: f64) -> Rotation3<f64> {
        Rotation3::from_axis_angle(&Unit::new_normalize(self.axis), (self.speed_deg * frames).to_radians())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleScene {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub base_radius: f64,
    /// `(m, a_m)` pairs. Odd `m` keeps the radius single-valued at the poles.
    pub harmonics: Vec<(u32, f64)>,
    pub seed: u64,
    /// Noise lattice cells per unit of direction.
    pub texture_scale: f64,
    pub object: Option<MovingDisk>,
}

/// One rendered frame with its ground truth.
#[derive(Debug, Clone)]
pub struct OracleFrame {
    pub frame: EquirectFrame,
    pub depth: PanoDepth,
    /// Displacement to the next frame in pixels; zero for the last frame.
    pub flow: Grid<Flow>,
    /// Pixels covered by the object.
    pub object: Grid<bool>,
}

impl OracleScene {
    /// Static background only.
    pub fn new(height: usize, width: usize, frames: usize, seed: u64) -> Self {
        OracleScene {
            height,
            width,
            frames,
            base_radius: 3.0,
            harmonics: vec![(1, 0.6), (3, 0.3)],
            seed,
            texture_scale: 4.0,
            object: None,
        }
    }

    /// Background plus a disk of 12 degrees radius crossing the front view.
    pub fn moving_disk(height: usize, width: usize, frames: usize, seed: u64) -> Self {
        OracleScene {
            object: Some(MovingDisk::on_equator(-12.0, 12.0, 3.0, 1.5, 1.2)),
            ..Self::new(height, width, frames, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width != 2 * self.height || self.height == 0 {
            return Err(Error::invalid("oracle panorama must be W = 2H"));
        }
        if self.frames == 0 {
            return Err(Error::invalid("oracle needs at least one frame"));
        }
        let amp: f64 = self.harmonics.iter().map(|(_, a)| a.abs()).sum();
        if self.base_radius - amp <= 0.0 {
            return Err(Error::invalid("background radius must stay positive"));
        }
        if let Some(o) = &self.object {
            let near = o.depth_start.max(o.depth_end);
            if o.depth_start.min(o.depth_end) <= 0.0 || near >= self.base_radius - amp {
                return Err(Error::invalid("object must lie between the center and the background"));
            }
        }
        Ok(())
    }

    fn check_frame(&self, l: usize) -> Result<()> {
        if l == 0 || l > self.frames {
            return Err(Error::invalid(format!("frame {l} outside 1..={}", self.frames)));
        }
        Ok(())
    }

    pub fn background_radius(&self, dir: &Vec3) -> f64 {
        let (phi, theta) = angles_of_direction(dir);
        self.base_radius
            + self
                .harmonics
                .iter()
                .map(|&(m, a)| a * (m as f64 * phi).sin() * (m as f64 * theta).cos())
                .sum::<f64>()
    }

    fn object_center(&self, o: &MovingDisk, l: usize) -> Vec3 {
        o.rotation((l - 1) as f64) * o.start.normalize()
    }

    fn object_depth(&self, o: &MovingDisk, l: usize) -> f64 {
        if self.frames <= 1 {
            return o.depth_start;
        }
        let t = (l - 1) as f64 / (self.frames - 1) as f64;
        o.depth_start + (o.depth_end - o.depth_start) * t
    }

    fn in_object(&self, dir: &Vec3, l: usize) -> bool {
        self.object.as_ref().is_some_and(|o| {
            let c = self.object_center(o, l);
            c.dot(&dir.normalize()) >= o.radius_deg.to_radians().cos()
        })
    }

    /// Ray length from the center along `dir` at frame `l`.
    pub fn depth_along(&self, dir: &Vec3, l: usize) -> f64 {
        match &self.object {
            Some(o) if self.in_object(dir, l) => self.object_depth(o, l),
            _ => self.background_radius(dir),
        }
    }

    pub fn color_along(&self, dir: &Vec3, l: usize) -> Rgb {
        let d = dir.normalize();
        match &self.object {
            Some(o) if self.in_object(&d, l) => {
                let local = o.rotation((l - 1) as f64).inverse() * d;
                let n = noise_rgb(&(local * self.texture_scale * 1.5), o.seed ^ self.seed);
                [0.55 + 0.4 * n[0], 0.2 + 0.3 * n[1], 0.1 + 0.2 * n[2]]
            }
            _ => {
                let n = noise_rgb(&(d * self.texture_scale), self.seed);
                [0.1 + 0.7 * n[0], 0.15 + 0.7 * n[1], 0.2 + 0.7 * n[2]]
            }
        }
    }

    /// Ground-truth displacement in pixels from frame `l` to `l + 1` at pixel (`row`, `col`).
    fn flow_at(&self, dir: &Vec3, row: usize, col: usize, l: usize) -> Flow {
        let Some(o) = &self.object else {
            return [0.0, 0.0];
        };
        if l >= self.frames || !self.in_object(dir, l) {
            return [0.0, 0.0];
        }
        let moved = o.rotation(1.0) * dir;
        let (c1, r1) = direction_to_pixel(&moved, self.height, self.width);
        let w = self.width as f64;
        let mut du = c1 - col as f64;
        du -= w * (du / w).round();
        [du as f32, (r1 - row as f64) as f32]
    }

    pub fn render(&self, l: usize) -> Result<OracleFrame> {
        self.validate()?;
        self.check_frame(l)?;
        let dirs = make_direction_grid(self.height, self.width)?;
        let (w, h) = (self.width, self.height);
        let at = |r: usize, c: usize| dirs.as_slice()[r * w + c];
        let pixels = Grid::from_fn(w, h, |r, c| self.color_along(&at(r, c), l));
        let depth = Grid::from_fn(w, h, |r, c| self.depth_along(&at(r, c), l) as f32);
        let flow = Grid::from_fn(w, h, |r, c| self.flow_at(&at(r, c), r, c, l));
        let object = Grid::from_fn(w, h, |r, c| self.in_object(&at(r, c), l));
        Ok(OracleFrame {
            frame: EquirectFrame::new(l, pixels)?,
            depth: PanoDepth { frame: l, values: depth },
            flow,
            object,
        })
    }

    /// Exact per-pixel depth of `cam` at frame `l`.
    pub fn view_depth(&self, cam: &PerspectiveCamera, view: usize, l: usize) -> Result<PerspectiveDepth> {
        self.check_frame(l)?;
        let rays = camera_ray_grid(cam);
        let values = Grid::from_vec(
            cam.width,
            cam.height,
            rays.as_slice().iter().map(|d| self.depth_along(d, l) as f32).collect(),
        )?;
        PerspectiveDepth::new(view, l, values)
    }

    pub fn view_depths(&self, rig: &[PerspectiveCamera], l: usize) -> Result<Vec<PerspectiveDepth>> {
        rig.iter().enumerate().map(|(i, c)| self.view_depth(c, i, l)).collect()
    }
}

/// Affine distortion applied to clean per-view depths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthPerturbation {
    pub scale_min: f64,
    pub scale_max: f64,
    pub shift_min: f64,
    pub shift_max: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DepthPerturbation {
    fn default() -> Self {
        DepthPerturbation {
            scale_min: 0.5,
            scale_max: 2.0,
            shift_min: -0.5,
            shift_max: 0.5,
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

impl DepthPerturbation {
    pub fn none() -> Self {
        DepthPerturbation {
            scale_min: 1.0,
            scale_max: 1.0,
            shift_min: 0.0,
            shift_max: 0.0,
            ..Default::default()
        }
    }
}

pub const CLAMP_EPS: f32 = 1e-4;

#[derive(Debug, Clone)]
pub struct PerturbedViews {
    pub depths: Vec<PerspectiveDepth>,
    /// `(scale, shift)` applied to each view.
    pub affines: Vec<(f64, f64)>,
    /// Values raised to the clamp floor.
    pub clamped: usize,
}

/// Apply `s_n d + b_n + noise` per view. Draws depend only on the seed and the frame
/// index of the first depth, not on the order of calls.
pub fn perturb_depths(clean: &[PerspectiveDepth], pert: &DepthPerturbation) -> Result<PerturbedViews> {
    let frame = clean.first().map_or(0, |d| d.frame as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(pert.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ frame);
    let noise = Normal::new(0.0, pert.noise_sigma.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    let mut clamped = 0;
    let mut depths = Vec::with_capacity(clean.len());
    let mut affines = Vec::with_capacity(clean.len());
    for d in clean {
        let s = if pert.scale_max > pert.scale_min {
            rng.random_range(pert.scale_min..=pert.scale_max)
        } else {
            pert.scale_min
        };
        let b = if pert.shift_max > pert.shift_min {
            rng.random_range(pert.shift_min..=pert.shift_max)
        } else {
            pert.shift_min
        };
        let values = d.values.map(|v| {
            let mut x = s * v as f64 + b;
            if pert.noise_sigma > 0.0 {
                x += noise.sample(&mut rng);
            }
            x as f32
        });
        let values = values.map(|v| if v < CLAMP_EPS { CLAMP_EPS } else { v });
        clamped += d
            .values
            .as_slice()
            .iter()
            .zip(values.as_slice())
            .filter(|(_, &v)| v == CLAMP_EPS)
            .count();
        depths.push(PerspectiveDepth::new(d.view, d.frame, values)?);
        affines.push((s, b));
    }
    Ok(PerturbedViews {
        depths,
        affines,
        clamped,
    })
}

/// Project panoramic depth into each rig camera, then perturb.
pub fn perturb_views(gt: &PanoDepth, rig: &[PerspectiveCamera], pert: &DepthPerturbation) -> Result<PerturbedViews> {
    let clean = rig
        .iter()
        .enumerate()
        .map(|(i, cam)| PerspectiveDepth::new(i, gt.frame, project(&gt.values, cam).pixels))
        .collect::<Result<Vec<_>>>()?;
    perturb_depths(&clean, pert)
}

fn hash3(x: i64, y: i64, z: i64, seed: u64) -> f64 {
    let mut h = seed ^ 0x2545_f491_4f6c_dd1d;
    for v in [x, y, z] {
        h ^= v as u64;
        h = h.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        h ^= h >> 29;
    }
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 32;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Trilinear value noise with smoothstep interpolation, in [0, 1].
pub fn value_noise(p: &Vec3, seed: u64) -> f64 {
    let base = p.map(f64::floor);
    let f = p - base;
    let s = f.map(|t| t * t * (3.0 - 2.0 * t));
    let (x0, y0, z0) = (base.x as i64, base.y as i64, base.z as i64);
    let mut acc = 0.0;
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let w = (if dx == 1 { s.x } else { 1.0 - s.x })
                    * (if dy == 1 { s.y } else { 1.0 - s.y })
                    * (if dz == 1 { s.z } else { 1.0 - s.z });
                acc += w * hash3(x0 + dx, y0 + dy, z0 + dz, seed);
            }
        }
    }
    acc
}

fn fbm(p: &Vec3, seed: u64) -> f64 {
    0.55 * value_noise(p, seed) + 0.3 * value_noise(&(p * 2.0), seed ^ 1) + 0.15 * value_noise(&(p * 4.0), seed ^ 2)
}

fn noise_rgb(p: &Vec3, seed: u64) -> [f32; 3] {
    [
        fbm(p, seed) as f32,
        fbm(p, seed.wrapping_add(0x51)) as f32,
        fbm(p, seed.wrapping_add(0xa2)) as f32,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::icosahedron_rig;

    #[test]
    fn static_scene_has_zero_flow_and_fixed_depth() {
        let s = OracleScene::new(16, 32, 3, 7);
        let a = s.render(1).unwrap();
        let b = s.render(3).unwrap();
        assert!(a.flow.as_slice().iter().all(|f| *f == [0.0, 0.0]));
        assert_eq!(a.depth.values, b.depth.values);
        assert_eq!(a.frame.pixels(), b.frame.pixels());
    }

    #[test]
    fn radius_range_and_pole_continuity() {
        let s = OracleScene::new(16, 32, 1, 0);
        let top = s.background_radius(&Vec3::y());
        assert!((top - 3.0).abs() < 1e-12);
        let r = s.render(1).unwrap();
        let (lo, hi) = r
            .depth
            .values
            .as_slice()
            .iter()
            .fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        assert!(lo >= 2.1 - 1e-6 && hi <= 3.9 + 1e-6, "{lo} {hi}");
    }

    #[test]
    fn stationary_object_has_zero_flow() {
        let mut s = OracleScene::moving_disk(32, 64, 3, 1);
        s.object.as_mut().unwrap().speed_deg = 0.0;
        let f = s.render(1).unwrap();
        assert!(f.object.any());
        assert!(f.flow.as_slice().iter().all(|v| v[0].abs() < 1e-9 && v[1].abs() < 1e-9));
        // object is nearer than the background
        let idx = f.object.indices()[0];
        assert!(f.depth.values.as_slice()[idx] < 2.0);
    }

    #[test]
    fn equator_motion_is_horizontal() {
        let s = OracleScene::moving_disk(64, 128, 4, 1);
        let f = s.render(1).unwrap();
        let expect = 3.0 / 360.0 * 128.0;
        for i in f.object.indices() {
            let r = i / 128;
            // rows near the equator move almost purely in longitude
            if (r as i64 - 32).abs() <= 2 {
                let [u, v] = f.flow.as_slice()[i];
                assert!((u as f64 - expect).abs() < 0.05, "{u}");
                assert!(v.abs() < 0.05);
            }
        }
        let last = s.render(4).unwrap();
        assert!(last.flow.as_slice().iter().all(|v| *v == [0.0, 0.0]));
    }

    #[test]
    fn seed_determinism() {
        let s = OracleScene::moving_disk(16, 32, 2, 5);
        assert_eq!(s.render(2).unwrap().frame, s.render(2).unwrap().frame);
        let t = OracleScene::moving_disk(16, 32, 2, 6);
        assert_ne!(s.render(2).unwrap().frame, t.render(2).unwrap().frame);
    }

    #[test]
    fn unperturbed_views_equal_clean_depth() {
        let s = OracleScene::new(16, 32, 1, 2);
        let rig = icosahedron_rig(90.0, 8, 8).unwrap();
        let clean = s.view_depths(&rig, 1).unwrap();
        let out = perturb_depths(&clean, &DepthPerturbation::none()).unwrap();
        for (a, b) in clean.iter().zip(&out.depths) {
            assert_eq!(a.values, b.values);
        }
        assert_eq!(out.clamped, 0);
    }

    #[test]
    fn recorded_affines_recover_by_least_squares() {
        let s = OracleScene::new(16, 32, 1, 2);
        let rig = icosahedron_rig(90.0, 8, 8).unwrap();
        let clean = s.view_depths(&rig, 1).unwrap();
        let out = perturb_depths(&clean, &DepthPerturbation { seed: 4, ..Default::default() }).unwrap();
        for ((c, p), &(s, b)) in clean.iter().zip(&out.depths).zip(&out.affines) {
            assert!((0.5..=2.0).contains(&s) && (-0.5..=0.5).contains(&b));
            let xs: Vec<f64> = c.values.as_slice().iter().map(|&v| v as f64).collect();
            let ys: Vec<f64> = p.values.as_slice().iter().map(|&v| v as f64).collect();
            let n = xs.len() as f64;
            let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
            let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
            let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
            let fit_s = sxy / sxx;
            let fit_b = my - fit_s * mx;
            // f32 storage bounds the recovery precision
            assert!((fit_s - s).abs() < 1e-5 && (fit_b - b).abs() < 1e-5, "{fit_s} {s} {fit_b} {b}");
        }
    }

    #[test]
    fn noise_has_requested_spread() {
        let s = OracleScene::new(16, 32, 1, 2);
        let rig = icosahedron_rig(90.0, 32, 32).unwrap();
        let clean = s.view_depths(&rig, 1).unwrap();
        let pert = DepthPerturbation { noise_sigma: 0.05, seed: 6, ..Default::default() };
        let out = perturb_depths(&clean, &pert).unwrap();
        let mut resid = Vec::new();
        for ((c, p), &(s, b)) in clean.iter().zip(&out.depths).zip(&out.affines) {
            for (&x, &y) in c.values.as_slice().iter().zip(p.values.as_slice()) {
                resid.push(y as f64 - (s * x as f64 + b));
            }
        }
        let n = resid.len() as f64;
        let mean = resid.iter().sum::<f64>() / n;
        let sd = (resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 2e-3 && (sd - 0.05).abs() < 2e-3, "{mean} {sd}");
    }

    #[test]
    fn negative_values_are_clamped_and_counted() {
        let d = PerspectiveDepth::new(0, 1, Grid::new(2, 2, 0.1)).unwrap();
        let pert = DepthPerturbation {
            scale_min: 1.0,
            scale_max: 1.0,
            shift_min: -0.5,
            shift_max: -0.5,
            ..Default::default()
        };
        let out = perturb_depths(&[d], &pert).unwrap();
        assert_eq!(out.clamped, 4);
        assert!(out.depths[0].values.as_slice().iter().all(|&v| v == CLAMP_EPS));
    }

    #[test]
    fn value_noise_is_continuous_and_bounded() {
        let p = Vec3::new(0.3, 1.7, -2.2);
        let a = value_noise(&p, 1);
        let b = value_noise(&(p + Vec3::new(1e-6, 0.0, 0.0)), 1);
        assert!((a - b).abs() < 1e-4);
        for i in 0..200 {
            let q = Vec3::new(i as f64 * 0.37, -(i as f64) * 0.11, i as f64 * 0.05);
            let v = value_noise(&q, 9);
            assert!((0.0..=1.0).contains(&v));
        }
    }
}
