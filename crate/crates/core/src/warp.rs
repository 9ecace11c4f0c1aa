//! Training camera rig and depth-based view warping.

use crate::frame::{PanoDepth, PerspectiveDepth};
use crate::error::Result;
use crate::grid::{Grid, Rgb};
use crate::sphere::{icosahedron_rig, project, PerspectiveCamera, PerspectiveImage, Vec3};

/// Field of view of the 38 ring cameras. The exhaustive coverage test in this
/// module pins it as sufficient.
pub const RING_FOV_DEG: f64 = 45.0;
/// Field of view of the 20 icosahedron cameras.
pub const ICOSAHEDRON_FOV_DEG: f64 = 75.0;
/// Ring latitudes in degrees; each ring carries 12 yaws 30 degrees apart.
pub const RING_PITCHES_DEG: [f64; 3] = [45.0, 0.0, -45.0];
/// Camera-center offset of the supplementary views, in scene units.
pub const SUPPLEMENT_OFFSET: f64 = 0.1;

/// 2 polar cameras plus three rings of 12, all at [`RING_FOV_DEG`].
pub fn ring_rig(width: usize, height: usize) -> Result<Vec<PerspectiveCamera>> {
    let mut cams = vec![
        PerspectiveCamera::new("pole_up", 0.0, 90.0, 0.0, RING_FOV_DEG, width, height)?,
        PerspectiveCamera::new("pole_down", 0.0, -90.0, 0.0, RING_FOV_DEG, width, height)?,
    ];
    for pitch in RING_PITCHES_DEG {
        for k in 0..12 {
            let yaw = -180.0 + 30.0 * k as f64;
            let name = format!("ring{:+03}_{:03}", pitch as i32, k * 30);
            cams.push(PerspectiveCamera::new(name, yaw, pitch, 0.0, RING_FOV_DEG, width, height)?);
        }
    }
    Ok(cams)
}

/// The 58-camera supervision rig: [`ring_rig`] followed by the 75 degree icosahedron rig.
pub fn build_training_rig(width: usize, height: usize) -> Result<Vec<PerspectiveCamera>> {
    let mut cams = ring_rig(width, height)?;
    cams.extend(icosahedron_rig(ICOSAHEDRON_FOV_DEG, width, height)?);
    Ok(cams)
}

/// Ray-length depth of `cam` sampled bilinearly from panoramic depth.
pub fn project_pano_depth(depth: &PanoDepth, cam: &PerspectiveCamera, view: usize) -> Result<PerspectiveDepth> {
    PerspectiveDepth::new(view, depth.frame, project(&depth.values, cam).pixels)
}

/// A view rendered from a translated camera center.
#[derive(Debug, Clone)]
pub struct WarpedView {
    pub image: PerspectiveImage<Rgb>,
    /// Ray-length depth from the translated center; zero where invalid.
    pub depth: Grid<f32>,
}

/// Forward-warp `image` with ray-length `depth` into the same camera moved by `offset`
/// (camera frame: x right, y up, z forward). Nearest-pixel splat with a z-buffer;
/// pixels nothing lands on are invalid.
pub fn warp_view(image: &PerspectiveImage<Rgb>, depth: &Grid<f32>, cam: &PerspectiveCamera, offset: Vec3) -> WarpedView {
    let (w, h) = (cam.width, cam.height);
    let mut pixels = Grid::new(w, h, [0.0f32; 3]);
    let mut valid = Grid::new(w, h, false);
    let mut zbuf = Grid::new(w, h, f64::INFINITY);
    let mut out_depth = Grid::new(w, h, 0.0f32);
    for r in 0..h {
        for c in 0..w {
            let d = depth.get(r, c);
            if !image.valid.get(r, c) || !(d.is_finite() && d > 0.0) {
                continue;
            }
            let p = cam.pixel_ray_local(r as f64, c as f64).normalize() * d as f64 - offset;
            let Some((u, v)) = cam.local_to_pixel(&p) else {
                continue;
            };
            let (cc, rr) = (u.round(), v.round());
            if cc < 0.0 || rr < 0.0 || cc >= w as f64 || rr >= h as f64 {
                continue;
            }
            let (rr, cc) = (rr as usize, cc as usize);
            if p.z < zbuf.get(rr, cc) {
                zbuf.set(rr, cc, p.z);
                pixels.set(rr, cc, image.pixels.get(r, c));
                valid.set(rr, cc, true);
                out_depth.set(rr, cc, p.norm() as f32);
            }
        }
    }
    WarpedView {
        image: PerspectiveImage { pixels, valid },
        depth: out_depth,
    }
}

/// Labels and camera-frame offsets of the four supplementary views.
pub fn supplement_offsets() -> [(char, Vec3); 4] {
    let s = SUPPLEMENT_OFFSET;
    [
        ('u', Vec3::new(0.0, s, 0.0)),
        ('d', Vec3::new(0.0, -s, 0.0)),
        ('l', Vec3::new(-s, 0.0, 0.0)),
        ('r', Vec3::new(s, 0.0, 0.0)),
    ]
}

/// `cam` moved by a camera-frame `offset`, renamed with `suffix`.
pub fn offset_camera(cam: &PerspectiveCamera, offset: Vec3, suffix: char) -> PerspectiveCamera {
    let mut moved = cam.clone().with_position(cam.position + cam.rotation() * offset);
    moved.name = format!("{}_{suffix}", cam.name);
    moved
}

/// The four supplementary views of one camera, in `u, d, l, r` order.
pub fn supplementary_views(
    image: &PerspectiveImage<Rgb>,
    depth: &Grid<f32>,
    cam: &PerspectiveCamera,
) -> Vec<(char, PerspectiveCamera, WarpedView)> {
    supplement_offsets()
        .into_iter()
        .map(|(label, off)| (label, offset_camera(cam, off, label), warp_view(image, depth, cam, off)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::{camera_ray_grid, make_direction_grid, rig_manifest};

    #[test]
    fn rig_has_58_cameras_at_origin() {
        let rig = build_training_rig(32, 32).unwrap();
        assert_eq!(rig.len(), 58);
        assert_eq!(rig.iter().filter(|c| c.fov == RING_FOV_DEG).count(), 38);
        assert_eq!(rig.iter().filter(|c| c.fov == ICOSAHEDRON_FOV_DEG).count(), 20);
        assert!(rig.iter().all(|c| c.position == Vec3::zeros()));
        let names: std::collections::HashSet<_> = rig.iter().map(|c| c.name.clone()).collect();
        assert_eq!(names.len(), 58);
        assert_eq!(rig_manifest(&rig), rig_manifest(&build_training_rig(32, 32).unwrap()));
    }

    #[test]
    fn ring_rig_covers_sphere() {
        let rig = ring_rig(16, 16).unwrap();
        let dirs = make_direction_grid(256, 512).unwrap();
        let missing = dirs
            .as_slice()
            .iter()
            .filter(|d| !rig.iter().any(|c| c.contains_direction(d)))
            .count();
        assert_eq!(missing, 0);
    }

    #[test]
    fn constant_pano_depth_projects_constant() {
        let d = PanoDepth { frame: 1, values: Grid::new(64, 32, 2.5) };
        let cam = PerspectiveCamera::new("c", 10.0, 20.0, 5.0, 60.0, 16, 16).unwrap();
        let p = project_pano_depth(&d, &cam, 0).unwrap();
        assert!(p.values.as_slice().iter().all(|&v| (v - 2.5).abs() < 1e-6));
    }

    #[test]
    fn zero_offset_is_identity() {
        let cam = PerspectiveCamera::new("c", 0.0, 0.0, 0.0, 60.0, 24, 16).unwrap();
        let img = PerspectiveImage::all_valid(Grid::from_fn(24, 16, |r, c| [r as f32 / 16.0, c as f32 / 24.0, 0.5]));
        let depth = Grid::from_fn(24, 16, |r, c| 1.0 + 0.05 * (r + c) as f32);
        let out = warp_view(&img, &depth, &cam, Vec3::zeros());
        assert_eq!(out.image, img);
        for (a, b) in out.depth.as_slice().iter().zip(depth.as_slice()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn plane_parallax_matches_pinhole_shift() {
        let (w, h) = (96, 64);
        let cam = PerspectiveCamera::new("c", 0.0, 0.0, 0.0, 60.0, w, h).unwrap();
        let plane = 2.0;
        // z = plane for every pixel, so the ray length is plane * |ray|
        let depth = Grid::from_fn(w, h, |r, c| (plane * cam.pixel_ray_local(r as f64, c as f64).norm()) as f32);
        let img = PerspectiveImage::all_valid(Grid::from_fn(w, h, |_, c| [c as f32 / w as f32, 0.0, 0.0]));
        let out = warp_view(&img, &depth, &cam, Vec3::new(SUPPLEMENT_OFFSET, 0.0, 0.0));
        let expected = cam.focal() * SUPPLEMENT_OFFSET / plane;
        let row = h / 2;
        let mut shifts = Vec::new();
        for c in 0..w {
            if out.image.valid.get(row, c) {
                let src = out.image.pixels.get(row, c)[0] * w as f32;
                shifts.push(src as f64 - c as f64);
            }
        }
        let mean = shifts.iter().sum::<f64>() / shifts.len() as f64;
        assert!((mean - expected).abs() <= 0.5, "{mean} vs {expected}");
    }

    #[test]
    fn four_supplements_with_unit_offsets() {
        let cam = PerspectiveCamera::new("c", 30.0, 0.0, 0.0, 60.0, 8, 8).unwrap();
        let img = PerspectiveImage::all_valid(Grid::new(8, 8, [0.5; 3]));
        let views = supplementary_views(&img, &Grid::new(8, 8, 2.0), &cam);
        assert_eq!(views.iter().map(|v| v.0).collect::<String>(), "udlr");
        for (label, moved, _) in &views {
            assert!((moved.position.norm() - SUPPLEMENT_OFFSET).abs() < 1e-12);
            assert!(moved.name.ends_with(*label));
        }
        // right moves along the camera's right vector
        let right = cam.rotation() * Vec3::x();
        assert!((views[3].1.position - right * SUPPLEMENT_OFFSET).norm() < 1e-12);
    }

    #[test]
    fn larger_offsets_never_validate_more() {
        let cam = PerspectiveCamera::new("c", 0.0, 0.0, 0.0, 70.0, 48, 48).unwrap();
        let rays = camera_ray_grid(&cam);
        let depth = Grid::from_fn(48, 48, |r, c| {
            let d = rays.get(r, c);
            if d.x.abs() < 0.1 { 1.0 } else { 3.0 }
        });
        let img = PerspectiveImage::all_valid(Grid::new(48, 48, [0.3; 3]));
        let small = warp_view(&img, &depth, &cam, Vec3::new(0.1, 0.0, 0.0));
        let large = warp_view(&img, &depth, &cam, Vec3::new(0.2, 0.0, 0.0));
        assert!(large.image.valid_fraction() <= small.image.valid_fraction());
        assert!(small.image.valid_fraction() < 1.0);
    }
}
