//! Icosahedron view rig and the plain-text rig manifest.
//!
//! Manifest records are whitespace separated, one camera per line:
//! `name yaw pitch roll fov width height x y z` (degrees, pixels, scene units).
//! Blank lines and lines starting with `#` are ignored.

use std::fmt::Write as _;
use std::path::Path;

use super::{PerspectiveCamera, Vec3};
use crate::error::{Error, Result};

/// Smallest fov (degrees) whose inscribed cone around each face center still reaches the
/// icosahedron vertices, i.e. twice the face-center-to-vertex angle.
pub const ICOSAHEDRON_MIN_FOV_DEG: f64 = 74.75473628129939;

/// Axes whose angle to world up is below this use world Z as the up reference.
const POLE_TOLERANCE_DEG: f64 = 0.5;

/// Unit face-center directions of a regular icosahedron, in a fixed order.
pub fn icosahedron_axes() -> Vec<Vec3> {
    let g = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts = Vec::with_capacity(12);
    for s1 in [-1.0, 1.0] {
        for s2 in [-1.0, 1.0] {
            verts.push(Vec3::new(0.0, s1, s2 * g));
            verts.push(Vec3::new(s1, s2 * g, 0.0));
            verts.push(Vec3::new(s2 * g, 0.0, s1));
        }
    }
    // edges have length 2; faces are the triangles of mutually adjacent vertices
    let adjacent = |a: &Vec3, b: &Vec3| ((a - b).norm() - 2.0).abs() < 1e-9;
    let mut axes = Vec::with_capacity(20);
    for i in 0..12 {
        for j in i + 1..12 {
            if !adjacent(&verts[i], &verts[j]) {
                continue;
            }
            for k in j + 1..12 {
                if adjacent(&verts[i], &verts[k]) && adjacent(&verts[j], &verts[k]) {
                    axes.push((verts[i] + verts[j] + verts[k]).normalize());
                }
            }
        }
    }
    debug_assert_eq!(axes.len(), 20);
    axes
}

/// Twenty outward cameras on the icosahedron face centers, named `ico_00`..`ico_19`.
pub fn icosahedron_rig(fov: f64, width: usize, height: usize) -> Result<Vec<PerspectiveCamera>> {
    if fov < ICOSAHEDRON_MIN_FOV_DEG {
        log::warn!(
            "icosahedron rig fov {fov:.2} deg is below {ICOSAHEDRON_MIN_FOV_DEG:.2} deg; the sphere may not be fully covered"
        );
    }
    icosahedron_axes()
        .into_iter()
        .enumerate()
        .map(|(i, axis)| {
            let up = if axis.y.abs() >= POLE_TOLERANCE_DEG.to_radians().cos() {
                Vec3::z()
            } else {
                Vec3::y()
            };
            PerspectiveCamera::looking_along(format!("ico_{i:02}"), axis, up, fov, width, height)
        })
        .collect()
}

pub fn rig_manifest(cameras: &[PerspectiveCamera]) -> String {
    let mut out = String::from("# name yaw pitch roll fov width height x y z\n");
    for c in cameras {
        writeln!(
            out,
            "{} {} {} {} {} {} {} {} {} {}",
            c.name, c.yaw, c.pitch, c.roll, c.fov, c.width, c.height, c.position.x, c.position.y, c.position.z
        )
        .expect("writing to a String cannot fail");
    }
    out
}

pub fn parse_rig_manifest(text: &str) -> Result<Vec<PerspectiveCamera>> {
    let mut cams = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let at = offset;
        offset += line.len() as u64;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 10 {
            return Err(Error::format(
                at,
                format!("rig record needs 10 fields, found {}", fields.len()),
            ));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .parse::<f64>()
                .map_err(|_| Error::format(at, format!("bad number {:?}", fields[i])))
        };
        let int = |i: usize| -> Result<usize> {
            fields[i]
                .parse::<usize>()
                .map_err(|_| Error::format(at, format!("bad size {:?}", fields[i])))
        };
        let cam = PerspectiveCamera::new(fields[0], num(1)?, num(2)?, num(3)?, num(4)?, int(5)?, int(6)?)?
            .with_position(Vec3::new(num(7)?, num(8)?, num(9)?));
        cam.validate()?;
        cams.push(cam);
    }
    Ok(cams)
}

pub fn write_rig_manifest(path: &Path, cameras: &[PerspectiveCamera]) -> Result<()> {
    std::fs::write(path, rig_manifest(cameras))?;
    Ok(())
}

pub fn read_rig_manifest(path: &Path) -> Result<Vec<PerspectiveCamera>> {
    parse_rig_manifest(&std::fs::read_to_string(path)?)
}
