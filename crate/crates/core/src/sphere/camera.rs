use nalgebra::{Rotation3, Vector3};

use super::Vec3;
use crate::error::{Error, Result};

/// Pinhole camera looking out from `position`.
///
/// Orientation is yaw about world Y, then pitch about the camera X axis (positive looks
/// up), then roll about the camera Z axis. `fov` is horizontal; pixels are square.
#[derive(Debug, Clone, PartialEq)]
pub struct PerspectiveCamera {
    pub name: String,
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    pub fov: f64,
    pub width: usize,
    pub height: usize,
    pub position: Vec3,
}

impl PerspectiveCamera {
    pub fn new(
        name: impl Into<String>,
        yaw: f64,
        pitch: f64,
        roll: f64,
        fov: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let cam = PerspectiveCamera {
            name: name.into(),
            yaw,
            pitch,
            roll,
            fov,
            width,
            height,
            position: Vec3::zeros(),
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fov > 0.0 && self.fov < 180.0) {
            return Err(Error::invalid(format!(
                "camera {:?}: fov {} outside (0, 180)",
                self.name, self.fov
            )));
        }
        if self.width < 2 || self.height < 2 {
            return Err(Error::invalid(format!(
                "camera {:?}: image {}x{} smaller than 2x2",
                self.name, self.width, self.height
            )));
        }
        if ![self.yaw, self.pitch, self.roll].iter().all(|a| a.is_finite())
            || !self.position.iter().all(|p| p.is_finite())
        {
            return Err(Error::invalid(format!("camera {:?}: non-finite pose", self.name)));
        }
        Ok(())
    }

    pub fn with_position(mut self, position: Vec3) -> Self {
        self.position = position;
        self
    }

    /// Camera with its optical axis along `axis` and its image up vector along the
    /// component of `up` orthogonal to `axis`.
    pub fn looking_along(
        name: impl Into<String>,
        axis: Vec3,
        up: Vec3,
        fov: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let a = axis.normalize();
        let yaw = if a.x == 0.0 && a.z == 0.0 { 0.0 } else { a.x.atan2(a.z) };
        let pitch = a.y.clamp(-1.0, 1.0).asin();
        let base = Rotation3::from_axis_angle(&Vector3::y_axis(), yaw)
            * Rotation3::from_axis_angle(&Vector3::x_axis(), -pitch);
        let up0 = base * Vec3::y();
        let target = (up - a * up.dot(&a)).normalize();
        // roll about the optical axis that carries up0 onto target
        let roll = up0.cross(&target).dot(&a).atan2(up0.dot(&target));
        PerspectiveCamera::new(
            name,
            yaw.to_degrees(),
            pitch.to_degrees(),
            roll.to_degrees(),
            fov,
            width,
            height,
        )
    }

    /// Camera-to-world rotation.
    pub fn rotation(&self) -> Rotation3<f64> {
        Rotation3::from_axis_angle(&Vector3::y_axis(), self.yaw.to_radians())
            * Rotation3::from_axis_angle(&Vector3::x_axis(), -self.pitch.to_radians())
            * Rotation3::from_axis_angle(&Vector3::z_axis(), self.roll.to_radians())
    }

    pub fn axis(&self) -> Vec3 {
        self.rotation() * Vec3::z()
    }

    pub fn up(&self) -> Vec3 {
        self.rotation() * Vec3::y()
    }

    /// Focal length in pixels.
    pub fn focal(&self) -> f64 {
        0.5 * self.width as f64 / (0.5 * self.fov.to_radians()).tan()
    }

    /// Unnormalized camera-frame ray through the center of pixel (`row`, `col`), `z = 1`.
    pub fn pixel_ray_local(&self, row: f64, col: f64) -> Vec3 {
        let f = self.focal();
        Vec3::new(
            (col + 0.5 - 0.5 * self.width as f64) / f,
            -(row + 0.5 - 0.5 * self.height as f64) / f,
            1.0,
        )
    }

    /// Continuous pixel coordinates `(col, row)` of a camera-frame point, if in front.
    pub fn local_to_pixel(&self, p: &Vec3) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        let f = self.focal();
        Some((
            f * p.x / p.z + 0.5 * self.width as f64 - 0.5,
            -f * p.y / p.z + 0.5 * self.height as f64 - 0.5,
        ))
    }

    pub fn world_to_local(&self, p: &Vec3) -> Vec3 {
        self.rotation().inverse() * (p - self.position)
    }

    /// Whether a direction seen from the camera center falls inside the image rectangle.
    pub fn contains_direction(&self, dir: &Vec3) -> bool {
        let c = self.rotation().inverse() * dir;
        if c.z <= 0.0 {
            return false;
        }
        let f = self.focal();
        (c.x / c.z).abs() * f <= 0.5 * self.width as f64
            && (c.y / c.z).abs() * f <= 0.5 * self.height as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn validation() {
        assert!(PerspectiveCamera::new("a", 0.0, 0.0, 0.0, 180.0, 8, 8).is_err());
        assert!(PerspectiveCamera::new("a", 0.0, 0.0, 0.0, 0.0, 8, 8).is_err());
        assert!(PerspectiveCamera::new("a", 0.0, 0.0, 0.0, 60.0, 1, 8).is_err());
        assert!(PerspectiveCamera::new("a", 0.0, 0.0, 0.0, 60.0, 2, 2).is_ok());
    }

    #[test]
    fn pose_conventions() {
        let c = PerspectiveCamera::new("a", 90.0, 0.0, 0.0, 90.0, 8, 8).unwrap();
        assert_relative_eq!(c.axis(), Vec3::x(), epsilon = 1e-12);
        let c = PerspectiveCamera::new("a", 0.0, 30.0, 0.0, 90.0, 8, 8).unwrap();
        assert!(c.axis().y > 0.49 && c.up().z < 0.0);
    }

    #[test]
    fn looking_along_matches_axis_and_up() {
        let axes = [
            Vec3::new(0.3, 0.5, -0.8),
            Vec3::new(-1.0, 0.0, 0.0),
            Vec3::new(0.0, 0.0, -1.0),
            Vec3::new(0.0, -0.9, 0.1),
        ];
        for axis in axes {
            for up in [Vec3::y(), Vec3::z()] {
                let a = axis.normalize();
                if a.cross(&up).norm() < 1e-3 {
                    continue;
                }
                let cam = PerspectiveCamera::looking_along("x", a, up, 60.0, 4, 4).unwrap();
                assert_relative_eq!(cam.axis(), a, epsilon = 1e-9);
                let want = (up - a * up.dot(&a)).normalize();
                assert_relative_eq!(cam.up(), want, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn pixel_roundtrip() {
        let cam = PerspectiveCamera::new("a", 10.0, -20.0, 5.0, 70.0, 9, 6).unwrap();
        let p = cam.pixel_ray_local(2.0, 7.0) * 3.0;
        let (c, r) = cam.local_to_pixel(&p).unwrap();
        assert_relative_eq!(c, 7.0, epsilon = 1e-9);
        assert_relative_eq!(r, 2.0, epsilon = 1e-9);
    }
}
