use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::RenderError;

/// Camera position on a sphere around the origin. Polar angle is measured
/// from the world +z axis, azimuth from +x towards +y.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SphericalPose {
    pub radius: f64,
    pub polar: f64,
    pub azimuth: f64,
}

impl SphericalPose {
    pub fn new(radius: f64, polar: f64, azimuth: f64) -> Self {
        Self {
            radius,
            polar,
            azimuth,
        }
    }

    pub fn position(&self) -> Vector3<f64> {
        let (sp, cp) = self.polar.sin_cos();
        let (sa, ca) = self.azimuth.sin_cos();
        Vector3::new(sp * ca, sp * sa, cp) * self.radius
    }

    /// Pose difference `self - reference` with azimuth wrapped into `[-π, π)`.
    pub fn relative_to(&self, reference: &SphericalPose) -> SphericalPose {
        let tau = std::f64::consts::TAU;
        let mut d_az = (self.azimuth - reference.azimuth).rem_euclid(tau);
        if d_az >= std::f64::consts::PI {
            d_az -= tau;
        }
        SphericalPose {
            radius: self.radius - reference.radius,
            polar: self.polar - reference.polar,
            azimuth: d_az,
        }
    }
}

/// Pinhole camera looking at the origin with world +z up.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub pose: SphericalPose,
    pub fov_y: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    pub direction: [f64; 3],
}

impl Ray {
    #[inline]
    pub fn at(&self, t: f64) -> [f64; 3] {
        [
            self.origin[0] + t * self.direction[0],
            self.origin[1] + t * self.direction[1],
            self.origin[2] + t * self.direction[2],
        ]
    }
}

impl Camera {
    pub fn new(
        pose: SphericalPose,
        fov_y: f64,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Result<Self, RenderError> {
        let camera = Self {
            pose,
            fov_y,
            width,
            height,
            near,
            far,
        };
        camera.validate()?;
        Ok(camera)
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        use std::f64::consts::PI;
        let p = &self.pose;
        let ok = p.radius > 0.0
            && p.polar > 0.0
            && p.polar < PI
            && p.azimuth.is_finite()
            && self.fov_y > 0.0
            && self.fov_y < PI
            && self.width > 0
            && self.height > 0
            && self.near.is_finite()
            && self.far.is_finite()
            && self.near < self.far;
        if ok {
            Ok(())
        } else {
            Err(RenderError::InvalidCamera(format!("{self:?}")))
        }
    }

    /// Square camera whose ray interval covers the ball of radius `bound`
    /// around the origin.
    pub fn orbit(pose: SphericalPose, fov_y: f64, resolution: usize, bound: f64) -> Result<Self, RenderError> {
        let near = (pose.radius - bound).max(0.05 * pose.radius);
        Self::new(pose, fov_y, resolution, resolution, near, pose.radius + bound)
    }

    pub fn with_resolution(mut self, width: usize, height: usize) -> Self {
        self.width = width;
        self.height = height;
        self
    }

    pub fn position(&self) -> Vector3<f64> {
        self.pose.position()
    }

    /// World-space (right, down, forward) axes of the camera frame.
    pub fn basis(&self) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
        let forward = -self.position().normalize();
        let right = forward.cross(&Vector3::z()).normalize();
        let down = forward.cross(&right);
        (right, down, forward)
    }

    /// Unit direction through the center of pixel `(col, row)` in the camera
    /// frame (x right, y down, z forward).
    pub fn pixel_direction_camera(&self, col: usize, row: usize) -> Vector3<f64> {
        let tan = (0.5 * self.fov_y).tan();
        let aspect = self.width as f64 / self.height as f64;
        let x = ((col as f64 + 0.5) / self.width as f64 * 2.0 - 1.0) * tan * aspect;
        let y = ((row as f64 + 0.5) / self.height as f64 * 2.0 - 1.0) * tan;
        Vector3::new(x, y, 1.0).normalize()
    }

    /// Camera-frame directions for every pixel in row-major order.
    pub fn camera_directions(&self) -> Vec<Vector3<f64>> {
        (0..self.height)
            .flat_map(|r| (0..self.width).map(move |c| (c, r)))
            .map(|(c, r)| self.pixel_direction_camera(c, r))
            .collect()
    }

    /// One ray per pixel through its center, row-major.
    pub fn generate_rays(&self) -> Vec<Ray> {
        let (right, down, forward) = self.basis();
        let origin = self.position();
        let origin = [origin.x, origin.y, origin.z];
        self.camera_directions()
            .into_iter()
            .map(|d| {
                let w = (right * d.x + down * d.y + forward * d.z).normalize();
                Ray {
                    origin,
                    direction: [w.x, w.y, w.z],
                }
            })
            .collect()
    }
}
