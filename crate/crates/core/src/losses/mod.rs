//! Objectives other than score distillation. Each loss comes as a value-only
//! function on plain buffers plus a variant that also accumulates its
//! gradient into a [`RenderGrad`].

mod components;
mod depth;
mod normal;
mod reconstruction;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::render::Camera;

pub use components::{
    label_components, opacity_regularization, opacity_regularization_with_grad, Components,
    DEFAULT_OPACITY_THRESHOLD,
};
pub use depth::{depth_pearson_loss, depth_pearson_loss_with_grad, pearson_loss};
pub use normal::{
    blur_normals, gaussian_kernel, normal_smoothness, normal_smoothness_loss,
    normal_smoothness_loss_with_grad, BLUR_SIGMA, BLUR_SIZE,
};
pub use reconstruction::{reconstruction_loss, reconstruction_loss_with_grad};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("render is {got:?} pixels but reference is {expected:?}")]
    ResolutionMismatch { expected: (usize, usize), got: (usize, usize) },
    #[error("invalid reference: {0}")]
    InvalidReference(String),
    #[error("invalid loss weight {name} = {value}")]
    InvalidWeight { name: &'static str, value: f64 },
}

/// The single input view: image, foreground mask, relative depth and pose.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceBundle {
    pub image: Vec<f64>,
    pub mask: Vec<bool>,
    pub depth: Vec<f64>,
    pub camera: Camera,
}

impl ReferenceBundle {
    pub fn new(image: Vec<f64>, mask: Vec<bool>, depth: Vec<f64>, camera: Camera) -> Result<Self, LossError> {
        let n = camera.width * camera.height;
        if image.len() != n * 3 || mask.len() != n || depth.len() != n {
            return Err(LossError::InvalidReference(format!(
                "buffers ({}, {}, {}) do not match a {}x{} camera",
                image.len(),
                mask.len(),
                depth.len(),
                camera.width,
                camera.height
            )));
        }
        if !mask.iter().any(|m| *m) {
            return Err(LossError::InvalidReference("mask has no foreground pixel".into()));
        }
        if !image.iter().chain(&depth).all(|v| v.is_finite()) {
            return Err(LossError::InvalidReference("non-finite image or depth".into()));
        }
        Ok(Self {
            image,
            mask,
            depth,
            camera,
        })
    }

    pub fn width(&self) -> usize {
        self.camera.width
    }

    pub fn height(&self) -> usize {
        self.camera.height
    }

    pub fn pixel_count(&self) -> usize {
        self.mask.len()
    }

    pub(crate) fn check_resolution(&self, width: usize, height: usize) -> Result<(), LossError> {
        if (width, height) != (self.width(), self.height()) {
            return Err(LossError::ResolutionMismatch {
                expected: (self.width(), self.height()),
                got: (width, height),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_rgb: f64,
    pub lambda_mask: f64,
    pub lambda_depth: f64,
    pub lambda_normal: f64,
    pub lambda_reg: f64,
    pub lambda_sds: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_rgb: 5.0,
            lambda_mask: 1.0,
            lambda_depth: 0.5,
            lambda_normal: 0.1,
            lambda_reg: 0.1,
            lambda_sds: 1.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            lambda_rgb: 0.0,
            lambda_mask: 0.0,
            lambda_depth: 0.0,
            lambda_normal: 0.0,
            lambda_reg: 0.0,
            lambda_sds: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let named = [
            ("lambda_rgb", self.lambda_rgb),
            ("lambda_mask", self.lambda_mask),
            ("lambda_depth", self.lambda_depth),
            ("lambda_normal", self.lambda_normal),
            ("lambda_reg", self.lambda_reg),
            ("lambda_sds", self.lambda_sds),
        ];
        for (name, value) in named {
            if !value.is_finite() || value < 0.0 {
                return Err(LossError::InvalidWeight { name, value });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use crate::render::{Camera, RenderOutput, SphericalPose};

    pub fn camera(width: usize, height: usize) -> Camera {
        Camera::new(SphericalPose::new(2.0, 1.5, 0.3), 0.7, width, height, 0.5, 3.5).unwrap()
    }

    /// A render with the given per-pixel buffers and no sample data.
    pub fn render(width: usize, height: usize, color: Vec<f64>, opacity: Vec<f64>, depth: Vec<f64>) -> RenderOutput {
        let n = width * height;
        RenderOutput {
            width,
            height,
            samples_per_ray: 0,
            color,
            depth,
            opacity,
            weights: Vec::new(),
            normals: vec![0.0; n * 3],
        }
    }
}
