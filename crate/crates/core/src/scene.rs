//! Synthetic scenes with closed-form geometry, used as ground truth and as
//! targets for synthetic oracles, plus loading of file-provided inputs.

use std::f64::consts::{FRAC_PI_2, PI};
use std::path::PathBuf;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{FieldSample, VolumeField};
use crate::losses::{LossError, ReferenceBundle};
use crate::render::io::{read_depth, read_gray_png, read_rgb_png};
use crate::render::{Camera, Ray, RenderError, SphericalPose};

/// Density inside analytic solids.
pub const SOLID_DENSITY: f64 = 200.0;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("scene has no analytic ground truth")]
    NoGroundTruth,
    #[error("scene spec: {0}")]
    Invalid(String),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Reference(#[from] LossError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneKind {
    AnalyticSphere,
    AnalyticBox,
    TexturedSphere,
    FromFiles,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Texture {
    /// Uniform light gray.
    #[default]
    Solid,
    /// Smooth hue wheel around the vertical axis.
    HueBands,
    /// Four-by-four checker in longitude and latitude.
    Checker,
}

impl Texture {
    /// Albedo for a unit direction from the object center.
    pub fn albedo(&self, d: Vector3<f64>) -> [f64; 3] {
        let phi = d.y.atan2(d.x);
        let theta = d.z.clamp(-1.0, 1.0).acos();
        match self {
            Texture::Solid => [0.8, 0.8, 0.8],
            Texture::HueBands => {
                let h = |k: f64| 0.5 + 0.4 * (2.0 * phi + 2.0 * PI * k / 3.0).sin();
                let shade = 0.85 + 0.15 * (2.0 * (theta - FRAC_PI_2)).cos();
                [h(0.0) * shade, h(1.0) * shade, h(2.0) * shade]
            }
            Texture::Checker => {
                let a = ((phi + PI) / (PI / 2.0)).floor() as i64;
                let b = (theta / (PI / 4.0)).floor() as i64;
                if (a + b) % 2 == 0 {
                    [0.9, 0.3, 0.2]
                } else {
                    [0.2, 0.4, 0.9]
                }
            }
        }
    }
}

/// How ground-truth views are colored.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shading {
    /// Texture albedo times Lambertian shading.
    Textured,
    /// Uniform gray albedo times Lambertian shading.
    Gray,
}

/// A small sphere detached from the main object.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Floater {
    pub center: [f64; 3],
    pub radius: f64,
}

fn default_radius() -> f64 {
    0.5
}
fn default_half_extent() -> [f64; 3] {
    [0.35, 0.35, 0.35]
}
fn default_reference() -> SphericalPose {
    SphericalPose::new(2.0, FRAC_PI_2, 0.0)
}
fn default_fov() -> f64 {
    0.7
}
fn default_light() -> [f64; 3] {
    [0.6, 0.3, 0.75]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub kind: SceneKind,
    #[serde(default)]
    pub center: [f64; 3],
    #[serde(default = "default_radius")]
    pub radius: f64,
    #[serde(default = "default_half_extent")]
    pub half_extent: [f64; 3],
    #[serde(default)]
    pub texture: Texture,
    #[serde(default)]
    pub floater: Option<Floater>,
    /// Reference (input) viewpoint.
    #[serde(default = "default_reference")]
    pub reference: SphericalPose,
    #[serde(default = "default_fov")]
    pub fov_y: f64,
    /// World-space direction towards the light.
    #[serde(default = "default_light")]
    pub light: [f64; 3],
    #[serde(default)]
    pub image: Option<PathBuf>,
    #[serde(default)]
    pub mask: Option<PathBuf>,
    #[serde(default)]
    pub depth: Option<PathBuf>,
}

impl SceneSpec {
    pub fn new(kind: SceneKind) -> Self {
        Self {
            kind,
            center: [0.0; 3],
            radius: default_radius(),
            half_extent: default_half_extent(),
            texture: if kind == SceneKind::TexturedSphere {
                Texture::HueBands
            } else {
                Texture::Solid
            },
            floater: None,
            reference: default_reference(),
            fov_y: default_fov(),
            light: default_light(),
            image: None,
            mask: None,
            depth: None,
        }
    }

    pub fn with_floater(mut self, floater: Floater) -> Self {
        self.floater = Some(floater);
        self
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: &str| Err(SceneError::Invalid(m.to_string()));
        match self.kind {
            SceneKind::FromFiles => {
                if self.image.is_none() || self.mask.is_none() || self.depth.is_none() {
                    return bad("from-files scenes need image, mask and depth paths");
                }
            }
            SceneKind::AnalyticBox => {
                if self.half_extent.iter().any(|h| !(*h > 0.0)) {
                    return bad("box half extents must be positive");
                }
            }
            _ => {
                if !(self.radius > 0.0) {
                    return bad("sphere radius must be positive");
                }
            }
        }
        if let Some(f) = &self.floater {
            if !(f.radius > 0.0) {
                return bad("floater radius must be positive");
            }
        }
        let r = &self.reference;
        if !(r.radius > 1.0) || !(r.polar > 0.0 && r.polar < PI) || !(self.fov_y > 0.0 && self.fov_y < PI) {
            return bad("reference pose must sit outside the unit ball with polar angle in (0, π); fov_y in (0, π)");
        }
        Ok(())
    }

    pub fn has_ground_truth(&self) -> bool {
        self.kind != SceneKind::FromFiles
    }

    /// Camera looking from `pose` with this scene's field of view; the ray
    /// interval spans the unit ball around the origin.
    pub fn camera(&self, pose: SphericalPose, resolution: usize) -> Camera {
        Camera::orbit(pose, self.fov_y, resolution, 1.0).expect("scene cameras are valid by construction")
    }

    pub fn reference_camera(&self, resolution: usize) -> Camera {
        self.camera(self.reference, resolution)
    }

    fn light_dir(&self) -> Vector3<f64> {
        Vector3::from(self.light).normalize()
    }

    /// Signed distance to the main object (negative inside), ignoring the floater.
    pub fn main_sdf(&self, p: [f64; 3]) -> f64 {
        let q = Vector3::from(p) - Vector3::from(self.center);
        match self.kind {
            SceneKind::AnalyticBox => {
                let h = Vector3::from(self.half_extent);
                let d = q.abs() - h;
                let outside = d.map(|v| v.max(0.0)).norm();
                outside + d.max().min(0.0)
            }
            _ => q.norm() - self.radius,
        }
    }

    pub fn floater_sdf(&self, p: [f64; 3]) -> Option<f64> {
        self.floater
            .map(|f| (Vector3::from(p) - Vector3::from(f.center)).norm() - f.radius)
    }

    pub fn inside(&self, p: [f64; 3]) -> bool {
        self.main_sdf(p) < 0.0 || self.floater_sdf(p).is_some_and(|d| d < 0.0)
    }

    fn outward_normal(&self, p: Vector3<f64>, on_floater: bool) -> Vector3<f64> {
        if on_floater {
            let f = self.floater.expect("floater hit implies floater");
            return (p - Vector3::from(f.center)).normalize();
        }
        let q = p - Vector3::from(self.center);
        match self.kind {
            SceneKind::AnalyticBox => {
                let h = Vector3::from(self.half_extent);
                let r = q.component_div(&h);
                let axis = r.iamax();
                let mut n = Vector3::zeros();
                n[axis] = r[axis].signum();
                n
            }
            _ => q.normalize(),
        }
    }

    fn shade(&self, n: Vector3<f64>) -> f64 {
        0.35 + 0.65 * n.dot(&self.light_dir()).max(0.0)
    }

    /// Surface color at a point of the main object or the floater.
    pub fn surface_color(&self, p: Vector3<f64>, on_floater: bool, shading: Shading) -> [f64; 3] {
        let n = self.outward_normal(p, on_floater);
        let s = self.shade(n);
        let albedo = match (shading, on_floater) {
            (Shading::Gray, _) => [0.7; 3],
            (Shading::Textured, true) => [0.25, 0.2, 0.15],
            (Shading::Textured, false) => {
                let d = (p - Vector3::from(self.center)).normalize();
                self.texture.albedo(d)
            }
        };
        [albedo[0] * s, albedo[1] * s, albedo[2] * s]
    }

    /// First intersection after `t_min`: distance and whether it is the floater.
    pub fn intersect(&self, ray: &Ray, t_min: f64) -> Option<(f64, bool)> {
        let main = match self.kind {
            SceneKind::AnalyticBox => intersect_box(ray, self.center, self.half_extent, t_min),
            _ => intersect_sphere(ray, self.center, self.radius, t_min),
        };
        let floater = self
            .floater
            .and_then(|f| intersect_sphere(ray, f.center, f.radius, t_min));
        match (main, floater) {
            (Some(a), Some(b)) if b < a => Some((b, true)),
            (Some(a), _) => Some((a, false)),
            (None, Some(b)) => Some((b, true)),
            (None, None) => None,
        }
    }

    /// Ray-cast ground truth. Missed pixels show `background` at depth `far`.
    pub fn render_truth(&self, camera: &Camera, shading: Shading, background: [f64; 3]) -> GroundTruthView {
        let n = camera.width * camera.height;
        let mut view = GroundTruthView {
            width: camera.width,
            height: camera.height,
            color: Vec::with_capacity(n * 3),
            mask: Vec::with_capacity(n),
            depth: Vec::with_capacity(n),
            main_mask: Vec::with_capacity(n),
        };
        for ray in camera.generate_rays() {
            match self.intersect(&ray, camera.near) {
                Some((t, on_floater)) if t <= camera.far => {
                    let p = Vector3::from(ray.at(t));
                    view.color.extend(self.surface_color(p, on_floater, shading));
                    view.mask.push(true);
                    view.depth.push(t);
                    view.main_mask.push(!on_floater);
                }
                _ => {
                    view.color.extend(background);
                    view.mask.push(false);
                    view.depth.push(camera.far);
                    view.main_mask.push(false);
                }
            }
        }
        view
    }

    /// Reference inputs for an analytic scene: the textured front view, its
    /// silhouette, and an affine rescaling of its depth standing in for a
    /// monocular relative-depth estimate.
    pub fn reference_bundle(&self, resolution: usize, background: [f64; 3]) -> Result<ReferenceBundle, SceneError> {
        if !self.has_ground_truth() {
            return self.load_reference(resolution);
        }
        let camera = self.reference_camera(resolution);
        let gt = self.render_truth(&camera, Shading::Textured, background);
        let depth = gt.depth.iter().map(|d| 2.0 * d - 1.0).collect();
        Ok(ReferenceBundle::new(gt.color, gt.mask, depth, camera)?)
    }

    /// Reads image, mask and depth files. Their resolution must agree and be
    /// square; the camera is the reference pose at that resolution.
    pub fn load_reference(&self, expected_resolution: usize) -> Result<ReferenceBundle, SceneError> {
        let (Some(ip), Some(mp), Some(dp)) = (&self.image, &self.mask, &self.depth) else {
            return Err(SceneError::Invalid("from-files scenes need image, mask and depth paths".into()));
        };
        let (iw, ih, image) = read_rgb_png(ip)?;
        let (mw, mh, mask) = read_gray_png(mp)?;
        let (dw, dh, depth) = read_depth(dp)?;
        if (iw, ih) != (mw, mh) || (iw, ih) != (dw, dh) {
            return Err(SceneError::Invalid(format!(
                "input resolutions differ: image {iw}x{ih}, mask {mw}x{mh}, depth {dw}x{dh}"
            )));
        }
        if iw != ih || iw != expected_resolution {
            return Err(SceneError::Invalid(format!(
                "inputs are {iw}x{ih} but the reference resolution is {expected_resolution}"
            )));
        }
        let camera = self.reference_camera(iw);
        let mask = mask.iter().map(|m| *m > 0.5).collect();
        Ok(ReferenceBundle::new(image, mask, depth, camera)?)
    }

    pub fn field(&self, shading: Shading) -> AnalyticField<'_> {
        AnalyticField { scene: self, shading }
    }
}

/// Ray-cast ground-truth view.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthView {
    pub width: usize,
    pub height: usize,
    pub color: Vec<f64>,
    pub mask: Vec<bool>,
    pub depth: Vec<f64>,
    /// Pixels whose first hit is the main object.
    pub main_mask: Vec<bool>,
}

/// Volumetric stand-in for a scene: constant density inside, surface color
/// of the nearest boundary direction.
#[derive(Clone, Copy, Debug)]
pub struct AnalyticField<'a> {
    scene: &'a SceneSpec,
    shading: Shading,
}

impl VolumeField for AnalyticField<'_> {
    fn sample(&self, p: [f64; 3]) -> FieldSample {
        let s = self.scene;
        let in_main = s.main_sdf(p) < 0.0;
        let in_floater = s.floater_sdf(p).is_some_and(|d| d < 0.0);
        if !in_main && !in_floater {
            return FieldSample {
                density: 0.0,
                color: [0.5; 3],
            };
        }
        FieldSample {
            density: SOLID_DENSITY,
            color: s.surface_color(Vector3::from(p), !in_main, self.shading),
        }
    }
}

fn intersect_sphere(ray: &Ray, center: [f64; 3], radius: f64, t_min: f64) -> Option<f64> {
    let oc = Vector3::from(ray.origin) - Vector3::from(center);
    let dir = Vector3::from(ray.direction);
    let b = dir.dot(&oc);
    let c = oc.norm_squared() - radius * radius;
    let a = dir.norm_squared();
    let disc = b * b - a * c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    [(-b - sq) / a, (-b + sq) / a].into_iter().find(|t| *t >= t_min)
}

fn intersect_box(ray: &Ray, center: [f64; 3], half: [f64; 3], t_min: f64) -> Option<f64> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        let o = ray.origin[a] - center[a];
        let d = ray.direction[a];
        if d.abs() < 1e-15 {
            if o.abs() > half[a] {
                return None;
            }
            continue;
        }
        let (mut lo, mut hi) = ((-half[a] - o) / d, (half[a] - o) / d);
        if lo > hi {
            std::mem::swap(&mut lo, &mut hi);
        }
        t0 = t0.max(lo);
        t1 = t1.min(hi);
    }
    if t0 > t1 {
        return None;
    }
    [t0, t1].into_iter().find(|t| *t >= t_min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::{render_view, RenderOptions};

    #[test]
    fn sphere_silhouette_is_a_disk() {
        let s = SceneSpec::new(SceneKind::AnalyticSphere);
        let cam = s.reference_camera(32);
        let gt = s.render_truth(&cam, Shading::Gray, [1.0; 3]);
        // pixel-center rays hitting a sphere of angular radius asin(r/ρ)
        let half = (0.5f64 / 2.0).asin();
        let dirs = cam.camera_directions();
        for (p, d) in dirs.iter().enumerate() {
            let angle = (d.z / d.norm()).acos();
            assert_eq!(gt.mask[p], angle < half, "pixel {p}");
        }
        let center = 16 * 32 + 16;
        assert!(gt.depth[center] > 1.5 - 1e-3 && gt.depth[center] < 1.52);
    }

    #[test]
    fn box_hits_front_face_at_known_depth() {
        let s = SceneSpec::new(SceneKind::AnalyticBox);
        let ray = Ray {
            origin: [2.0, 0.0, 0.0],
            direction: [-1.0, 0.0, 0.0],
        };
        let (t, floater) = s.intersect(&ray, 0.0).unwrap();
        assert!(!floater);
        assert!((t - 1.65).abs() < 1e-12);
        let normal = s.outward_normal(Vector3::from(ray.at(t)), false);
        assert_eq!(normal, Vector3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn floater_occludes_when_in_front() {
        let s = SceneSpec::new(SceneKind::AnalyticSphere).with_floater(Floater {
            center: [0.8, 0.0, 0.0],
            radius: 0.1,
        });
        let ray = Ray {
            origin: [2.0, 0.0, 0.0],
            direction: [-1.0, 0.0, 0.0],
        };
        let (t, floater) = s.intersect(&ray, 0.0).unwrap();
        assert!(floater);
        assert!((t - 1.1).abs() < 1e-12);
    }

    #[test]
    fn volume_render_of_analytic_field_agrees_with_ray_cast() {
        let s = SceneSpec::new(SceneKind::TexturedSphere);
        let cam = s.camera(SphericalPose::new(2.0, 1.2, 0.7), 24);
        let gt = s.render_truth(&cam, Shading::Textured, [1.0; 3]);
        let out = render_view(&s.field(Shading::Textured), &cam, &RenderOptions::default().with_samples(256));
        let agree = gt
            .mask
            .iter()
            .zip(out.mask())
            .filter(|(a, b)| **a == *b)
            .count();
        assert!(agree as f64 / gt.mask.len() as f64 > 0.97);
    }

    #[test]
    fn reference_bundle_has_positive_depth_correlation() {
        let s = SceneSpec::new(SceneKind::TexturedSphere);
        let r = s.reference_bundle(16, [1.0; 3]).unwrap();
        let gt = s.render_truth(&r.camera, Shading::Textured, [1.0; 3]);
        let (loss, _) = crate::losses::pearson_loss(&r.depth, &gt.depth, &r.mask);
        assert!(loss < 1e-12);
    }

    #[test]
    fn from_files_needs_all_paths() {
        let mut s = SceneSpec::new(SceneKind::FromFiles);
        assert!(s.validate().is_err());
        s.image = Some("a.png".into());
        s.mask = Some("m.png".into());
        s.depth = Some("d.bin".into());
        assert!(s.validate().is_ok());
        assert!(!s.has_ground_truth());
    }

    #[test]
    fn textures_stay_in_unit_range() {
        for t in [Texture::Solid, Texture::HueBands, Texture::Checker] {
            for k in 0..200 {
                let a = k as f64 * 0.37;
                let d = Vector3::new(a.cos() * (a * 0.3).sin(), a.sin() * (a * 0.3).sin(), (a * 0.3).cos());
                assert!(t.albedo(d).iter().all(|c| (0.0..=1.0).contains(c)));
            }
        }
    }
}
