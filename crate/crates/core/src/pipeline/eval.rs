use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::cameras::held_out_cameras;
use super::mesh::{default_iso_level, extract_mesh, Mesh};
use crate::field::VolumeField;
use crate::losses::{label_components, pearson_loss};
use crate::render::{render_view, Camera, RenderOptions, RenderOutput, Sampling};
use crate::scene::{SceneError, SceneKind, SceneSpec, Shading};

/// Peak signal-to-noise ratio for values in [0, 1]. The MSE is floored at
/// 1e-10, capping identical images at 100 dB.
pub fn psnr(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64;
    -10.0 * mse.max(1e-10).log10()
}

/// Intersection over union; two empty masks score 1.
pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    assert_eq!(a.len(), b.len());
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Pearson correlation over `mask`; 0 when either side is constant.
pub fn depth_correlation(reference: &[f64], rendered: &[f64], mask: &[bool]) -> f64 {
    let (loss, grad) = pearson_loss(reference, rendered, mask);
    if loss == 0.5 && grad.iter().all(|g| *g == 0.0) {
        return 0.0;
    }
    1.0 - 2.0 * loss
}

/// Opacity summed over pixels of every component of the binarized opacity
/// except the largest, divided by the pixel count. Pixels below `threshold`
/// belong to no component.
pub fn off_component_mass(render: &RenderOutput, threshold: f64) -> f64 {
    let binary: Vec<bool> = render.opacity.iter().map(|o| *o >= threshold).collect();
    let comps = label_components(&binary, render.width, render.height);
    let Some(keep) = comps.largest else {
        return 0.0;
    };
    let total: f64 = render
        .opacity
        .iter()
        .zip(&comps.labels)
        .filter(|(_, l)| **l != 0 && **l != keep)
        .fold(0.0, |acc, (o, _)| acc + o);
    total / render.pixel_count() as f64
}

/// Averages over a set of views.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub psnr: f64,
    pub mask_iou: f64,
    pub depth_pearson: f64,
}

/// Renders `field` from each camera and compares with the scene's ray-cast
/// ground truth under `shading`.
pub fn evaluate_views<F: VolumeField + ?Sized>(
    field: &F,
    scene: &SceneSpec,
    cameras: &[Camera],
    options: &RenderOptions,
    shading: Shading,
) -> ViewMetrics {
    let mut sum = ViewMetrics {
        psnr: 0.0,
        mask_iou: 0.0,
        depth_pearson: 0.0,
    };
    for cam in cameras {
        let out = render_view(field, cam, options);
        let gt = scene.render_truth(cam, shading, options.background);
        sum.psnr += psnr(&out.color, &gt.color);
        sum.mask_iou += mask_iou(&out.mask(), &gt.mask);
        sum.depth_pearson += depth_correlation(&gt.depth, &out.depth, &gt.mask);
    }
    let k = cameras.len().max(1) as f64;
    ViewMetrics {
        psnr: sum.psnr / k,
        mask_iou: sum.mask_iou / k,
        depth_pearson: sum.depth_pearson / k,
    }
}

fn fibonacci_sphere(count: usize) -> impl Iterator<Item = [f64; 3]> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..count).map(move |i| {
        let z = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
        let r = (1.0 - z * z).sqrt();
        let phi = golden * i as f64;
        [r * phi.cos(), r * phi.sin(), z]
    })
}

/// Points on the analytic surface of the scene (main object and floater).
fn surface_samples(scene: &SceneSpec, count: usize) -> Vec<[f64; 3]> {
    let c = scene.center;
    let mut pts: Vec<[f64; 3]> = match scene.kind {
        SceneKind::AnalyticBox => {
            let h = scene.half_extent;
            let per_face = (count / 6).max(1);
            let side = (per_face as f64).sqrt().ceil() as usize;
            let mut v = Vec::new();
            for axis in 0..3 {
                for sign in [-1.0, 1.0] {
                    for i in 0..side {
                        for j in 0..side {
                            let u = (i as f64 + 0.5) / side as f64 * 2.0 - 1.0;
                            let w = (j as f64 + 0.5) / side as f64 * 2.0 - 1.0;
                            let mut p = [0.0; 3];
                            p[axis] = sign * h[axis];
                            p[(axis + 1) % 3] = u * h[(axis + 1) % 3];
                            p[(axis + 2) % 3] = w * h[(axis + 2) % 3];
                            v.push([p[0] + c[0], p[1] + c[1], p[2] + c[2]]);
                        }
                    }
                }
            }
            v
        }
        _ => fibonacci_sphere(count)
            .map(|d| [0, 1, 2].map(|a| c[a] + scene.radius * d[a]))
            .collect(),
    };
    if let Some(f) = scene.floater {
        pts.extend(fibonacci_sphere(count / 4 + 1).map(|d| [0, 1, 2].map(|a| f.center[a] + f.radius * d[a])));
    }
    // drop points buried inside the other solid
    pts.retain(|p| scene_sdf(scene, *p) > -1e-9);
    pts
}

fn scene_sdf(scene: &SceneSpec, p: [f64; 3]) -> f64 {
    let m = scene.main_sdf(p);
    scene.floater_sdf(p).map_or(m, |f| m.min(f))
}

/// Symmetric Hausdorff distance between mesh vertices and samples of the
/// analytic surface. `None` for an empty mesh.
pub fn hausdorff_to_scene(mesh: &Mesh, scene: &SceneSpec, samples: usize) -> Option<f64> {
    if mesh.is_empty() {
        return None;
    }
    let to_surface = mesh
        .vertices
        .iter()
        .map(|v| scene_sdf(scene, *v).abs())
        .fold(0.0, f64::max);
    let to_mesh = surface_samples(scene, samples)
        .iter()
        .map(|p| {
            mesh.vertices
                .iter()
                .map(|v| (0..3).map(|a| (v[a] - p[a]).powi(2)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .fold(0.0, f64::max);
    Some(to_surface.max(to_mesh))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub psnr: f64,
    pub mask_iou: f64,
    pub depth_pearson: f64,
    /// `None` when the extracted mesh is empty.
    pub hausdorff: Option<f64>,
    pub views: usize,
}

/// Held-out metrics against a scene with analytic ground truth: textured
/// PSNR, mask IoU and depth correlation over `views` cameras around the
/// reference orbit, and the Hausdorff distance of the extracted mesh.
pub fn evaluate<F: VolumeField + ?Sized>(
    field: &F,
    scene: &SceneSpec,
    resolution: usize,
    views: usize,
    samples_per_ray: usize,
    mesh_resolution: usize,
) -> Result<EvalReport, SceneError> {
    if !scene.has_ground_truth() {
        return Err(SceneError::NoGroundTruth);
    }
    let reference = scene.reference_camera(resolution);
    let cameras = held_out_cameras(&reference, views.max(1), reference.pose.polar);
    let options = RenderOptions::default()
        .with_samples(samples_per_ray)
        .with_sampling(Sampling::Midpoint);
    let m = evaluate_views(field, scene, &cameras, &options, Shading::Textured);
    let spacing = (reference.far - reference.near) / samples_per_ray as f64;
    let hausdorff = extract_mesh(field, [-1.0; 3], [1.0; 3], mesh_resolution.max(8), default_iso_level(spacing))
        .and_then(|mesh| hausdorff_to_scene(&mesh, scene, 2000));
    Ok(EvalReport {
        psnr: m.psnr,
        mask_iou: m.mask_iou,
        depth_pearson: m.depth_pearson,
        hausdorff,
        views: cameras.len(),
    })
}
