//! Pinhole cameras, stratified ray marching and differentiable volume
//! rendering of color, depth, opacity, per-sample weights and normals.

mod camera;
mod composite;
pub mod io;
mod normals;

pub use camera::{Camera, Ray, SphericalPose};
pub use composite::{
    composite_ray, composite_ray_backward, segment_lengths, Composite, CompositeGrad, RaySample,
    DEPTH_EPS,
};
pub use normals::{estimate_normals, estimate_normals_backward, estimate_normals_masked};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{FieldGrad, FieldSample, RadianceField, VolumeField};

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("image i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("image codec: {0}")]
    Codec(String),
    #[error("bad raster: {0}")]
    BadRaster(String),
}

/// How ray parameters are placed inside each of the equal-width bins.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sampling {
    /// Bin centers.
    Midpoint,
    /// One uniform draw per bin, keyed by seed and pixel.
    Jittered(u64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    pub samples_per_ray: usize,
    pub sampling: Sampling,
    pub background: [f64; 3],
    /// Worker threads used for rendering; results do not depend on it.
    pub workers: usize,
    /// Pixels at or below this opacity get no normal.
    pub normal_opacity_threshold: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            samples_per_ray: 64,
            sampling: Sampling::Midpoint,
            background: [1.0; 3],
            workers: 1,
            normal_opacity_threshold: 0.1,
        }
    }
}

impl RenderOptions {
    pub fn with_samples(mut self, samples_per_ray: usize) -> Self {
        self.samples_per_ray = samples_per_ray;
        self
    }

    pub fn with_sampling(mut self, sampling: Sampling) -> Self {
        self.sampling = sampling;
        self
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers;
        self
    }

    pub fn with_background(mut self, background: [f64; 3]) -> Self {
        self.background = background;
        self
    }
}

/// Everything a view render produces. Buffers are row-major; `color` and
/// `normals` interleave three channels, `weights` holds `samples_per_ray`
/// entries per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    pub samples_per_ray: usize,
    pub color: Vec<f64>,
    pub depth: Vec<f64>,
    pub opacity: Vec<f64>,
    pub weights: Vec<f64>,
    pub normals: Vec<f64>,
}

impl RenderOutput {
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn pixel_weights(&self, pixel: usize) -> &[f64] {
        let s = self.samples_per_ray;
        &self.weights[pixel * s..(pixel + 1) * s]
    }

    pub fn normal(&self, pixel: usize) -> [f64; 3] {
        let n = &self.normals[pixel * 3..pixel * 3 + 3];
        [n[0], n[1], n[2]]
    }

    pub fn normals_as_vectors(&self) -> Vec<[f64; 3]> {
        (0..self.pixel_count()).map(|i| self.normal(i)).collect()
    }

    /// Opacity thresholded at 0.5.
    pub fn mask(&self) -> Vec<bool> {
        self.opacity.iter().map(|o| *o > 0.5).collect()
    }
}

/// Per-sample values retained for the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderTrace {
    pub camera: Camera,
    pub options: RenderOptions,
    rays: Vec<Ray>,
    samples: Vec<RaySample>,
    normal_valid: Vec<bool>,
}

impl RenderTrace {
    pub fn ray_samples(&self, pixel: usize) -> &[RaySample] {
        let s = self.options.samples_per_ray;
        &self.samples[pixel * s..(pixel + 1) * s]
    }

    pub fn normal_valid(&self) -> &[bool] {
        &self.normal_valid
    }
}

/// Upstream gradients on a [`RenderOutput`].
#[derive(Clone, Debug, PartialEq)]
pub struct RenderGrad {
    pub color: Vec<f64>,
    pub opacity: Vec<f64>,
    pub depth: Vec<f64>,
    pub weights: Option<Vec<f64>>,
    pub normals: Option<Vec<[f64; 3]>>,
}

impl RenderGrad {
    pub fn zeros(out: &RenderOutput) -> Self {
        let n = out.pixel_count();
        Self {
            color: vec![0.0; n * 3],
            opacity: vec![0.0; n],
            depth: vec![0.0; n],
            weights: None,
            normals: None,
        }
    }

    pub fn is_zero(&self) -> bool {
        let zero = |v: &[f64]| v.iter().all(|x| *x == 0.0);
        zero(&self.color)
            && zero(&self.opacity)
            && zero(&self.depth)
            && self.weights.as_deref().map_or(true, zero)
            && self
                .normals
                .as_deref()
                .map_or(true, |n| n.iter().all(|v| *v == [0.0; 3]))
    }
}

/// Runs `f` for every row, fanning out over `workers` threads, and returns
/// the results in row order.
fn map_rows<T, F>(height: usize, workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = workers.clamp(1, height.max(1));
    if workers == 1 {
        return (0..height).map(f).collect();
    }
    let band = height.div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let f = &f;
                scope.spawn(move || {
                    (w * band..((w + 1) * band).min(height))
                        .map(f)
                        .collect::<Vec<T>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("render worker panicked"))
            .collect()
    })
}

fn ray_parameters(camera: &Camera, options: &RenderOptions, pixel: usize, out: &mut [f64]) {
    let n = options.samples_per_ray;
    let bin = (camera.far - camera.near) / n as f64;
    match options.sampling {
        Sampling::Midpoint => {
            for (i, t) in out.iter_mut().enumerate() {
                *t = camera.near + (i as f64 + 0.5) * bin;
            }
        }
        Sampling::Jittered(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(pixel as u64);
            for (i, t) in out.iter_mut().enumerate() {
                *t = camera.near + (i as f64 + rng.gen::<f64>()) * bin;
            }
        }
    }
}

/// Samples a whole ray. Radiance fields reuse one scratch buffer per ray.
trait RaySampler: Sync {
    fn sample_ray(&self, ray: &Ray, ts: &[f64], out: &mut Vec<RaySample>);
}

struct Generic<'a, F: ?Sized>(&'a F);

impl<F: VolumeField + ?Sized> RaySampler for Generic<'_, F> {
    fn sample_ray(&self, ray: &Ray, ts: &[f64], out: &mut Vec<RaySample>) {
        out.clear();
        out.extend(ts.iter().map(|t| {
            let FieldSample { density, color } = self.0.sample(ray.at(*t));
            RaySample {
                density,
                color,
                t: *t,
            }
        }));
    }
}

struct Neural<'a>(&'a RadianceField);

impl RaySampler for Neural<'_> {
    fn sample_ray(&self, ray: &Ray, ts: &[f64], out: &mut Vec<RaySample>) {
        let mut scratch = self.0.scratch();
        out.clear();
        out.extend(ts.iter().map(|t| {
            let FieldSample { density, color } = self.0.forward_point(ray.at(*t), &mut scratch);
            RaySample {
                density,
                color,
                t: *t,
            }
        }));
    }
}

fn render_impl(
    sampler: &dyn RaySampler,
    camera: &Camera,
    options: &RenderOptions,
) -> (RenderOutput, RenderTrace) {
    assert!(options.samples_per_ray >= 2, "samples_per_ray must be at least 2");
    let (w, h, s) = (camera.width, camera.height, options.samples_per_ray);
    let rays = camera.generate_rays();
    let rows = map_rows(h, options.workers, |row| {
        let mut ts = vec![0.0; s];
        let mut samples = Vec::with_capacity(s);
        let mut row_samples = Vec::with_capacity(w * s);
        let mut composites = Vec::with_capacity(w);
        for col in 0..w {
            let pixel = row * w + col;
            ray_parameters(camera, options, pixel, &mut ts);
            sampler.sample_ray(&rays[pixel], &ts, &mut samples);
            composites.push(composite_ray(&samples, camera.far, options.background));
            row_samples.extend_from_slice(&samples);
        }
        (composites, row_samples)
    });

    let n = w * h;
    let mut out = RenderOutput {
        width: w,
        height: h,
        samples_per_ray: s,
        color: Vec::with_capacity(n * 3),
        depth: Vec::with_capacity(n),
        opacity: Vec::with_capacity(n),
        weights: Vec::with_capacity(n * s),
        normals: Vec::new(),
    };
    let mut samples = Vec::with_capacity(n * s);
    for (composites, row_samples) in rows {
        for c in composites {
            out.color.extend_from_slice(&c.color);
            out.depth.push(c.depth);
            out.opacity.push(c.opacity);
            out.weights.extend_from_slice(&c.weights);
        }
        samples.extend(row_samples);
    }
    let normal_valid: Vec<bool> = out
        .opacity
        .iter()
        .map(|o| *o > options.normal_opacity_threshold)
        .collect();
    out.normals = estimate_normals_masked(&out.depth, &normal_valid, camera)
        .into_iter()
        .flatten()
        .collect();
    let trace = RenderTrace {
        camera: *camera,
        options: *options,
        rays,
        samples,
        normal_valid,
    };
    (out, trace)
}

/// Renders any volume field from `camera`.
pub fn render_view<F: VolumeField + ?Sized>(
    field: &F,
    camera: &Camera,
    options: &RenderOptions,
) -> RenderOutput {
    render_impl(&Generic(field), camera, options).0
}

/// Renders a radiance field and keeps what [`render_backward`] needs.
pub fn render_field_traced(
    field: &RadianceField,
    camera: &Camera,
    options: &RenderOptions,
) -> (RenderOutput, RenderTrace) {
    render_impl(&Neural(field), camera, options)
}

pub fn render_field(field: &RadianceField, camera: &Camera, options: &RenderOptions) -> RenderOutput {
    render_field_traced(field, camera, options).0
}

/// Backpropagates `grad` through compositing, normal estimation and the field.
///
/// Per-row partial sums are reduced in row order and grid gradients are
/// scattered sequentially, so the result is independent of `workers`.
pub fn render_backward(
    field: &RadianceField,
    out: &RenderOutput,
    trace: &RenderTrace,
    grad: &RenderGrad,
) -> FieldGrad {
    let camera = &trace.camera;
    let options = &trace.options;
    let (w, h, s) = (camera.width, camera.height, options.samples_per_ray);
    let mut d_depth = grad.depth.clone();
    if let Some(dn) = &grad.normals {
        estimate_normals_backward(&out.depth, &trace.normal_valid, camera, dn, &mut d_depth);
    }
    let feat_dim = field.hash_grid().output_dim();
    let mlp_len = field.mlp_params().len();

    let rows = map_rows(h, options.workers, |row| {
        let mut mlp_grad = vec![0.0; mlp_len];
        // (point, d features) records for the grid scatter
        let mut records: Vec<f64> = Vec::new();
        let mut scratch = field.scratch();
        let mut dd = vec![0.0; s];
        let mut dc = vec![[0.0; 3]; s];
        let composite = |pixel: usize| Composite {
            color: [
                out.color[pixel * 3],
                out.color[pixel * 3 + 1],
                out.color[pixel * 3 + 2],
            ],
            opacity: out.opacity[pixel],
            weights: out.pixel_weights(pixel).to_vec(),
            depth: out.depth[pixel],
        };
        for col in 0..w {
            let pixel = row * w + col;
            let cg = CompositeGrad {
                color: [
                    grad.color[pixel * 3],
                    grad.color[pixel * 3 + 1],
                    grad.color[pixel * 3 + 2],
                ],
                opacity: grad.opacity[pixel],
                depth: d_depth[pixel],
                weights: grad.weights.as_ref().map(|v| &v[pixel * s..(pixel + 1) * s]),
            };
            let pixel_weights_zero = cg.weights.map_or(true, |v| v.iter().all(|x| *x == 0.0));
            if cg.color == [0.0; 3] && cg.opacity == 0.0 && cg.depth == 0.0 && pixel_weights_zero {
                continue;
            }
            let samples = trace.ray_samples(pixel);
            composite_ray_backward(
                samples,
                &composite(pixel),
                camera.far,
                options.background,
                &cg,
                &mut dd,
                &mut dc,
            );
            let ray = &trace.rays[pixel];
            for i in 0..s {
                if dd[i] == 0.0 && dc[i] == [0.0; 3] {
                    continue;
                }
                let p = ray.at(samples[i].t);
                if !field.contains(p) {
                    continue;
                }
                field.forward_point(p, &mut scratch);
                let d_feat = field.backward_point(&mut scratch, dd[i], dc[i], &mut mlp_grad);
                if d_feat.iter().any(|v| *v != 0.0) {
                    records.extend_from_slice(&p);
                    records.extend_from_slice(d_feat);
                }
            }
        }
        (mlp_grad, records)
    });

    let mut total = FieldGrad::zeros(field);
    let grid = field.hash_grid();
    let stride = 3 + feat_dim;
    for (mlp_grad, records) in &rows {
        for (a, b) in total.mlp.iter_mut().zip(mlp_grad) {
            *a += b;
        }
        for rec in records.chunks_exact(stride) {
            grid.accumulate_grad([rec[0], rec[1], rec[2]], &rec[3..], &mut total.grid);
        }
    }
    total
}
