//! Learnable radiance field: hashed multi-resolution encoding feeding a small
//! MLP that emits density and color at a point.

mod checkpoint;
mod hash_grid;
mod mlp;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, Checkpoint, CheckpointError, CheckpointMeta};
pub use hash_grid::{HashGrid, HashGridConfig, LevelLayout};
pub use mlp::{sigmoid, softplus, Activation, Mlp, MlpConfig, MlpScratch, MLP_OUTPUTS};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("invalid field config: {0}")]
    InvalidConfig(String),
}

/// Density and color at one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldSample {
    pub density: f64,
    pub color: [f64; 3],
}

impl FieldSample {
    pub const EMPTY: FieldSample = FieldSample {
        density: 0.0,
        color: [0.5; 3],
    };
}

/// Anything the renderer can march through.
pub trait VolumeField: Sync {
    fn sample(&self, p: [f64; 3]) -> FieldSample;
}

impl<F: Fn([f64; 3]) -> FieldSample + Sync> VolumeField for F {
    fn sample(&self, p: [f64; 3]) -> FieldSample {
        self(p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    #[serde(default)]
    pub grid: HashGridConfig,
    #[serde(default)]
    pub mlp: MlpConfig,
    /// Added to the density logit before softplus.
    #[serde(default = "default_density_bias")]
    pub density_bias: f64,
}

fn default_density_bias() -> f64 {
    -1.0
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            grid: HashGridConfig::default(),
            mlp: MlpConfig::default(),
            density_bias: default_density_bias(),
        }
    }
}

/// Gradient of a scalar objective w.r.t. all field parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldGrad {
    pub grid: Vec<f64>,
    pub mlp: Vec<f64>,
}

impl FieldGrad {
    pub fn zeros(field: &RadianceField) -> Self {
        Self {
            grid: vec![0.0; field.grid_params().len()],
            mlp: vec![0.0; field.mlp_params().len()],
        }
    }

    pub fn norm(&self) -> f64 {
        self.grid
            .iter()
            .chain(self.mlp.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grid.iter().chain(self.mlp.iter()).all(|g| g.is_finite())
    }

    pub fn add_assign(&mut self, other: &FieldGrad) {
        for (a, b) in self.grid.iter_mut().zip(&other.grid) {
            *a += b;
        }
        for (a, b) in self.mlp.iter_mut().zip(&other.mlp) {
            *a += b;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RadianceField {
    config: FieldConfig,
    grid: HashGrid,
    mlp: Mlp,
    grid_params: Vec<f32>,
    mlp_params: Vec<f32>,
}

/// Reusable buffers for one traced point evaluation.
#[derive(Clone, Debug)]
pub struct FieldScratch {
    mlp: MlpScratch,
    raw: [f64; MLP_OUTPUTS],
    d_features: Vec<f64>,
}

impl RadianceField {
    /// Fresh field: grid entries uniform in ±1e-4, He-initialized MLP.
    pub fn new(config: FieldConfig, seed: u64) -> Result<Self, FieldError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = HashGrid::new(config.grid.clone())?;
        let mlp = Mlp::new(grid.output_dim(), &config.mlp)?;
        let grid_params = (0..grid.param_count())
            .map(|_| rng.gen_range(-1e-4f32..1e-4))
            .collect();
        let mlp_params = mlp.init_params(&mut rng);
        Ok(Self {
            config,
            grid,
            mlp,
            grid_params,
            mlp_params,
        })
    }

    /// Rebuilds a field from explicit parameter arrays.
    pub fn from_params(
        config: FieldConfig,
        grid_params: Vec<f32>,
        mlp_params: Vec<f32>,
    ) -> Result<Self, FieldError> {
        let grid = HashGrid::new(config.grid.clone())?;
        let mlp = Mlp::new(grid.output_dim(), &config.mlp)?;
        if grid_params.len() != grid.param_count() || mlp_params.len() != mlp.param_count() {
            return Err(FieldError::InvalidConfig(format!(
                "parameter count mismatch: grid {} (expected {}), mlp {} (expected {})",
                grid_params.len(),
                grid.param_count(),
                mlp_params.len(),
                mlp.param_count()
            )));
        }
        Ok(Self {
            config,
            grid,
            mlp,
            grid_params,
            mlp_params,
        })
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn hash_grid(&self) -> &HashGrid {
        &self.grid
    }

    pub fn grid_params(&self) -> &[f32] {
        &self.grid_params
    }

    pub fn mlp_params(&self) -> &[f32] {
        &self.mlp_params
    }

    pub fn grid_params_mut(&mut self) -> &mut [f32] {
        &mut self.grid_params
    }

    pub fn mlp_params_mut(&mut self) -> &mut [f32] {
        &mut self.mlp_params
    }

    pub fn param_count(&self) -> usize {
        self.grid_params.len() + self.mlp_params.len()
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let g = &self.config.grid;
        (0..3).all(|a| p[a] >= g.bbox_min[a] && p[a] <= g.bbox_max[a])
    }

    /// Hash-grid features at `p` (points outside the box are clamped onto it).
    pub fn encode_position(&self, p: [f64; 3]) -> Vec<f64> {
        let mut out = vec![0.0; self.grid.output_dim()];
        self.grid.encode(p, &self.grid_params, &mut out);
        out
    }

    pub fn scratch(&self) -> FieldScratch {
        FieldScratch {
            mlp: self.mlp.scratch(),
            raw: [0.0; MLP_OUTPUTS],
            d_features: vec![0.0; self.grid.output_dim()],
        }
    }

    fn activate(&self, raw: [f64; MLP_OUTPUTS]) -> FieldSample {
        FieldSample {
            density: softplus(raw[0] + self.config.density_bias),
            color: [sigmoid(raw[1]), sigmoid(raw[2]), sigmoid(raw[3])],
        }
    }

    /// Evaluates the field at `p`, keeping intermediates in `scratch` for
    /// [`backward_point`](Self::backward_point). Exterior points return
    /// [`FieldSample::EMPTY`] without touching the network.
    pub fn forward_point(&self, p: [f64; 3], scratch: &mut FieldScratch) -> FieldSample {
        if !self.contains(p) {
            return FieldSample::EMPTY;
        }
        let input = self.mlp.input_mut(&mut scratch.mlp);
        self.grid.encode(p, &self.grid_params, input);
        scratch.raw = self.mlp.forward(&self.mlp_params, &mut scratch.mlp);
        self.activate(scratch.raw)
    }

    /// Backpropagates `(d_density, d_color)` for the point last passed to
    /// [`forward_point`](Self::forward_point). MLP gradients accumulate into
    /// `mlp_grad`; the returned slice is `d loss / d features`, to be scattered
    /// with [`HashGrid::accumulate_grad`].
    pub fn backward_point<'s>(
        &self,
        scratch: &'s mut FieldScratch,
        d_density: f64,
        d_color: [f64; 3],
        mlp_grad: &mut [f64],
    ) -> &'s [f64] {
        let raw = scratch.raw;
        let mut d_raw = [0.0; MLP_OUTPUTS];
        d_raw[0] = d_density * sigmoid(raw[0] + self.config.density_bias);
        for k in 0..3 {
            let s = sigmoid(raw[k + 1]);
            d_raw[k + 1] = d_color[k] * s * (1.0 - s);
        }
        self.mlp.backward(
            &self.mlp_params,
            &mut scratch.mlp,
            d_raw,
            mlp_grad,
            &mut scratch.d_features,
        );
        &scratch.d_features
    }

    pub fn query(&self, p: [f64; 3]) -> FieldSample {
        let mut scratch = self.scratch();
        self.forward_point(p, &mut scratch)
    }

    pub fn query_batch(&self, points: &[[f64; 3]]) -> Vec<FieldSample> {
        let mut scratch = self.scratch();
        points
            .iter()
            .map(|p| self.forward_point(*p, &mut scratch))
            .collect()
    }

    /// Vector-Jacobian product of [`query_batch`](Self::query_batch): gradient of
    /// `Σ_k d_density[k]·τ_k + d_color[k]·c_k` w.r.t. all parameters.
    pub fn query_vjp(&self, points: &[[f64; 3]], upstream: &[(f64, [f64; 3])]) -> FieldGrad {
        assert_eq!(points.len(), upstream.len());
        let mut grad = FieldGrad::zeros(self);
        let mut scratch = self.scratch();
        for (p, (dd, dc)) in points.iter().zip(upstream) {
            if !self.contains(*p) {
                continue;
            }
            self.forward_point(*p, &mut scratch);
            let d_feat = self.backward_point(&mut scratch, *dd, *dc, &mut grad.mlp);
            self.grid.accumulate_grad(*p, d_feat, &mut grad.grid);
        }
        grad
    }
}

impl VolumeField for RadianceField {
    fn sample(&self, p: [f64; 3]) -> FieldSample {
        self.query(p)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> FieldConfig {
        FieldConfig {
            grid: HashGridConfig {
                num_levels: 2,
                base_resolution: 2,
                max_resolution: 4,
                features_per_level: 2,
                table_size_log2: 4,
                bbox_min: [-1.0; 3],
                bbox_max: [1.0; 3],
            },
            mlp: MlpConfig {
                hidden_width: 8,
                hidden_layers: 1,
                activation: Activation::Relu,
            },
            density_bias: -1.0,
        }
    }

    #[test]
    fn fresh_field_is_faint_and_gray() {
        let mut cfg = FieldConfig::default();
        cfg.grid.table_size_log2 = 14;
        let field = RadianceField::new(cfg, 7).unwrap();
        let bias_level = softplus(-1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let points: Vec<[f64; 3]> = (0..10_000)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let samples = field.query_batch(&points);
        let max_tau = samples.iter().map(|s| s.density).fold(0.0, f64::max);
        let min_tau = samples.iter().map(|s| s.density).fold(f64::MAX, f64::min);
        assert!(max_tau < 10.0 * bias_level);
        assert!(max_tau - min_tau < 0.05 * bias_level, "spread {}", max_tau - min_tau);
        let mean_c: f64 = samples.iter().map(|s| s.color.iter().sum::<f64>() / 3.0).sum::<f64>()
            / samples.len() as f64;
        assert!((mean_c - 0.5).abs() < 0.01);
        for s in &samples {
            assert!(s.density.is_finite() && s.density >= 0.0);
            assert!(s.color.iter().all(|c| (0.0..=1.0).contains(c)));
        }
    }

    #[test]
    fn exterior_points_have_zero_density() {
        let field = RadianceField::new(tiny_config(), 1).unwrap();
        assert_eq!(field.query([1.5, 0.0, 0.0]).density, 0.0);
        assert_eq!(field.query([0.0, -1.0001, 0.0]).density, 0.0);
        assert!(field.query([0.0, 0.0, 0.0]).density > 0.0);
    }

    #[test]
    fn identical_points_give_identical_outputs() {
        let field = RadianceField::new(tiny_config(), 9).unwrap();
        let out = field.query_batch(&[[0.2, 0.3, -0.4], [0.9, 0.1, 0.0], [0.2, 0.3, -0.4]]);
        assert_eq!(out[0], out[2]);
    }

    #[test]
    fn from_params_checks_lengths() {
        let cfg = tiny_config();
        assert!(RadianceField::from_params(cfg, vec![0.0; 3], vec![0.0; 3]).is_err());
    }
}
