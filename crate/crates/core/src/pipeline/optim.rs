use serde::{Deserialize, Serialize};

use crate::field::{FieldGrad, RadianceField};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr_grid: f64,
    pub lr_mlp: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr_grid: 1e-2,
            lr_mlp: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-15,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), String> {
        let ok = self.lr_grid >= 0.0
            && self.lr_mlp >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && [self.lr_grid, self.lr_mlp, self.eps].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(format!("invalid optimizer settings {self:?}"))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Moments {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn update(&mut self, params: &mut [f32], grad: &[f64], lr: f64, cfg: &AdamConfig, step: i32) {
        assert_eq!(params.len(), grad.len());
        let c1 = 1.0 - cfg.beta1.powi(step);
        let c2 = 1.0 - cfg.beta2.powi(step);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let step = lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
            *p = (*p as f64 - step) as f32;
        }
    }
}

/// Adam with separate learning rates for grid and MLP parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    config: AdamConfig,
    steps: u32,
    grid: Moments,
    mlp: Moments,
}

impl Adam {
    pub fn new(field: &RadianceField, config: AdamConfig) -> Self {
        Self {
            config,
            steps: 0,
            grid: Moments::new(field.grid_params().len()),
            mlp: Moments::new(field.mlp_params().len()),
        }
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }

    pub fn step(&mut self, field: &mut RadianceField, grad: &FieldGrad) {
        self.steps += 1;
        let t = self.steps.min(i32::MAX as u32) as i32;
        let cfg = self.config;
        self.grid.update(field.grid_params_mut(), &grad.grid, cfg.lr_grid, &cfg, t);
        self.mlp.update(field.mlp_params_mut(), &grad.mlp, cfg.lr_mlp, &cfg, t);
    }
}
