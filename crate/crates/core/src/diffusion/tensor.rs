use rand::Rng;
use rand_distr::StandardNormal;

use super::DiffusionError;

/// Dense row-major tensor. Images are `[height, width, 3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, DiffusionError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(DiffusionError::ShapeMismatch {
                expected: shape,
                got: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn image(height: usize, width: usize, rgb: Vec<f64>) -> Result<Self, DiffusionError> {
        Self::new(vec![height, width, 3], rgb)
    }

    /// Standard normal draws.
    pub fn randn<R: Rng + ?Sized>(shape: Vec<usize>, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the innermost axis, treated as channels.
    pub fn channels(&self) -> usize {
        self.shape.last().copied().unwrap_or(1).max(1)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_same_shape(&self, other: &Tensor) -> Result<(), DiffusionError> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(DiffusionError::ShapeMismatch {
                expected: self.shape.clone(),
                got: other.shape.clone(),
            })
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}
