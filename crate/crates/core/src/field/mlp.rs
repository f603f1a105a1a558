//! Small fully connected network mapping encoded features to four raw outputs
//! (density logit and three color logits).

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::FieldError;

pub const MLP_OUTPUTS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Softplus,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Softplus => softplus(x),
        }
    }

    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus => sigmoid(pre),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub hidden_width: usize,
    pub hidden_layers: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden_width: 64,
            hidden_layers: 2,
            activation: Activation::Relu,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layer {
    inputs: usize,
    outputs: usize,
    /// Row-major `outputs x inputs` weights start here; biases follow.
    offset: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
    activation: Activation,
    param_count: usize,
}

/// Per-evaluation activations kept for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct MlpScratch {
    /// `values[0]` is the input; `values[k]` is the post-activation of layer `k - 1`.
    values: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_next: Vec<f64>,
}

impl Mlp {
    pub fn new(input_dim: usize, config: &MlpConfig) -> Result<Self, FieldError> {
        if config.hidden_width == 0 && config.hidden_layers > 0 {
            return Err(FieldError::InvalidConfig(
                "hidden_width must be positive".into(),
            ));
        }
        let mut dims = vec![input_dim];
        dims.extend(std::iter::repeat(config.hidden_width).take(config.hidden_layers));
        dims.push(MLP_OUTPUTS);
        let mut offset = 0;
        let layers = dims
            .windows(2)
            .map(|w| {
                let layer = Layer {
                    inputs: w[0],
                    outputs: w[1],
                    offset,
                };
                offset += w[0] * w[1] + w[1];
                layer
            })
            .collect();
        Ok(Self {
            layers,
            activation: config.activation,
            param_count: offset,
        })
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    /// He-uniform weights, zero biases.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f32> {
        let mut params = vec![0.0f32; self.param_count];
        for layer in &self.layers {
            let bound = (6.0 / layer.inputs.max(1) as f64).sqrt();
            for w in &mut params[layer.offset..layer.offset + layer.inputs * layer.outputs] {
                *w = rng.gen_range(-bound..bound) as f32;
            }
        }
        params
    }

    pub fn scratch(&self) -> MlpScratch {
        let mut values = vec![vec![0.0; self.layers[0].inputs]];
        let mut pre = Vec::new();
        for layer in &self.layers {
            values.push(vec![0.0; layer.outputs]);
            pre.push(vec![0.0; layer.outputs]);
        }
        let widest = self
            .layers
            .iter()
            .map(|l| l.inputs.max(l.outputs))
            .max()
            .unwrap_or(0);
        MlpScratch {
            values,
            pre,
            delta: vec![0.0; widest],
            delta_next: vec![0.0; widest],
        }
    }

    pub fn input_mut<'a>(&self, scratch: &'a mut MlpScratch) -> &'a mut [f64] {
        &mut scratch.values[0]
    }

    /// Evaluates the network on `scratch`'s input, returning raw outputs.
    pub fn forward(&self, params: &[f32], scratch: &mut MlpScratch) -> [f64; MLP_OUTPUTS] {
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let (head, tail) = scratch.values.split_at_mut(k + 1);
            let input = &head[k];
            let output = &mut tail[0];
            let pre = &mut scratch.pre[k];
            let weights = &params[layer.offset..layer.offset + layer.inputs * layer.outputs];
            let biases = &params[layer.offset + layer.inputs * layer.outputs..][..layer.outputs];
            for o in 0..layer.outputs {
                let row = &weights[o * layer.inputs..(o + 1) * layer.inputs];
                let acc = biases[o] as f64 + dot(row, input);
                pre[o] = acc;
                output[o] = if k == last {
                    acc
                } else {
                    self.activation.apply(acc)
                };
            }
        }
        let out = &scratch.values[last + 1];
        [out[0], out[1], out[2], out[3]]
    }

    /// Backpropagates `d_out` through the activations recorded by the last
    /// [`forward`](Self::forward), accumulating into `grad` and writing the
    /// input gradient into `d_input`.
    pub fn backward(
        &self,
        params: &[f32],
        scratch: &mut MlpScratch,
        d_out: [f64; MLP_OUTPUTS],
        grad: &mut [f64],
        d_input: &mut [f64],
    ) {
        let MlpScratch {
            values,
            pre,
            delta,
            delta_next,
        } = scratch;
        delta[..MLP_OUTPUTS].copy_from_slice(&d_out);
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate().rev() {
            if k != last {
                for o in 0..layer.outputs {
                    delta[o] *= self.activation.derivative(pre[k][o]);
                }
            }
            let input = &values[k];
            let w_off = layer.offset;
            let b_off = layer.offset + layer.inputs * layer.outputs;
            delta_next[..layer.inputs].fill(0.0);
            for o in 0..layer.outputs {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                grad[b_off + o] += d;
                let row = w_off + o * layer.inputs;
                let g = &mut grad[row..row + layer.inputs];
                let w = &params[row..row + layer.inputs];
                for ((g, dn), (x, w)) in g
                    .iter_mut()
                    .zip(delta_next[..layer.inputs].iter_mut())
                    .zip(input.iter().zip(w))
                {
                    *g += d * x;
                    *dn += d * *w as f64;
                }
            }
            std::mem::swap(delta, delta_next);
        }
        d_input.copy_from_slice(&delta[..self.layers[0].inputs]);
    }
}

/// Dot product with four interleaved partial sums, combined in a fixed order.
#[inline]
fn dot(w: &[f32], x: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (wc, xc) = (w.chunks_exact(4), x.chunks_exact(4));
    let tail: f64 = wc
        .remainder()
        .iter()
        .zip(xc.remainder())
        .map(|(w, x)| *w as f64 * x)
        .sum();
    for (w4, x4) in wc.zip(xc) {
        for j in 0..4 {
            acc[j] += w4[j] as f64 * x4[j];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
