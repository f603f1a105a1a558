//! The denoiser contract consumed by score distillation, and a synthetic
//! implementation whose optimum is a known image per camera.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{forward_diffuse, NoiseSchedule, Tensor};
use crate::render::{Camera, SphericalPose};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("oracle lacks capability: {0}")]
    MissingCapability(&'static str),
    #[error("oracle needs camera conditioning")]
    MissingCamera,
    #[error("oracle shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("timestep {0} has zero noise level")]
    DegenerateTimestep(usize),
    #[error("empty adaptation batch")]
    EmptyBatch,
    #[error("oracle unreachable: {0}")]
    Connection(String),
    #[error("oracle returned HTTP {status}: {message}")]
    Remote { status: u16, message: String },
    #[error("oracle protocol violation: {0}")]
    Protocol(String),
}

impl OracleError {
    /// Transport-level failures (as opposed to contract violations).
    pub fn is_connectivity(&self) -> bool {
        matches!(self, OracleError::Connection(_))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub view_conditioned: bool,
    pub text_conditioned: bool,
    pub adaptable: bool,
}

impl Capabilities {
    pub const VIEW: Capabilities = Capabilities {
        view_conditioned: true,
        text_conditioned: false,
        adaptable: false,
    };
    pub const TEXT: Capabilities = Capabilities {
        view_conditioned: false,
        text_conditioned: true,
        adaptable: false,
    };
    pub const NONE: Capabilities = Capabilities {
        view_conditioned: false,
        text_conditioned: false,
        adaptable: false,
    };

    pub fn with_adaptable(mut self) -> Self {
        self.adaptable = true;
        self
    }

    /// Wire names, in fixed order.
    pub fn names(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.view_conditioned {
            out.push("view-conditioned");
        }
        if self.text_conditioned {
            out.push("text-conditioned");
        }
        if self.adaptable {
            out.push("adaptable");
        }
        out
    }

    pub fn from_names<'a>(names: impl IntoIterator<Item = &'a str>) -> Result<Self, String> {
        let mut caps = Capabilities::NONE;
        for n in names {
            match n {
                "view-conditioned" => caps.view_conditioned = true,
                "text-conditioned" => caps.text_conditioned = true,
                "adaptable" => caps.adaptable = true,
                other => return Err(format!("unknown capability {other:?}")),
            }
        }
        Ok(caps)
    }
}

/// What a denoiser call is conditioned on.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Conditioning {
    pub camera: Option<Camera>,
    /// Camera pose relative to the reference view.
    pub relative_pose: Option<SphericalPose>,
    pub prompt: Option<String>,
    pub guidance_scale: f64,
}

impl Conditioning {
    pub fn for_camera(camera: &Camera, reference: &Camera) -> Self {
        Self {
            camera: Some(*camera),
            relative_pose: Some(camera.pose.relative_to(&reference.pose)),
            prompt: None,
            guidance_scale: 1.0,
        }
    }
}

/// One freshly noised observation for an adapter update.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptSample {
    pub x_t: Tensor,
    pub t: usize,
    pub eps: Tensor,
    pub weight: f64,
    pub conditioning: Conditioning,
}

/// ε-predicting denoiser. Calls are blocking and take `&mut self`, so one
/// instance never serves two requests at once.
pub trait GuidanceOracle: Send {
    fn capabilities(&self) -> Capabilities;

    /// Working-space shape for an image of the given shape. Identity by default.
    fn latent_shape(&mut self, image_shape: &[usize]) -> Result<Vec<usize>, OracleError> {
        Ok(image_shape.to_vec())
    }

    fn encode(&mut self, image: &Tensor) -> Result<Tensor, OracleError> {
        Ok(image.clone())
    }

    fn decode(&mut self, latent: &Tensor) -> Result<Tensor, OracleError> {
        Ok(latent.clone())
    }

    fn predict_eps(
        &mut self,
        x_t: &Tensor,
        t: usize,
        conditioning: &Conditioning,
    ) -> Result<Tensor, OracleError>;

    /// One gradient step on the adapter; returns the pre-step loss.
    fn adapt(&mut self, _batch: &[AdaptSample]) -> Result<f64, OracleError> {
        Err(OracleError::MissingCapability("adaptable"))
    }

    /// Current adapter parameters, if the oracle has any.
    fn adapter_params(&self) -> Option<Vec<f64>> {
        None
    }
}

impl<O: GuidanceOracle + ?Sized> GuidanceOracle for Box<O> {
    fn capabilities(&self) -> Capabilities {
        (**self).capabilities()
    }
    fn latent_shape(&mut self, image_shape: &[usize]) -> Result<Vec<usize>, OracleError> {
        (**self).latent_shape(image_shape)
    }
    fn encode(&mut self, image: &Tensor) -> Result<Tensor, OracleError> {
        (**self).encode(image)
    }
    fn decode(&mut self, latent: &Tensor) -> Result<Tensor, OracleError> {
        (**self).decode(latent)
    }
    fn predict_eps(&mut self, x_t: &Tensor, t: usize, c: &Conditioning) -> Result<Tensor, OracleError> {
        (**self).predict_eps(x_t, t, c)
    }
    fn adapt(&mut self, batch: &[AdaptSample]) -> Result<f64, OracleError> {
        (**self).adapt(batch)
    }
    fn adapter_params(&self) -> Option<Vec<f64>> {
        (**self).adapter_params()
    }
}

/// Per-channel affine residual `scale_c · x_t + bias_c` added to the base
/// prediction. Zero parameters leave the base oracle unchanged.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineAdapter {
    pub scale: Vec<f64>,
    pub bias: Vec<f64>,
    pub learning_rate: f64,
}

impl AffineAdapter {
    pub fn new(channels: usize, learning_rate: f64) -> Self {
        Self {
            scale: vec![0.0; channels],
            bias: vec![0.0; channels],
            learning_rate,
        }
    }

    pub fn params(&self) -> Vec<f64> {
        self.scale.iter().chain(&self.bias).copied().collect()
    }

    fn apply(&self, x_t: &Tensor, eps: &mut Tensor) {
        let c = self.scale.len();
        for (i, (e, x)) in eps.data_mut().iter_mut().zip(x_t.data()).enumerate() {
            *e += self.scale[i % c] * x + self.bias[i % c];
        }
    }

    /// Loss `Σ_k w_k · mean((pred_k − ε_k)²) / K` and its gradient, given base predictions.
    fn loss_and_grad(&self, batch: &[AdaptSample], base: &[Tensor]) -> (f64, Vec<f64>, Vec<f64>) {
        let c = self.scale.len();
        let mut loss = 0.0;
        let mut gs = vec![0.0; c];
        let mut gb = vec![0.0; c];
        let k = batch.len() as f64;
        for (s, b) in batch.iter().zip(base) {
            let n = s.x_t.len() as f64;
            for (i, ((x, e), bp)) in s.x_t.data().iter().zip(s.eps.data()).zip(b.data()).enumerate() {
                let ch = i % c;
                let r = bp + self.scale[ch] * x + self.bias[ch] - e;
                loss += s.weight * r * r / (n * k);
                let g = 2.0 * s.weight * r / (n * k);
                gs[ch] += g * x;
                gb[ch] += g;
            }
        }
        (loss, gs, gb)
    }
}

pub type TargetFn = Arc<dyn Fn(&Camera) -> Tensor + Send + Sync>;

/// Synthetic denoiser whose clean-image estimate is always a fixed target
/// image `X(camera)`: `ε̂ = (x_t − α_t X) / σ_t`.
#[derive(Clone)]
pub struct TargetImageOracle {
    schedule: NoiseSchedule,
    target: TargetFn,
    capabilities: Capabilities,
    adapter: Option<AffineAdapter>,
}

impl fmt::Debug for TargetImageOracle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TargetImageOracle")
            .field("capabilities", &self.capabilities)
            .field("adapter", &self.adapter)
            .finish_non_exhaustive()
    }
}

impl TargetImageOracle {
    pub fn new(schedule: NoiseSchedule, capabilities: Capabilities, target: TargetFn) -> Self {
        let adapter = capabilities.adaptable.then(|| AffineAdapter::new(3, 1e-3));
        Self {
            schedule,
            target,
            capabilities,
            adapter,
        }
    }

    /// Replaces the adapter (and marks the oracle adaptable).
    pub fn with_adapter(mut self, adapter: AffineAdapter) -> Self {
        self.capabilities.adaptable = true;
        self.adapter = Some(adapter);
        self
    }

    pub fn adapter(&self) -> Option<&AffineAdapter> {
        self.adapter.as_ref()
    }

    pub fn target(&self, camera: &Camera) -> Tensor {
        (self.target)(camera)
    }

    fn base_prediction(&self, x_t: &Tensor, t: usize, cond: &Conditioning) -> Result<Tensor, OracleError> {
        let camera = cond.camera.as_ref().ok_or(OracleError::MissingCamera)?;
        if t >= self.schedule.num_steps() {
            return Err(OracleError::DegenerateTimestep(t));
        }
        let sigma = self.schedule.sigma(t);
        if sigma <= 0.0 {
            return Err(OracleError::DegenerateTimestep(t));
        }
        let alpha = self.schedule.alpha(t);
        let target = (self.target)(camera);
        if target.shape() != x_t.shape() {
            return Err(OracleError::ShapeMismatch {
                expected: target.shape().to_vec(),
                got: x_t.shape().to_vec(),
            });
        }
        let data = x_t
            .data()
            .iter()
            .zip(target.data())
            .map(|(x, y)| (x - alpha * y) / sigma)
            .collect();
        Ok(Tensor::new(x_t.shape().to_vec(), data).expect("shape preserved"))
    }
}

impl GuidanceOracle for TargetImageOracle {
    fn capabilities(&self) -> Capabilities {
        self.capabilities
    }

    fn predict_eps(&mut self, x_t: &Tensor, t: usize, cond: &Conditioning) -> Result<Tensor, OracleError> {
        let mut eps = self.base_prediction(x_t, t, cond)?;
        if let Some(adapter) = &self.adapter {
            adapter.apply(x_t, &mut eps);
        }
        Ok(eps)
    }

    fn adapt(&mut self, batch: &[AdaptSample]) -> Result<f64, OracleError> {
        if !self.capabilities.adaptable {
            return Err(OracleError::MissingCapability("adaptable"));
        }
        if batch.is_empty() {
            return Err(OracleError::EmptyBatch);
        }
        let base = batch
            .iter()
            .map(|s| {
                s.x_t.check_same_shape(&s.eps).map_err(|_| OracleError::ShapeMismatch {
                    expected: s.x_t.shape().to_vec(),
                    got: s.eps.shape().to_vec(),
                })?;
                self.base_prediction(&s.x_t, s.t, &s.conditioning)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let adapter = self.adapter.get_or_insert_with(|| AffineAdapter::new(3, 1e-3));
        let (loss, gs, gb) = adapter.loss_and_grad(batch, &base);
        let lr = adapter.learning_rate;
        for (p, g) in adapter.scale.iter_mut().zip(&gs) {
            *p -= lr * g;
        }
        for (p, g) in adapter.bias.iter_mut().zip(&gb) {
            *p -= lr * g;
        }
        Ok(loss)
    }

    fn adapter_params(&self) -> Option<Vec<f64>> {
        self.adapter.as_ref().map(AffineAdapter::params)
    }
}

/// Noises each render (after encoding through the oracle's codec) at a fresh
/// timestep and takes one adapter step. Returns the pre-step loss.
pub fn adapt_oracle<O: GuidanceOracle + ?Sized, R: Rng + ?Sized>(
    oracle: &mut O,
    renders: &[Tensor],
    conditionings: &[Conditioning],
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<f64, OracleError> {
    if !oracle.capabilities().adaptable {
        return Err(OracleError::MissingCapability("adaptable"));
    }
    if renders.is_empty() {
        return Err(OracleError::EmptyBatch);
    }
    assert_eq!(renders.len(), conditionings.len());
    let mut batch = Vec::with_capacity(renders.len());
    for (render, cond) in renders.iter().zip(conditionings) {
        let z0 = oracle.encode(render)?;
        let t = schedule.sample_timestep(rng);
        let eps = Tensor::randn(z0.shape().to_vec(), rng);
        let x_t = forward_diffuse(&z0, t, &eps, schedule).expect("eps drawn with latent shape");
        batch.push(AdaptSample {
            x_t,
            t,
            eps,
            weight: schedule.weight(t),
            conditioning: cond.clone(),
        });
    }
    oracle.adapt(&batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{build_schedule, sds_grad, ScheduleProfile, Weighting};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn camera() -> Camera {
        Camera::new(SphericalPose::new(2.0, 1.4, 0.2), 0.8, 4, 3, 0.5, 3.5).unwrap()
    }

    fn schedule() -> NoiseSchedule {
        build_schedule(1000, ScheduleProfile::Cosine, Weighting::SigmaSquared).unwrap()
    }

    fn target_image() -> Tensor {
        let data = (0..36).map(|i| ((i * 13 % 17) as f64) / 17.0).collect();
        Tensor::new(vec![3, 4, 3], data).unwrap()
    }

    fn oracle(caps: Capabilities) -> TargetImageOracle {
        let img = target_image();
        TargetImageOracle::new(schedule(), caps, Arc::new(move |_c: &Camera| img.clone()))
    }

    fn cond() -> Conditioning {
        Conditioning::for_camera(&camera(), &camera())
    }

    #[test]
    fn recovers_injected_noise_from_target() {
        let mut o = oracle(Capabilities::VIEW);
        let s = schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let eps = Tensor::randn(vec![3, 4, 3], &mut rng);
        let x_t = forward_diffuse(&target_image(), 300, &eps, &s).unwrap();
        let pred = o.predict_eps(&x_t, 300, &cond()).unwrap();
        for (a, b) in pred.data().iter().zip(eps.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn scaled_target_gives_zero_prediction() {
        let mut o = oracle(Capabilities::VIEW);
        let s = schedule();
        let x0 = target_image();
        let x_t = Tensor::new(
            x0.shape().to_vec(),
            x0.data().iter().map(|v| v * s.alpha(640)).collect(),
        )
        .unwrap();
        let pred = o.predict_eps(&x_t, 640, &cond()).unwrap();
        assert!(pred.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn zero_noise_timestep_rejected() {
        // a schedule whose first step is noise-free
        let mut o = TargetImageOracle::new(
            build_schedule(10, ScheduleProfile::Cosine, Weighting::Unit).unwrap(),
            Capabilities::VIEW,
            Arc::new(|_c: &Camera| Tensor::zeros(vec![1, 1, 3])),
        );
        assert!(o.predict_eps(&Tensor::zeros(vec![1, 1, 3]), 10, &cond()).is_err());
        let mut no_cam = cond();
        no_cam.camera = None;
        assert!(matches!(
            o.predict_eps(&Tensor::zeros(vec![1, 1, 3]), 3, &no_cam),
            Err(OracleError::MissingCamera)
        ));
    }

    #[test]
    fn zero_adapter_matches_base() {
        let mut base = oracle(Capabilities::TEXT);
        let mut adapted = oracle(Capabilities::TEXT.with_adaptable());
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x_t = Tensor::randn(vec![3, 4, 3], &mut rng);
        assert_eq!(
            base.predict_eps(&x_t, 400, &cond()).unwrap(),
            adapted.predict_eps(&x_t, 400, &cond()).unwrap()
        );
    }

    #[test]
    fn adaptation_needs_capability_and_samples() {
        let mut o = oracle(Capabilities::NONE);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = adapt_oracle(&mut o, &[target_image()], &[cond()], &schedule(), &mut rng);
        assert!(matches!(err, Err(OracleError::MissingCapability(_))));
        let mut o = oracle(Capabilities::TEXT.with_adaptable());
        assert!(matches!(
            adapt_oracle(&mut o, &[], &[], &schedule(), &mut rng),
            Err(OracleError::EmptyBatch)
        ));
    }

    #[test]
    fn adaptation_reduces_its_loss() {
        // renders are the target tinted by a constant per-channel offset
        let tint = [0.3, -0.2, 0.15];
        let s = schedule();
        let mut o = oracle(Capabilities::TEXT.with_adaptable()).with_adapter(AffineAdapter::new(3, 0.05));
        let render = {
            let t = target_image();
            let data = t.data().iter().enumerate().map(|(i, v)| v + tint[i % 3]).collect();
            Tensor::new(t.shape().to_vec(), data).unwrap()
        };
        let renders = vec![render; 8];
        let conds = vec![cond(); 8];
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        // average over a few steps on both ends to smooth timestep noise
        let mut losses = Vec::new();
        for _ in 0..200 {
            losses.push(adapt_oracle(&mut o, &renders, &conds, &s, &mut rng).unwrap());
        }
        let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = losses[190..].iter().sum::<f64>() / 10.0;
        assert!(tail <= 0.7 * head, "adaptation loss {head} -> {tail}");
    }

    #[test]
    fn sds_direction_is_residual_to_target() {
        let mut o = oracle(Capabilities::VIEW);
        let s = schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = Tensor::randn(vec![3, 4, 3], &mut rng);
        let eps = Tensor::randn(vec![3, 4, 3], &mut rng);
        let t = 500;
        let x_t = forward_diffuse(&x0, t, &eps, &s).unwrap();
        let pred = o.predict_eps(&x_t, t, &cond()).unwrap();
        let g = sds_grad(&x0, t, &eps, &pred, &s).unwrap();
        let k = s.weight(t) * s.alpha(t) / s.sigma(t);
        for ((gv, xv), yv) in g.data().iter().zip(x0.data()).zip(target_image().data()) {
            assert!((gv - k * (xv - yv)).abs() < 1e-9);
        }
    }
}
