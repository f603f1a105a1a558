//! Two-stage optimization: a geometry stage driven by a view-conditioned
//! oracle plus reference supervision, then a texture stage driven by a
//! text-conditioned oracle with opacity regularization and alternating
//! oracle adaptation.

mod cameras;
mod config;
mod eval;
mod mesh;
mod optim;

pub use cameras::{held_out_cameras, orbit_cameras, sample_camera, CameraPolicy, SCENE_BOUND};
pub use config::{
    build_oracles, run_pipeline, run_pipeline_with, CameraOverrides, InputsConfig, OracleConfig, OracleKind,
    OutputConfig, PipelineConfig, RunMetrics, RunOutcome, StageConfig, StageOracle,
};
pub use eval::{
    depth_correlation, evaluate, evaluate_views, hausdorff_to_scene, mask_iou, off_component_mass, psnr,
    EvalReport, ViewMetrics,
};
pub use mesh::{default_iso_level, extract_mesh, obj_string, write_obj, Mesh};
pub use optim::{Adam, AdamConfig};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{
    adapt_oracle, forward_diffuse, predicted_clean, sds_grad, sds_grad_via_decode, Conditioning, GuidanceOracle,
    NoiseSchedule, OracleError, Tensor,
};
use crate::field::{CheckpointError, RadianceField};
use crate::losses::{
    depth_pearson_loss_with_grad, normal_smoothness_loss_with_grad, opacity_regularization_with_grad,
    reconstruction_loss_with_grad, LossError, LossWeights, ReferenceBundle, DEFAULT_OPACITY_THRESHOLD,
};
use crate::render::{render_backward, render_field_traced, Camera, RenderGrad, RenderOptions, Sampling};
use crate::scene::SceneError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("stage {stage} iteration {iteration}: oracle: {source}")]
    Oracle {
        stage: u8,
        iteration: usize,
        #[source]
        source: OracleError,
    },
    #[error("stage {stage} iteration {iteration}: non-finite {what}")]
    Numerical { stage: u8, iteration: usize, what: String },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("stage {stage} iteration {iteration}: {source}")]
    Loss {
        stage: u8,
        iteration: usize,
        #[source]
        source: LossError,
    },
}

impl PipelineError {
    /// 1 for configuration and input problems, 2 for oracle failures,
    /// 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Oracle { .. } => 2,
            Self::Numerical { .. } => 3,
            _ => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Sds3d,
    Sds2d,
    Rec,
    Depth,
    Normal,
    OpacityReg,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        Self::Sds3d,
        Self::Sds2d,
        Self::Rec,
        Self::Depth,
        Self::Normal,
        Self::OpacityReg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Sds3d => "sds3d",
            Self::Sds2d => "sds2d",
            Self::Rec => "rec",
            Self::Depth => "depth",
            Self::Normal => "normal",
            Self::OpacityReg => "opacity-reg",
        }
    }

    /// Terms that need the reference bundle and only apply on reference draws.
    pub fn is_reference_term(self) -> bool {
        matches!(self, Self::Rec | Self::Depth | Self::Normal)
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Settings for one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StagePlan {
    pub iterations: usize,
    pub enabled_losses: BTreeSet<LossKind>,
    pub loss_weights: LossWeights,
    pub camera_policy: CameraPolicy,
    pub render_resolution: usize,
    pub samples_per_ray: usize,
    /// Adapter update period in iterations; 0 disables adaptation.
    pub adapt_every: usize,
    /// Opacity at or above which a pixel counts as object for regularization.
    pub reg_threshold: f64,
    pub optimizer: AdamConfig,
    pub background: [f64; 3],
    pub workers: usize,
}

impl StagePlan {
    /// Geometry stage: 300 iterations of view-conditioned SDS with
    /// reconstruction, depth and normal terms.
    pub fn stage1() -> Self {
        Self {
            iterations: 300,
            enabled_losses: [LossKind::Sds3d, LossKind::Rec, LossKind::Depth, LossKind::Normal].into(),
            loss_weights: LossWeights::default(),
            camera_policy: CameraPolicy::default(),
            render_resolution: 256,
            samples_per_ray: 64,
            adapt_every: 0,
            reg_threshold: DEFAULT_OPACITY_THRESHOLD,
            optimizer: AdamConfig::default(),
            background: [1.0; 3],
            workers: 1,
        }
    }

    /// Texture stage: 1000 iterations of text-conditioned SDS with opacity
    /// regularization, adapting the oracle every iteration.
    pub fn stage2() -> Self {
        Self {
            iterations: 1000,
            enabled_losses: [LossKind::Sds2d, LossKind::OpacityReg].into(),
            camera_policy: CameraPolicy::default().with_reference_fraction(0.0),
            adapt_every: 1,
            ..Self::stage1()
        }
    }

    pub fn with_iterations(mut self, iterations: usize) -> Self {
        self.iterations = iterations;
        self
    }

    pub fn with_resolution(mut self, resolution: usize) -> Self {
        self.render_resolution = resolution;
        self
    }

    pub fn with_samples(mut self, samples_per_ray: usize) -> Self {
        self.samples_per_ray = samples_per_ray;
        self
    }

    pub fn with_losses(mut self, losses: impl IntoIterator<Item = LossKind>) -> Self {
        self.enabled_losses = losses.into_iter().collect();
        self
    }

    pub fn enables(&self, kind: LossKind) -> bool {
        self.enabled_losses.contains(&kind)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.iterations == 0 {
            return Err("iterations must be at least 1".into());
        }
        if self.render_resolution < 16 {
            return Err(format!("resolution {} is below the minimum of 16", self.render_resolution));
        }
        if self.samples_per_ray < 2 {
            return Err("samples_per_ray must be at least 2".into());
        }
        if !(self.reg_threshold > 0.0 && self.reg_threshold <= 1.0) {
            return Err(format!("reg_threshold {} outside (0, 1]", self.reg_threshold));
        }
        if self.workers == 0 {
            return Err("workers must be at least 1".into());
        }
        self.camera_policy.validate()?;
        self.optimizer.validate()?;
        self.loss_weights.validate().map_err(|e| e.to_string())
    }
}

/// One iteration's bookkeeping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: u8,
    /// Index within the whole run; stage 2 continues where stage 1 ended.
    pub iteration: usize,
    /// Exactly the enabled terms; `None` when a term did not apply this step.
    pub losses: BTreeMap<String, Option<f64>>,
    pub grad_norm: f64,
    pub timestep: Option<usize>,
    /// `[radius, polar, azimuth]` of the training camera.
    pub camera: [f64; 3],
    pub reference_view: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adapt_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<ViewMetrics>,
}

/// Mutable state a stage threads through its steps.
pub struct StageState<'a> {
    pub stage: u8,
    pub plan: &'a StagePlan,
    pub schedule: &'a NoiseSchedule,
    pub reference_camera: Camera,
    pub prompt: Option<String>,
    pub guidance_scale: f64,
    pub optimizer: Adam,
    /// Global index of the next step.
    pub iteration: usize,
}

impl<'a> StageState<'a> {
    pub fn new(
        stage: u8,
        plan: &'a StagePlan,
        schedule: &'a NoiseSchedule,
        reference_camera: Camera,
        field: &RadianceField,
    ) -> Self {
        Self {
            stage,
            plan,
            schedule,
            reference_camera: reference_camera.with_resolution(plan.render_resolution, plan.render_resolution),
            prompt: None,
            guidance_scale: 1.0,
            optimizer: Adam::new(field, plan.optimizer),
            iteration: 0,
        }
    }

    pub fn with_conditioning(mut self, prompt: Option<String>, guidance_scale: f64) -> Self {
        self.prompt = prompt;
        self.guidance_scale = guidance_scale;
        self
    }

    pub fn starting_at(mut self, iteration: usize) -> Self {
        self.iteration = iteration;
        self
    }

    fn oracle_err(&self, source: OracleError) -> PipelineError {
        PipelineError::Oracle {
            stage: self.stage,
            iteration: self.iteration,
            source,
        }
    }

    fn numerical(&self, what: &str) -> PipelineError {
        PipelineError::Numerical {
            stage: self.stage,
            iteration: self.iteration,
            what: what.to_string(),
        }
    }

    fn loss_err(&self, source: LossError) -> PipelineError {
        PipelineError::Loss {
            stage: self.stage,
            iteration: self.iteration,
            source,
        }
    }
}

/// Result of one SDS evaluation on a rendered image.
pub struct SdsSample {
    /// Image-space gradient, same shape as the image.
    pub grad: Tensor,
    pub timestep: usize,
    /// Mean squared noise residual `mean((ε̂ − ε)²)`.
    pub residual: f64,
}

/// Draws `t` and `ε`, queries the oracle and returns the image-space SDS
/// gradient. Oracles whose working space has the image's shape are treated
/// as pixel-space; otherwise the image is encoded, and the clean estimate is
/// decoded back for comparison.
pub fn sds_step<O: GuidanceOracle + ?Sized, R: Rng + ?Sized>(
    oracle: &mut O,
    image: &Tensor,
    conditioning: &Conditioning,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<SdsSample, OracleError> {
    let latent_shape = oracle.latent_shape(image.shape())?;
    let t = schedule.sample_timestep(rng);
    let shape_err = |e: crate::diffusion::DiffusionError| OracleError::Protocol(e.to_string());
    if latent_shape == image.shape() {
        let eps = Tensor::randn(image.shape().to_vec(), rng);
        let x_t = forward_diffuse(image, t, &eps, schedule).map_err(shape_err)?;
        let eps_pred = oracle.predict_eps(&x_t, t, conditioning)?;
        if eps_pred.shape() != eps.shape() {
            return Err(OracleError::ShapeMismatch {
                expected: eps.shape().to_vec(),
                got: eps_pred.shape().to_vec(),
            });
        }
        let residual = mean_sq_diff(&eps_pred, &eps);
        let grad = sds_grad(image, t, &eps, &eps_pred, schedule).map_err(shape_err)?;
        return Ok(SdsSample {
            grad,
            timestep: t,
            residual,
        });
    }
    let z0 = oracle.encode(image)?;
    let eps = Tensor::randn(z0.shape().to_vec(), rng);
    let z_t = forward_diffuse(&z0, t, &eps, schedule).map_err(shape_err)?;
    let eps_pred = oracle.predict_eps(&z_t, t, conditioning)?;
    if eps_pred.shape() != eps.shape() {
        return Err(OracleError::ShapeMismatch {
            expected: eps.shape().to_vec(),
            got: eps_pred.shape().to_vec(),
        });
    }
    let residual = mean_sq_diff(&eps_pred, &eps);
    let z0_hat = predicted_clean(&z_t, t, &eps_pred, schedule).map_err(shape_err)?;
    let decoded = oracle.decode(&z0_hat)?;
    if decoded.shape() != image.shape() {
        return Err(OracleError::ShapeMismatch {
            expected: image.shape().to_vec(),
            got: decoded.shape().to_vec(),
        });
    }
    let grad = sds_grad_via_decode(image, &decoded, t, schedule).map_err(shape_err)?;
    Ok(SdsSample {
        grad,
        timestep: t,
        residual,
    })
}

fn mean_sq_diff(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.len().max(1) as f64;
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n
}

fn enabled_keys(plan: &StagePlan) -> BTreeMap<String, Option<f64>> {
    plan.enabled_losses.iter().map(|k| (k.name().to_string(), None)).collect()
}

/// Shared body of both stages. `sds` selects which SDS term the stage uses.
fn step_impl<O: GuidanceOracle + ?Sized, R: Rng + ?Sized>(
    field: &mut RadianceField,
    reference: Option<&ReferenceBundle>,
    oracle: &mut O,
    state: &mut StageState<'_>,
    sds: LossKind,
    rng: &mut R,
) -> Result<StepRecord, PipelineError> {
    let plan = state.plan;
    let weights = plan.loss_weights;
    let (camera, reference_view) = sample_camera(&plan.camera_policy, &state.reference_camera, rng);
    let jitter: u64 = rng.gen();
    let options = RenderOptions::default()
        .with_samples(plan.samples_per_ray)
        .with_sampling(Sampling::Jittered(jitter))
        .with_background(plan.background)
        .with_workers(plan.workers);
    let (out, trace) = render_field_traced(field, &camera, &options);
    if !out.color.iter().chain(&out.depth).chain(&out.opacity).all(|v| v.is_finite()) {
        return Err(state.numerical("render"));
    }
    let mut grad = RenderGrad::zeros(&out);
    let mut losses = enabled_keys(plan);
    let mut timestep = None;

    let mut conditioning = Conditioning::for_camera(&camera, &state.reference_camera);
    conditioning.prompt = state.prompt.clone();
    conditioning.guidance_scale = state.guidance_scale;
    let image = Tensor::image(out.height, out.width, out.color.clone()).expect("render buffers are consistent");

    if plan.enables(sds) {
        let sample = sds_step(oracle, &image, &conditioning, state.schedule, rng).map_err(|e| state.oracle_err(e))?;
        if !sample.grad.is_finite() || !sample.residual.is_finite() {
            return Err(state.numerical("oracle prediction"));
        }
        let scale = weights.lambda_sds;
        for (g, s) in grad.color.iter_mut().zip(sample.grad.data()) {
            *g += scale * s;
        }
        timestep = Some(sample.timestep);
        losses.insert(sds.name().to_string(), Some(sample.residual));
    }

    if reference_view {
        let reference = reference.filter(|_| plan.enabled_losses.iter().any(|k| k.is_reference_term()));
        if let Some(reference) = reference {
            if plan.enables(LossKind::Rec) {
                let l = reconstruction_loss_with_grad(&out, reference, &weights, &mut grad)
                    .map_err(|e| state.loss_err(e))?;
                losses.insert(LossKind::Rec.name().into(), Some(l));
            }
            if plan.enables(LossKind::Depth) {
                let l = depth_pearson_loss_with_grad(&out, reference, weights.lambda_depth, &mut grad)
                    .map_err(|e| state.loss_err(e))?;
                losses.insert(LossKind::Depth.name().into(), Some(l));
            }
            if plan.enables(LossKind::Normal) {
                let l = normal_smoothness_loss_with_grad(&out, weights.lambda_normal, &mut grad);
                losses.insert(LossKind::Normal.name().into(), Some(l));
            }
        }
    }

    if plan.enables(LossKind::OpacityReg) {
        let l = opacity_regularization_with_grad(&out, plan.reg_threshold, weights.lambda_reg, &mut grad);
        losses.insert(LossKind::OpacityReg.name().into(), Some(l));
    }

    let field_grad = render_backward(field, &out, &trace, &grad);
    if !field_grad.is_finite() {
        return Err(state.numerical("gradient"));
    }
    let grad_norm = field_grad.norm();
    state.optimizer.step(field, &field_grad);

    let mut adapt_loss = None;
    if plan.adapt_every > 0 && (state.optimizer.steps() as usize) % plan.adapt_every == 0 && oracle.capabilities().adaptable
    {
        let l = adapt_oracle(oracle, &[image], &[conditioning], state.schedule, rng).map_err(|e| state.oracle_err(e))?;
        if !l.is_finite() {
            return Err(state.numerical("adapter loss"));
        }
        adapt_loss = Some(l);
    }

    let record = StepRecord {
        stage: state.stage,
        iteration: state.iteration,
        losses,
        grad_norm,
        timestep,
        camera: [camera.pose.radius, camera.pose.polar, camera.pose.azimuth],
        reference_view,
        adapt_loss,
        eval: None,
    };
    state.iteration += 1;
    Ok(record)
}

/// Geometry step: view-conditioned SDS on a sampled view plus reference
/// reconstruction, depth correlation and normal smoothness when the
/// reference camera is drawn, followed by one Adam update.
pub fn stage1_step<O: GuidanceOracle + ?Sized, R: Rng + ?Sized>(
    field: &mut RadianceField,
    reference: &ReferenceBundle,
    oracle: &mut O,
    state: &mut StageState<'_>,
    rng: &mut R,
) -> Result<StepRecord, PipelineError> {
    if state.plan.enables(LossKind::Sds3d) && !oracle.capabilities().view_conditioned {
        return Err(state.oracle_err(OracleError::MissingCapability("view-conditioned")));
    }
    step_impl(field, Some(reference), oracle, state, LossKind::Sds3d, rng)
}

/// Texture step: text-conditioned SDS plus opacity regularization, one Adam
/// update, then an adapter update every `adapt_every` steps. The field is
/// not touched during adaptation.
pub fn stage2_step<O: GuidanceOracle + ?Sized, R: Rng + ?Sized>(
    field: &mut RadianceField,
    reference: Option<&ReferenceBundle>,
    oracle: &mut O,
    state: &mut StageState<'_>,
    rng: &mut R,
) -> Result<StepRecord, PipelineError> {
    if state.plan.enables(LossKind::Sds2d) && !oracle.capabilities().text_conditioned {
        return Err(state.oracle_err(OracleError::MissingCapability("text-conditioned")));
    }
    step_impl(field, reference, oracle, state, LossKind::Sds2d, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{build_schedule, Capabilities, ScheduleProfile, TargetFn, TargetImageOracle, Weighting};
    use crate::field::tests::tiny_config;
    use crate::render::render_field;
    use crate::scene::{SceneKind, SceneSpec, Shading};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    /// Predicts exactly the injected noise by replaying the stepper's draws
    /// from a copy of its generator.
    struct ReplayOracle {
        rng: ChaCha8Rng,
        policy: CameraPolicy,
        reference: Camera,
        schedule: NoiseSchedule,
    }

    impl GuidanceOracle for ReplayOracle {
        fn capabilities(&self) -> Capabilities {
            Capabilities::VIEW
        }
        fn predict_eps(&mut self, x_t: &Tensor, _t: usize, _c: &Conditioning) -> Result<Tensor, OracleError> {
            sample_camera(&self.policy, &self.reference, &mut self.rng);
            let _: u64 = self.rng.gen();
            self.schedule.sample_timestep(&mut self.rng);
            Ok(Tensor::randn(x_t.shape().to_vec(), &mut self.rng))
        }
    }

    struct NanOracle;

    impl GuidanceOracle for NanOracle {
        fn capabilities(&self) -> Capabilities {
            Capabilities::VIEW
        }
        fn predict_eps(&mut self, x_t: &Tensor, _t: usize, _c: &Conditioning) -> Result<Tensor, OracleError> {
            Ok(Tensor::new(x_t.shape().to_vec(), vec![f64::NAN; x_t.len()]).unwrap())
        }
    }

    fn schedule() -> NoiseSchedule {
        build_schedule(1000, ScheduleProfile::LinearBeta, Weighting::SigmaSquared).unwrap()
    }

    fn small_plan(base: StagePlan) -> StagePlan {
        base.with_resolution(16).with_samples(8).with_iterations(3)
    }

    fn scene() -> SceneSpec {
        SceneSpec::new(SceneKind::TexturedSphere)
    }

    fn target_oracle(caps: Capabilities, shading: Shading) -> TargetImageOracle {
        let s = scene();
        let target: TargetFn = Arc::new(move |cam: &Camera| {
            let gt = s.render_truth(cam, shading, [1.0; 3]);
            Tensor::image(gt.height, gt.width, gt.color).unwrap()
        });
        TargetImageOracle::new(schedule(), caps, target)
    }

    #[test]
    fn default_budgets_total_1300() {
        assert_eq!(StagePlan::stage1().iterations, 300);
        assert_eq!(StagePlan::stage2().iterations, 1000);
        assert_eq!(StagePlan::stage1().iterations + StagePlan::stage2().iterations, 1300);
        assert_eq!(StagePlan::stage1().camera_policy.reference_fraction, 0.25);
        assert_eq!(StagePlan::stage2().camera_policy.reference_fraction, 0.0);
        assert_eq!(StagePlan::stage2().adapt_every, 1);
    }

    #[test]
    fn plan_validation() {
        assert!(StagePlan::stage1().validate().is_ok());
        assert!(StagePlan::stage1().with_iterations(0).validate().is_err());
        assert!(StagePlan::stage1().with_resolution(15).validate().is_err());
        let mut p = StagePlan::stage1();
        p.camera_policy.reference_fraction = -0.1;
        assert!(p.validate().is_err());
    }

    #[test]
    fn loss_record_contains_exactly_enabled_terms() {
        let spec = scene();
        let plan = small_plan(StagePlan::stage1());
        let sched = schedule();
        let reference = spec.reference_bundle(16, [1.0; 3]).unwrap();
        let mut field = RadianceField::new(tiny_config(), 3).unwrap();
        let mut oracle = target_oracle(Capabilities::VIEW, Shading::Gray);
        let mut state = StageState::new(1, &plan, &sched, reference.camera, &field);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..8 {
            let rec = stage1_step(&mut field, &reference, &mut oracle, &mut state, &mut rng).unwrap();
            let keys: Vec<&str> = rec.losses.keys().map(String::as_str).collect();
            assert_eq!(keys, ["depth", "normal", "rec", "sds3d"]);
            assert!(rec.losses["sds3d"].is_some());
            assert_eq!(rec.losses["rec"].is_some(), rec.reference_view);
        }
        assert_eq!(state.iteration, 8);
    }

    #[test]
    fn mask_term_at_its_optimum_gives_zero_gradient() {
        // saturated density everywhere in the box: every pixel has O = 1 exactly
        let spec = scene();
        let sched = schedule();
        let mut plan = small_plan(StagePlan::stage1());
        plan.loss_weights = LossWeights {
            lambda_mask: 1.0,
            ..LossWeights::zero()
        };
        plan.camera_policy = plan.camera_policy.with_reference_fraction(1.0);
        let mut field = RadianceField::new(tiny_config(), 4).unwrap();
        let n = field.mlp_params().len();
        field.mlp_params_mut().iter_mut().for_each(|p| *p = 0.0);
        field.mlp_params_mut()[n - 4] = 1e4;
        let cam = spec.reference_camera(16);
        let out = render_field(&field, &cam, &RenderOptions::default().with_samples(8));
        assert!(out.opacity.iter().all(|o| *o == 1.0));
        let reference = ReferenceBundle::new(out.color.clone(), vec![true; 256], out.depth.clone(), cam).unwrap();
        let mut oracle = target_oracle(Capabilities::VIEW, Shading::Gray);
        let mut state = StageState::new(1, &plan, &sched, cam, &field);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let before = field.clone();
        let rec = stage1_step(&mut field, &reference, &mut oracle, &mut state, &mut rng).unwrap();
        assert!(rec.reference_view);
        assert_eq!(rec.grad_norm, 0.0);
        assert_eq!(field, before);
    }

    #[test]
    fn exact_noise_prediction_without_regularization_gives_zero_update() {
        let spec = scene();
        let sched = schedule();
        let mut plan = small_plan(StagePlan::stage2()).with_losses([LossKind::Sds2d, LossKind::OpacityReg]);
        plan.loss_weights.lambda_reg = 0.0;
        plan.adapt_every = 0;
        let mut field = RadianceField::new(tiny_config(), 11).unwrap();
        let before = field.clone();
        let reference = spec.reference_camera(16);
        let rng = ChaCha8Rng::seed_from_u64(11);
        let mut oracle = ReplayOracle {
            rng: rng.clone(),
            policy: plan.camera_policy,
            reference,
            schedule: sched.clone(),
        };
        struct TextReplay<'a>(&'a mut ReplayOracle);
        impl GuidanceOracle for TextReplay<'_> {
            fn capabilities(&self) -> Capabilities {
                Capabilities::TEXT
            }
            fn predict_eps(&mut self, x_t: &Tensor, t: usize, c: &Conditioning) -> Result<Tensor, OracleError> {
                self.0.predict_eps(x_t, t, c)
            }
        }
        let mut state = StageState::new(2, &plan, &sched, reference, &field);
        let mut rng = rng;
        for _ in 0..3 {
            let rec = stage2_step(&mut field, None, &mut TextReplay(&mut oracle), &mut state, &mut rng).unwrap();
            assert_eq!(rec.losses["sds2d"], Some(0.0));
            assert_eq!(rec.grad_norm, 0.0);
        }
        assert_eq!(field, before);
    }

    #[test]
    fn nan_oracle_is_a_numerical_failure() {
        let spec = scene();
        let plan = small_plan(StagePlan::stage1());
        let sched = schedule();
        let reference = spec.reference_bundle(16, [1.0; 3]).unwrap();
        let mut field = RadianceField::new(tiny_config(), 7).unwrap();
        let before = field.clone();
        let mut state = StageState::new(1, &plan, &sched, reference.camera, &field);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let err = stage1_step(&mut field, &reference, &mut NanOracle, &mut state, &mut rng).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert_eq!(field, before);
    }

    #[test]
    fn missing_capability_is_reported() {
        let spec = scene();
        let plan = small_plan(StagePlan::stage2());
        let sched = schedule();
        let mut field = RadianceField::new(tiny_config(), 8).unwrap();
        let mut state = StageState::new(2, &plan, &sched, spec.reference_camera(16), &field);
        let mut oracle = target_oracle(Capabilities::VIEW, Shading::Textured);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let err = stage2_step(&mut field, None, &mut oracle, &mut state, &mut rng).unwrap_err();
        assert!(matches!(
            err,
            PipelineError::Oracle {
                source: OracleError::MissingCapability("text-conditioned"),
                ..
            }
        ));
    }

    #[test]
    fn adapt_every_zero_leaves_adapter_untouched() {
        let spec = scene();
        let mut plan = small_plan(StagePlan::stage2());
        plan.adapt_every = 0;
        let sched = schedule();
        let mut field = RadianceField::new(tiny_config(), 9).unwrap();
        let mut state = StageState::new(2, &plan, &sched, spec.reference_camera(16), &field);
        let mut oracle = target_oracle(Capabilities::TEXT.with_adaptable(), Shading::Textured);
        let before = oracle.adapter_params().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..3 {
            let rec = stage2_step(&mut field, None, &mut oracle, &mut state, &mut rng).unwrap();
            assert!(rec.adapt_loss.is_none());
        }
        assert_eq!(oracle.adapter_params().unwrap(), before);
    }

    #[test]
    fn adaptation_moves_the_adapter_every_step() {
        let spec = scene();
        let plan = small_plan(StagePlan::stage2());
        let sched = schedule();
        let mut field = RadianceField::new(tiny_config(), 10).unwrap();
        let mut state = StageState::new(2, &plan, &sched, spec.reference_camera(16), &field);
        let mut oracle = target_oracle(Capabilities::TEXT.with_adaptable(), Shading::Textured);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut last = oracle.adapter_params().unwrap();
        for _ in 0..3 {
            let rec = stage2_step(&mut field, None, &mut oracle, &mut state, &mut rng).unwrap();
            assert!(rec.adapt_loss.is_some());
            let now = oracle.adapter_params().unwrap();
            assert_ne!(now, last);
            last = now;
        }
    }

    #[test]
    fn adaptation_leaves_field_bit_identical() {
        let spec = scene();
        let sched = schedule();
        let field = RadianceField::new(tiny_config(), 12).unwrap();
        let snapshot = field.clone();
        let mut oracle = target_oracle(Capabilities::TEXT.with_adaptable(), Shading::Textured);
        let cam = spec.reference_camera(16);
        let out = render_field(&field, &cam, &RenderOptions::default().with_samples(8));
        let image = Tensor::image(16, 16, out.color).unwrap();
        let cond = Conditioning::for_camera(&cam, &cam);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        adapt_oracle(&mut oracle, &[image], &[cond], &sched, &mut rng).unwrap();
        assert_eq!(field, snapshot);
    }

    #[test]
    fn disabled_terms_ignore_their_inputs() {
        // stage 1 without depth: perturbing the reference depth changes nothing
        let spec = scene();
        let sched = schedule();
        let mut plan = small_plan(StagePlan::stage1()).with_losses([LossKind::Sds3d, LossKind::Rec, LossKind::Normal]);
        plan.camera_policy = plan.camera_policy.with_reference_fraction(1.0);
        let reference = spec.reference_bundle(16, [1.0; 3]).unwrap();
        let mut perturbed = reference.clone();
        perturbed.depth.iter_mut().enumerate().for_each(|(i, d)| *d += (i as f64 * 0.37).sin());
        let run = |r: &ReferenceBundle| {
            let mut field = RadianceField::new(tiny_config(), 13).unwrap();
            let mut oracle = target_oracle(Capabilities::VIEW, Shading::Gray);
            let mut state = StageState::new(1, &plan, &sched, r.camera, &field);
            let mut rng = ChaCha8Rng::seed_from_u64(13);
            for _ in 0..3 {
                stage1_step(&mut field, r, &mut oracle, &mut state, &mut rng).unwrap();
            }
            field
        };
        assert_eq!(run(&reference), run(&perturbed));
    }

    #[test]
    fn enabled_depth_term_reacts_to_its_inputs() {
        let spec = scene();
        let sched = schedule();
        let mut plan = small_plan(StagePlan::stage1());
        plan.camera_policy = plan.camera_policy.with_reference_fraction(1.0);
        let reference = spec.reference_bundle(16, [1.0; 3]).unwrap();
        let mut perturbed = reference.clone();
        perturbed.depth.iter_mut().enumerate().for_each(|(i, d)| *d += (i as f64 * 0.37).sin());
        let run = |r: &ReferenceBundle| {
            let mut field = RadianceField::new(tiny_config(), 14).unwrap();
            let mut oracle = target_oracle(Capabilities::VIEW, Shading::Gray);
            let mut state = StageState::new(1, &plan, &sched, r.camera, &field);
            let mut rng = ChaCha8Rng::seed_from_u64(14);
            stage1_step(&mut field, r, &mut oracle, &mut state, &mut rng).unwrap();
            field
        };
        assert_ne!(run(&reference), run(&perturbed));
    }
}
