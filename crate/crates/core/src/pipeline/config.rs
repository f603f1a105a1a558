use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::cameras::{held_out_cameras, orbit_cameras};
use super::eval::{evaluate_views, ViewMetrics};
use super::optim::AdamConfig;
use super::{stage1_step, stage2_step, LossKind, PipelineError, StagePlan, StageState, StepRecord};
use crate::diffusion::{
    build_schedule, AffineAdapter, Capabilities, GuidanceOracle, NoiseSchedule, RemoteOracle,
    ScheduleProfile, TargetFn, TargetImageOracle, Tensor, Weighting,
};
use crate::field::{write_checkpoint, FieldConfig, RadianceField};
use crate::losses::{LossWeights, ReferenceBundle};
use crate::render::io::write_contact_sheet;
use crate::render::{render_field, Camera, RenderOptions, Sampling};
use crate::scene::{SceneSpec, Shading};

/// Optional per-stage overrides of the camera policy.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraOverrides {
    pub reference_fraction: Option<f64>,
    pub radius: Option<[f64; 2]>,
    pub polar_deg: Option<[f64; 2]>,
    pub azimuth_deg: Option<[f64; 2]>,
}

/// `[stage1]` / `[stage2]` table. Absent keys keep the stage defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub iterations: Option<usize>,
    pub losses: Option<Vec<LossKind>>,
    pub weights: Option<LossWeights>,
    pub camera: Option<CameraOverrides>,
    pub resolution: Option<usize>,
    pub samples_per_ray: Option<usize>,
    pub adapt_every: Option<usize>,
    pub reg_threshold: Option<f64>,
    pub optimizer: Option<AdamConfig>,
    pub background: Option<[f64; 3]>,
    pub workers: Option<usize>,
}

impl StageConfig {
    pub fn apply(&self, mut plan: StagePlan) -> StagePlan {
        if let Some(v) = self.iterations {
            plan.iterations = v;
        }
        if let Some(v) = &self.losses {
            plan.enabled_losses = v.iter().copied().collect();
        }
        if let Some(v) = self.weights {
            plan.loss_weights = v;
        }
        if let Some(c) = &self.camera {
            let p = &mut plan.camera_policy;
            p.reference_fraction = c.reference_fraction.unwrap_or(p.reference_fraction);
            p.radius = c.radius.unwrap_or(p.radius);
            p.polar_deg = c.polar_deg.unwrap_or(p.polar_deg);
            p.azimuth_deg = c.azimuth_deg.unwrap_or(p.azimuth_deg);
        }
        if let Some(v) = self.resolution {
            plan.render_resolution = v;
        }
        if let Some(v) = self.samples_per_ray {
            plan.samples_per_ray = v;
        }
        if let Some(v) = self.adapt_every {
            plan.adapt_every = v;
        }
        if let Some(v) = self.reg_threshold {
            plan.reg_threshold = v;
        }
        if let Some(v) = self.optimizer {
            plan.optimizer = v;
        }
        if let Some(v) = self.background {
            plan.background = v;
        }
        if let Some(v) = self.workers {
            plan.workers = v;
        }
        plan
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleKind {
    /// Target-image oracles built from the analytic scene.
    #[default]
    Synthetic,
    Remote,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub kind: OracleKind,
    /// Endpoint for both stages unless a per-stage URL is given.
    pub url: Option<String>,
    pub stage1_url: Option<String>,
    pub stage2_url: Option<String>,
    /// Used unless a remote handshake reports its own profile.
    pub profile: ScheduleProfile,
    pub num_steps: usize,
    pub weighting: Weighting,
    pub timeout_secs: f64,
    pub prompt: Option<String>,
    pub guidance_scale: f64,
    /// Step size of the synthetic texture oracle's adapter.
    pub adapter_lr: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            kind: OracleKind::Synthetic,
            url: None,
            stage1_url: None,
            stage2_url: None,
            profile: ScheduleProfile::LinearBeta,
            num_steps: 1000,
            weighting: Weighting::SigmaSquared,
            timeout_secs: 60.0,
            prompt: None,
            guidance_scale: 7.5,
            adapter_lr: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Held-out evaluation period in iterations; 0 disables it.
    pub eval_every: usize,
    pub eval_views: usize,
    pub orbit_views: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            eval_every: 50,
            eval_views: 4,
            orbit_views: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputsConfig {
    pub scene: SceneSpec,
}

/// Top-level run configuration, read from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    pub inputs: InputsConfig,
    #[serde(default)]
    pub field: FieldConfig,
    #[serde(default)]
    pub stage1: StageConfig,
    #[serde(default)]
    pub stage2: StageConfig,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl PipelineConfig {
    pub fn new(scene: SceneSpec) -> Self {
        Self {
            seed: 0,
            inputs: InputsConfig { scene },
            field: FieldConfig::default(),
            stage1: StageConfig::default(),
            stage2: StageConfig::default(),
            oracle: OracleConfig::default(),
            output: OutputConfig::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn from_path(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut config = Self::from_toml_str(&text)?;
        // relative input paths are taken relative to the config file
        if let Some(dir) = path.parent() {
            let scene = &mut config.inputs.scene;
            for p in [&mut scene.image, &mut scene.mask, &mut scene.depth].into_iter().flatten() {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(config)
    }

    /// Replaces every configured oracle endpoint.
    pub fn override_oracle_url(&mut self, url: &str) {
        self.oracle.url = Some(url.to_string());
        self.oracle.stage1_url = None;
        self.oracle.stage2_url = None;
    }

    pub fn stage1_plan(&self) -> StagePlan {
        self.stage1.apply(StagePlan::stage1())
    }

    pub fn stage2_plan(&self) -> StagePlan {
        self.stage2.apply(StagePlan::stage2())
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if let Err(e) = self.stage1_plan().validate() {
            return bad(format!("stage1: {e}"));
        }
        if let Err(e) = self.stage2_plan().validate() {
            return bad(format!("stage2: {e}"));
        }
        if let Err(e) = self.inputs.scene.validate() {
            return bad(format!("inputs.scene: {e}"));
        }
        let o = &self.oracle;
        if o.num_steps < 2 {
            return bad(format!("oracle.num_steps must be at least 2, got {}", o.num_steps));
        }
        if !(o.timeout_secs > 0.0 && o.timeout_secs.is_finite()) {
            return bad("oracle.timeout_secs must be positive".into());
        }
        if !(o.adapter_lr >= 0.0 && o.adapter_lr.is_finite()) {
            return bad("oracle.adapter_lr must be non-negative".into());
        }
        match o.kind {
            OracleKind::Remote => {
                for stage in [1u8, 2] {
                    if self.oracle_url(stage).is_none() {
                        return bad(format!("oracle.url (or oracle.stage{stage}_url) is required when oracle.kind = \"remote\""));
                    }
                }
            }
            OracleKind::Synthetic => {
                if !self.inputs.scene.has_ground_truth() {
                    return bad("synthetic oracles need an analytic inputs.scene".into());
                }
            }
        }
        if self.output.eval_views == 0 || self.output.orbit_views == 0 {
            return bad("output.eval_views and output.orbit_views must be at least 1".into());
        }
        Ok(())
    }

    fn oracle_url(&self, stage: u8) -> Option<&str> {
        let specific = if stage == 1 { &self.oracle.stage1_url } else { &self.oracle.stage2_url };
        specific.as_deref().or(self.oracle.url.as_deref())
    }

    pub fn schedule(&self, profile: Option<ScheduleProfile>) -> Result<NoiseSchedule, PipelineError> {
        build_schedule(
            self.oracle.num_steps,
            profile.unwrap_or(self.oracle.profile),
            self.oracle.weighting,
        )
        .map_err(|e| PipelineError::Config(format!("oracle: {e}")))
    }
}

/// An oracle together with the noise schedule it was trained under.
pub struct StageOracle {
    pub oracle: Box<dyn GuidanceOracle>,
    pub schedule: NoiseSchedule,
}

fn target_fn(scene: &SceneSpec, shading: Shading, background: [f64; 3]) -> TargetFn {
    let scene = scene.clone();
    Arc::new(move |cam: &Camera| {
        let gt = scene.render_truth(cam, shading, background);
        Tensor::image(gt.height, gt.width, gt.color).expect("ground-truth buffers are consistent")
    })
}

/// Builds the stage-1 (view-conditioned) and stage-2 (text-conditioned)
/// oracles. Synthetic oracles target gray-shaded and textured renders of
/// the analytic scene respectively.
pub fn build_oracles(config: &PipelineConfig) -> Result<(StageOracle, StageOracle), PipelineError> {
    let scene = &config.inputs.scene;
    match config.oracle.kind {
        OracleKind::Synthetic => {
            let schedule = config.schedule(None)?;
            let bg1 = config.stage1_plan().background;
            let bg2 = config.stage2_plan().background;
            let o1 = TargetImageOracle::new(schedule.clone(), Capabilities::VIEW, target_fn(scene, Shading::Gray, bg1));
            let o2 = TargetImageOracle::new(schedule.clone(), Capabilities::TEXT, target_fn(scene, Shading::Textured, bg2))
                .with_adapter(AffineAdapter::new(3, config.oracle.adapter_lr));
            Ok((
                StageOracle {
                    oracle: Box::new(o1),
                    schedule: schedule.clone(),
                },
                StageOracle {
                    oracle: Box::new(o2),
                    schedule,
                },
            ))
        }
        OracleKind::Remote => {
            let timeout = Duration::from_secs_f64(config.oracle.timeout_secs);
            let connect = |stage: u8, res: usize| -> Result<StageOracle, PipelineError> {
                let url = config
                    .oracle_url(stage)
                    .ok_or_else(|| PipelineError::Config("oracle.url is required for remote oracles".into()))?;
                let oracle = RemoteOracle::connect(url, &[res, res, 3], timeout).map_err(|source| {
                    PipelineError::Oracle {
                        stage,
                        iteration: 0,
                        source,
                    }
                })?;
                let schedule = config.schedule(oracle.schedule_profile())?;
                Ok(StageOracle {
                    oracle: Box::new(oracle),
                    schedule,
                })
            };
            let o1 = connect(1, config.stage1_plan().render_resolution)?;
            let o2 = connect(2, config.stage2_plan().render_resolution)?;
            Ok((o1, o2))
        }
    }
}

/// Per-iteration records plus per-stage wall-clock.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub records: Vec<StepRecord>,
    pub stage_seconds: [f64; 2],
    /// Held-out metrics of each stage's final field, when ground truth exists.
    pub stage_eval: [Option<ViewMetrics>; 2],
}

#[derive(Debug)]
pub struct RunOutcome {
    pub field: RadianceField,
    pub metrics: RunMetrics,
    pub stage1_checkpoint: PathBuf,
    pub stage2_checkpoint: PathBuf,
}

fn checkpoint_extras(config: &PipelineConfig, stage: u8, iterations: usize) -> BTreeMap<String, serde_json::Value> {
    BTreeMap::from([
        ("stage".to_string(), json!(stage)),
        ("iterations".to_string(), json!(iterations)),
        ("seed".to_string(), json!(config.seed)),
        ("scene".to_string(), serde_json::to_value(&config.inputs.scene).expect("scene serializes")),
    ])
}

struct Run<'a> {
    config: &'a PipelineConfig,
    out: &'a Path,
    metrics_file: BufWriter<File>,
    metrics: RunMetrics,
}

impl Run<'_> {
    fn held_out(&self, plan: &StagePlan, field: &RadianceField) -> Option<ViewMetrics> {
        let scene = &self.config.inputs.scene;
        if !scene.has_ground_truth() {
            return None;
        }
        let reference = scene.reference_camera(plan.render_resolution);
        let cams = held_out_cameras(&reference, self.config.output.eval_views, reference.pose.polar);
        let options = RenderOptions::default()
            .with_samples(plan.samples_per_ray)
            .with_sampling(Sampling::Midpoint)
            .with_background(plan.background)
            .with_workers(plan.workers);
        Some(evaluate_views(field, scene, &cams, &options, Shading::Textured))
    }

    fn record(&mut self, plan: &StagePlan, field: &RadianceField, mut rec: StepRecord, local: usize) -> std::io::Result<()> {
        let every = self.config.output.eval_every;
        if every > 0 && ((local + 1) % every == 0 || local + 1 == plan.iterations) {
            rec.eval = self.held_out(plan, field);
        }
        serde_json::to_writer(&mut self.metrics_file, &rec)?;
        self.metrics_file.write_all(b"\n")?;
        self.metrics.records.push(rec);
        Ok(())
    }

    fn orbit_sheet(&self, stage: u8, plan: &StagePlan, field: &RadianceField) -> Result<(), PipelineError> {
        let reference = self.config.inputs.scene.reference_camera(plan.render_resolution);
        let options = RenderOptions::default()
            .with_samples(plan.samples_per_ray)
            .with_background(plan.background)
            .with_workers(plan.workers);
        let views: Vec<Vec<f64>> = orbit_cameras(&reference, self.config.output.orbit_views)
            .iter()
            .map(|c| render_field(field, c, &options).color)
            .collect();
        let res = plan.render_resolution;
        write_contact_sheet(&self.out.join(format!("stage{stage}_orbit.png")), res, res, &views, 4)
            .map_err(|e| PipelineError::Io(std::io::Error::other(e.to_string())))
    }

    fn numerical_abort(&self, field: &RadianceField, err: PipelineError) -> PipelineError {
        if let PipelineError::Numerical { stage, iteration, .. } = &err {
            let path = self.out.join("last_good.ckpt");
            if let Err(e) = write_checkpoint(&path, field, &checkpoint_extras(self.config, *stage, *iteration)) {
                return PipelineError::Checkpoint(e);
            }
        }
        err
    }
}

fn reference_for(config: &PipelineConfig, plan: &StagePlan) -> Result<Option<ReferenceBundle>, PipelineError> {
    if !plan.enabled_losses.iter().any(|k| k.is_reference_term()) {
        return Ok(None);
    }
    Ok(Some(
        config
            .inputs
            .scene
            .reference_bundle(plan.render_resolution, plan.background)?,
    ))
}

/// Runs both stages with oracles built from the config.
pub fn run_pipeline(config: &PipelineConfig) -> Result<RunOutcome, PipelineError> {
    config.validate()?;
    let (o1, o2) = build_oracles(config)?;
    run_pipeline_with(config, o1, o2)
}

/// Runs stage 1 then stage 2 with the given oracles, writing
/// `stage1.ckpt`, `stage2.ckpt`, `metrics.jsonl`, `run.json` and one orbit
/// contact sheet per stage into the output directory.
pub fn run_pipeline_with(
    config: &PipelineConfig,
    mut stage1: StageOracle,
    mut stage2: StageOracle,
) -> Result<RunOutcome, PipelineError> {
    config.validate()?;
    let plan1 = config.stage1_plan();
    let plan2 = config.stage2_plan();
    let scene = &config.inputs.scene;
    let reference1 = scene.reference_bundle(plan1.render_resolution, plan1.background)?;
    let reference2 = reference_for(config, &plan2)?;

    let out = config.output.dir.as_path();
    fs::create_dir_all(out)?;
    let mut run = Run {
        config,
        out,
        metrics_file: BufWriter::new(File::create(out.join("metrics.jsonl"))?),
        metrics: RunMetrics::default(),
    };

    let mut field = RadianceField::new(config.field.clone(), config.seed)
        .map_err(|e| PipelineError::Config(format!("field: {e}")))?;
    let guidance = config.oracle.guidance_scale;
    let prompt = config.oracle.prompt.clone();

    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut state = StageState::new(1, &plan1, &stage1.schedule, reference1.camera, &field)
        .with_conditioning(prompt.clone(), guidance);
    for local in 0..plan1.iterations {
        let rec = stage1_step(&mut field, &reference1, stage1.oracle.as_mut(), &mut state, &mut rng)
            .map_err(|e| run.numerical_abort(&field, e))?;
        run.record(&plan1, &field, rec, local)?;
    }
    run.metrics.stage_seconds[0] = started.elapsed().as_secs_f64();
    run.metrics.stage_eval[0] = run.held_out(&plan1, &field);
    let stage1_checkpoint = out.join("stage1.ckpt");
    write_checkpoint(&stage1_checkpoint, &field, &checkpoint_extras(config, 1, plan1.iterations))?;
    run.orbit_sheet(1, &plan1, &field)?;

    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);
    let reference_camera = scene.reference_camera(plan2.render_resolution);
    let mut state = StageState::new(2, &plan2, &stage2.schedule, reference_camera, &field)
        .with_conditioning(prompt, guidance)
        .starting_at(plan1.iterations);
    for local in 0..plan2.iterations {
        let rec = stage2_step(&mut field, reference2.as_ref(), stage2.oracle.as_mut(), &mut state, &mut rng)
            .map_err(|e| run.numerical_abort(&field, e))?;
        run.record(&plan2, &field, rec, local)?;
    }
    run.metrics.stage_seconds[1] = started.elapsed().as_secs_f64();
    run.metrics.stage_eval[1] = run.held_out(&plan2, &field);
    let stage2_checkpoint = out.join("stage2.ckpt");
    write_checkpoint(
        &stage2_checkpoint,
        &field,
        &checkpoint_extras(config, 2, plan1.iterations + plan2.iterations),
    )?;
    run.orbit_sheet(2, &plan2, &field)?;
    run.metrics_file.flush()?;

    let summary = json!({
        "iterations": [plan1.iterations, plan2.iterations],
        "stage_seconds": run.metrics.stage_seconds,
        "stage_eval": run.metrics.stage_eval,
        "checkpoints": [&stage1_checkpoint, &stage2_checkpoint],
    });
    fs::write(out.join("run.json"), serde_json::to_vec_pretty(&summary).expect("summary serializes"))?;

    Ok(RunOutcome {
        field,
        metrics: run.metrics,
        stage1_checkpoint,
        stage2_checkpoint,
    })
}
