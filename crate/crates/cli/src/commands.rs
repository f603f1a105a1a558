use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use dnf::field::{read_checkpoint, Checkpoint, CheckpointMeta};
use dnf::pipeline::{
    default_iso_level, evaluate, extract_mesh, orbit_cameras, run_pipeline, write_obj, PipelineConfig, PipelineError,
    StagePlan,
};
use dnf::render::io::{write_depth, write_gray_png, write_rgb_png};
use dnf::render::{render_field, RenderOptions};
use dnf::scene::{Floater, SceneKind, SceneSpec};

pub const ORACLE_URL_VAR: &str = "DNF_ORACLE_URL";

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn input(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        Self {
            code: e.exit_code() as u8,
            message: e.to_string(),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::input(format!("{}: {e}", path.display()))
}

fn load(checkpoint: &Path) -> Result<Checkpoint, CliError> {
    read_checkpoint(checkpoint).map_err(|e| CliError::input(format!("{}: {e}", checkpoint.display())))
}

/// Scene recorded in the checkpoint metadata; checkpoints without one are
/// viewed like the default sphere scene.
fn stored_scene(meta: &CheckpointMeta) -> Result<SceneSpec, CliError> {
    match meta.extras.get("scene") {
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| CliError::input(format!("checkpoint scene: {e}"))),
        None => Ok(SceneSpec::new(SceneKind::AnalyticSphere)),
    }
}

/// Reads a scene spec, either bare or as the `[inputs.scene]` table of a
/// pipeline config.
fn read_scene(path: &Path) -> Result<SceneSpec, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let value: toml::Table = toml::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let scene = match value.get("inputs").and_then(|i| i.get("scene")) {
        Some(s) => s.clone(),
        None => toml::Value::Table(value),
    };
    scene
        .try_into()
        .map_err(|e: toml::de::Error| CliError::input(format!("{}: {e}", path.display())))
}

pub fn generate(
    config_path: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
    resolution: Option<usize>,
) -> Result<Value, CliError> {
    let mut config = PipelineConfig::from_path(config_path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(out) = out {
        config.output.dir = out;
    }
    if let Some(r) = resolution {
        config.stage1.resolution = Some(r);
        config.stage2.resolution = Some(r);
    }
    if let Ok(url) = std::env::var(ORACLE_URL_VAR) {
        if !url.is_empty() {
            config.override_oracle_url(&url);
        }
    }
    let outcome = run_pipeline(&config)?;
    let m = &outcome.metrics;
    Ok(json!({
        "out": config.output.dir,
        "stage1_checkpoint": outcome.stage1_checkpoint,
        "stage2_checkpoint": outcome.stage2_checkpoint,
        "iterations": m.records.len(),
        "stage_seconds": m.stage_seconds,
        "stage1_eval": m.stage_eval[0],
        "stage2_eval": m.stage_eval[1],
    }))
}

pub fn render(checkpoint: &Path, views: usize, resolution: usize, samples: usize, out: &Path) -> Result<Value, CliError> {
    if views == 0 || resolution == 0 || samples < 2 {
        return Err(CliError::input("--views and --resolution must be positive and --samples at least 2"));
    }
    let ck = load(checkpoint)?;
    let scene = stored_scene(&ck.meta)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let options = RenderOptions::default().with_samples(samples);
    let mut written = Vec::with_capacity(views);
    for (k, camera) in orbit_cameras(&scene.reference_camera(resolution), views).iter().enumerate() {
        let view = render_field(&ck.field, camera, &options);
        let image = out.join(format!("view_{k:03}.png"));
        let depth = out.join(format!("view_{k:03}.depth"));
        write_rgb_png(&image, view.width, view.height, &view.color).map_err(|e| CliError::input(e.to_string()))?;
        write_depth(&depth, view.width, view.height, &view.depth).map_err(|e| CliError::input(e.to_string()))?;
        written.push(json!({
            "image": image,
            "depth": depth,
            "azimuth": camera.pose.azimuth,
            "mask_pixels": view.mask().iter().filter(|m| **m).count(),
        }));
    }
    Ok(json!({ "views": written }))
}

pub fn mesh(checkpoint: &Path, resolution: usize, iso: Option<f64>, samples: usize, out: &Path) -> Result<Value, CliError> {
    let ck = load(checkpoint)?;
    let iso = match iso {
        Some(v) => v,
        None => {
            if samples < 2 {
                return Err(CliError::input("--samples must be at least 2"));
            }
            let reference = stored_scene(&ck.meta)?.reference_camera(16);
            default_iso_level((reference.far - reference.near) / samples as f64)
        }
    };
    let mesh = extract_mesh(&ck.field, [-1.0; 3], [1.0; 3], resolution, iso)
        .ok_or_else(|| CliError::input(format!("mesh resolution {resolution} is below 8")))?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    write_obj(out, &mesh).map_err(io_err(out))?;
    Ok(json!({
        "mesh": out,
        "iso": iso,
        "vertices": mesh.vertices.len(),
        "triangles": mesh.triangles.len(),
    }))
}

pub fn eval(
    checkpoint: &Path,
    scene: Option<&Path>,
    views: usize,
    resolution: usize,
    samples: usize,
    mesh_resolution: usize,
) -> Result<Value, CliError> {
    if views == 0 || resolution == 0 || samples < 2 {
        return Err(CliError::input("--views and --resolution must be positive and --samples at least 2"));
    }
    let ck = load(checkpoint)?;
    let scene = match scene {
        Some(path) => read_scene(path)?,
        None => stored_scene(&ck.meta)?,
    };
    scene.validate().map_err(|e| CliError::input(e.to_string()))?;
    let report = evaluate(&ck.field, &scene, resolution, views, samples, mesh_resolution)
        .map_err(|e| CliError::input(e.to_string()))?;
    Ok(serde_json::to_value(report).expect("report serializes"))
}

fn scaffold_kind(name: &str) -> Result<SceneKind, CliError> {
    match name {
        "analytic-sphere" => Ok(SceneKind::AnalyticSphere),
        "analytic-box" => Ok(SceneKind::AnalyticBox),
        "textured-sphere" => Ok(SceneKind::TexturedSphere),
        other => Err(CliError::input(format!(
            "unknown scene kind {other:?}; expected analytic-sphere, analytic-box or textured-sphere"
        ))),
    }
}

fn config_toml(scene: &SceneSpec, resolution: usize, remote: bool) -> Result<String, CliError> {
    let scene = toml::Value::try_from(scene).map_err(|e| CliError::input(e.to_string()))?;
    let stage = toml::toml! { resolution = (resolution as i64) };
    let mut doc = toml::Table::new();
    doc.insert("inputs".into(), toml::Value::Table(toml::Table::from_iter([("scene".to_string(), scene)])));
    doc.insert("stage1".into(), toml::Value::Table(stage.clone()));
    doc.insert("stage2".into(), toml::Value::Table(stage));
    if remote {
        // the endpoint comes from oracle.url or the environment
        doc.insert("oracle".into(), toml::Value::Table(toml::toml! { kind = "remote" }));
    }
    toml::to_string(&doc).map_err(|e| CliError::input(e.to_string()))
}

/// Writes `reference.png`, `mask.png` and `reference.depth` rendered from
/// the analytic scene, `config.toml` running that scene with synthetic
/// oracles, and `from_files.toml` feeding the same inputs from disk to a
/// remote oracle.
pub fn scene(kind: &str, resolution: usize, floater: bool, out: &Path) -> Result<Value, CliError> {
    let mut spec = SceneSpec::new(scaffold_kind(kind)?);
    if floater {
        spec = spec.with_floater(Floater {
            center: [0.0, 0.55, 0.55],
            radius: 0.12,
        });
    }
    if resolution < 16 {
        return Err(CliError::input("--resolution must be at least 16"));
    }
    let bundle = spec
        .reference_bundle(resolution, StagePlan::stage1().background)
        .map_err(|e| CliError::input(e.to_string()))?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let image = out.join("reference.png");
    let mask = out.join("mask.png");
    let depth = out.join("reference.depth");
    let mask_values: Vec<f64> = bundle.mask.iter().map(|m| if *m { 1.0 } else { 0.0 }).collect();
    write_rgb_png(&image, resolution, resolution, &bundle.image).map_err(|e| CliError::input(e.to_string()))?;
    write_gray_png(&mask, resolution, resolution, &mask_values).map_err(|e| CliError::input(e.to_string()))?;
    write_depth(&depth, resolution, resolution, &bundle.depth).map_err(|e| CliError::input(e.to_string()))?;

    let mut from_files = spec.clone();
    from_files.kind = SceneKind::FromFiles;
    from_files.image = Some("reference.png".into());
    from_files.mask = Some("mask.png".into());
    from_files.depth = Some("reference.depth".into());
    let config = out.join("config.toml");
    let remote_config = out.join("from_files.toml");
    fs::write(&config, config_toml(&spec, resolution, false)?).map_err(io_err(&config))?;
    fs::write(&remote_config, config_toml(&from_files, resolution, true)?).map_err(io_err(&remote_config))?;
    Ok(json!({
        "config": config,
        "from_files_config": remote_config,
        "image": image,
        "mask": mask,
        "depth": depth,
    }))
}
