//! `dnf` command-line front end.
//!
//! Exit codes: 0 success, 1 usage, config or input error, 2 oracle
//! connectivity or capability failure, 3 numerical failure. Results go to
//! stdout as a single JSON document; diagnostics go to stderr.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::CliError;

#[derive(Debug, Parser)]
#[command(name = "dnf", version, about = "Two-stage score-distillation engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run both optimization stages from a config file.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory, replacing `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Render resolution for both stages.
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Render an orbit of views from a checkpoint.
    Render {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8)]
        views: usize,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long, default_value = "render")]
        out: PathBuf,
    },
    /// Extract a triangle mesh from a checkpoint as OBJ.
    Mesh {
        checkpoint: PathBuf,
        /// Grid cells per axis.
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        /// Density level; defaults to α = 0.5 at the given samples per ray.
        #[arg(long)]
        iso: Option<f64>,
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long, default_value = "mesh.obj")]
        out: PathBuf,
    },
    /// Score a checkpoint against a scene with analytic ground truth.
    Eval {
        checkpoint: PathBuf,
        /// Scene spec or pipeline config; defaults to the scene stored in
        /// the checkpoint.
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        views: usize,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long, default_value_t = 32)]
        mesh_resolution: usize,
    },
    /// Write a synthetic scene: reference inputs plus ready-to-run configs.
    Scene {
        /// analytic-sphere, analytic-box or textured-sphere
        kind: String,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        /// Add a small detached sphere.
        #[arg(long)]
        floater: bool,
        #[arg(long, default_value = "scene")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<serde_json::Value, CliError> {
    match cli.command {
        Command::Generate { config, seed, out, resolution } => commands::generate(&config, seed, out, resolution),
        Command::Render { checkpoint, views, resolution, samples, out } => {
            commands::render(&checkpoint, views, resolution, samples, &out)
        }
        Command::Mesh { checkpoint, resolution, iso, samples, out } => {
            commands::mesh(&checkpoint, resolution, iso, samples, &out)
        }
        Command::Eval { checkpoint, scene, views, resolution, samples, mesh_resolution } => {
            commands::eval(&checkpoint, scene.as_deref(), views, resolution, samples, mesh_resolution)
        }
        Command::Scene { kind, resolution, floater, out } => commands::scene(&kind, resolution, floater, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(result) => {
            println!("{result}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
