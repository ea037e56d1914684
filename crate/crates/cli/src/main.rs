use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use layoutpnp::synth::SynthConfig;
use layoutpnp_cli::commands::{self, BaselineMode, EvalOptions, ExportFormat, SolveOptions, SynthOptions};
use layoutpnp_cli::error::{CliError, EXIT_DIVERGED, EXIT_INPUT};
use layoutpnp_cli::files::{to_json_string, write_text};

#[derive(Debug, Parser)]
#[command(name = "layoutpnp", version, about = "Recover object poses and floor-consistent arrangements from 2D correspondences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve a scene file and write the solution.
    Solve {
        scene: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// RANSAC seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Optimiser steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Adam learning rate.
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        omega_surface: Option<f64>,
        #[arg(long)]
        omega_collision: Option<f64>,
        /// RANSAC inlier threshold in pixels (default: 2% of the image diagonal).
        #[arg(long)]
        inlier_threshold: Option<f64>,
        /// Matching score below which an object is treated as absent.
        #[arg(long, allow_hyphen_values = true)]
        neglect_threshold: Option<f64>,
        /// Step manifest for iterative pair merging.
        #[arg(long, value_name = "MANIFEST")]
        iterative: Option<PathBuf>,
        /// Keep the floor plane fixed at its initial fit.
        #[arg(long)]
        freeze_plane: bool,
    },
    /// Generate a synthetic scene file and its ground-truth sidecar.
    Synth {
        #[arg(short, long)]
        output: PathBuf,
        /// Ground-truth sidecar path (default: <output stem>.truth.json).
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        objects: usize,
        #[arg(long, default_value_t = 100)]
        keypoints: usize,
        /// Pixel noise standard deviation.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// Fraction of correspondences replaced by outliers.
        #[arg(long, default_value_t = 0.0)]
        outliers: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4.0)]
        extent: f64,
        #[arg(long, default_value_t = 640.0)]
        width: f64,
        #[arg(long, default_value_t = 480.0)]
        height: f64,
        /// Lift objects off the floor at random heights.
        #[arg(long)]
        floating: bool,
        #[arg(long)]
        allow_collisions: bool,
        /// Write descriptor-map sidecars instead of inline correspondences.
        #[arg(long)]
        descriptors: bool,
        /// Object id missing from the layout image (descriptor mode).
        #[arg(long)]
        absent: Vec<String>,
        /// Also write per-step scenes and a manifest for `solve --iterative`.
        #[arg(long)]
        iterative: bool,
    },
    /// Compare a solution with ground truth.
    Eval {
        scene: PathBuf,
        solution: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long, default_value_t = 2.0)]
        max_rotation_deg: f64,
        /// Translation bound (default: 2% of the scene extent).
        #[arg(long)]
        max_translation: Option<f64>,
        /// Align through the first object before comparing (for iterative solutions).
        #[arg(long)]
        align: bool,
        /// Print the JSON report instead of the text summary.
        #[arg(long)]
        json: bool,
        /// Also write the JSON report here.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Write a baseline layout as a solution file.
    Baseline {
        scene: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.5)]
        radius: f64,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Export a solved scene as OBJ geometry or an SVG preview.
    Export {
        scene: PathBuf,
        solution: PathBuf,
        #[arg(long, value_enum)]
        format: Format,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Uniform,
    Circular,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Obj,
    Svg,
}

fn emit(output: Option<&Path>, text: &str) -> Result<(), CliError> {
    match output {
        Some(p) => write_text(p, text),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes()).map_err(|source| CliError::Io {
                path: PathBuf::from("<stdout>"),
                source,
            })
        }
    }
}

fn run(cli: Cli) -> Result<u8, CliError> {
    match cli.command {
        Command::Solve {
            scene,
            output,
            seed,
            steps,
            lr,
            omega_surface,
            omega_collision,
            inlier_threshold,
            neglect_threshold,
            iterative,
            freeze_plane,
        } => {
            let opts = SolveOptions {
                seed,
                steps,
                lr,
                omega_surface,
                omega_collision,
                inlier_threshold,
                neglect_threshold,
                iterative,
                freeze_plane,
            };
            let sol = commands::solve(&scene, &opts)?;
            emit(output.as_deref(), &to_json_string(&commands::solution_file(&sol)))?;
            if sol.diverged {
                eprintln!("{}", serde_json::json!({"kind": "divergence", "message": "optimisation hit a non-finite loss; best finite iterate written", "exit_code": EXIT_DIVERGED}));
                return Ok(EXIT_DIVERGED as u8);
            }
            Ok(0)
        }
        Command::Synth {
            output,
            truth,
            objects,
            keypoints,
            noise,
            outliers,
            seed,
            extent,
            width,
            height,
            floating,
            allow_collisions,
            descriptors,
            absent,
            iterative,
        } => {
            let opts = SynthOptions {
                config: SynthConfig {
                    n_objects: objects,
                    keypoints_per_object: keypoints,
                    noise_sigma_px: noise,
                    outlier_fraction: outliers,
                    scene_extent: extent,
                    seed,
                    place_on_floor: !floating,
                    allow_collisions,
                    image_width: width,
                    image_height: height,
                },
                descriptors,
                absent,
                iterative,
            };
            commands::synth(&output, truth.as_deref(), &opts)?;
            Ok(0)
        }
        Command::Eval {
            scene,
            solution,
            truth,
            max_rotation_deg,
            max_translation,
            align,
            json,
            output,
        } => {
            let opts = EvalOptions {
                truth,
                max_rotation_deg,
                max_translation,
                align,
            };
            let report = commands::eval(&scene, &solution, &opts)?;
            let machine = to_json_string(&report);
            if let Some(p) = &output {
                write_text(p, &machine)?;
            }
            emit(None, &if json { machine } else { report.human() })?;
            if report.pass {
                Ok(0)
            } else {
                Err(CliError::EvalFailed)
            }
        }
        Command::Baseline {
            scene,
            mode,
            seed,
            radius,
            output,
        } => {
            let mode = match mode {
                Mode::Uniform => BaselineMode::Uniform,
                Mode::Circular => BaselineMode::Circular,
            };
            let sol = commands::baseline(&scene, mode, seed, radius)?;
            emit(output.as_deref(), &to_json_string(&commands::solution_file(&sol)))?;
            Ok(0)
        }
        Command::Export {
            scene,
            solution,
            format,
            output,
        } => {
            let format = match format {
                Format::Obj => ExportFormat::Obj,
                Format::Svg => ExportFormat::Svg,
            };
            let text = commands::export(&scene, &solution, format)?;
            emit(output.as_deref(), &text)?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            if !usage {
                return ExitCode::SUCCESS;
            }
            eprintln!("{}", serde_json::json!({"kind": "usage", "message": e.kind().to_string(), "exit_code": EXIT_INPUT}));
            return ExitCode::from(EXIT_INPUT as u8);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("{}", serde_json::to_string(&e.record()).unwrap_or_else(|_| e.to_string()));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
