//! Batch pipeline driver: scene generation, ground truth, training,
//! inference, segmentation, disparity refinement and evaluation, as
//! subcommands over PFM/PPM/PGM files.
//!
//! Exit codes: 0 success, 1 I/O or unexpected failure, 2 configuration or
//! file-format errors, 3 shape/input errors, 4 numeric failures.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "depth-edges",
    about = "Depth-edge estimation, depth layering and disparity refinement pipeline",
    version
)]
struct Cli {
    /// Flat `key = value` run configuration; absent keys use the documented
    /// defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads for per-scene parallelism (1 = reproducibility mode).
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset with corrupted channel estimates.
    Gen {
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of scenes.
        #[arg(long, default_value_t = 16)]
        scenes: usize,
        /// Canvas size in pixels (square).
        #[arg(long, default_value_t = 128)]
        size: usize,
        /// Base seed; scene i uses seed + i.
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Compute analytic depth-edge ground truth from clean inputs.
    Gt {
        /// Clean disparity map (PFM).
        #[arg(long)]
        disparity: PathBuf,
        /// Clean normal map (3-channel PFM). Omit to reconstruct from the
        /// disparity with the camera intrinsics.
        #[arg(long)]
        normals: Option<PathBuf>,
        /// Focal length in pixels (used when --normals is absent).
        #[arg(long)]
        focal: Option<f64>,
        /// Principal point `cx,cy` (defaults to the image center).
        #[arg(long)]
        principal: Option<String>,
        /// Disparity-to-depth scale (baseline times focal length).
        #[arg(long)]
        disparity_scale: Option<f64>,
        /// Output directory for contour/crease/edge PFMs and the sidecar.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train the fusion network on a generated dataset.
    Train {
        /// Dataset directory (with index.txt).
        #[arg(long)]
        dataset: PathBuf,
        /// Output model file.
        #[arg(long)]
        out: PathBuf,
        /// Optional `epoch,train_loss,val_loss` CSV.
        #[arg(long)]
        loss_log: Option<PathBuf>,
    },
    /// Run a trained model on one scene folder or a whole dataset.
    Infer {
        /// Model file from `train`.
        #[arg(long)]
        model: PathBuf,
        /// One scene folder (color.ppm + disp_est.pfm + normals_est.pfm).
        #[arg(long, conflicts_with = "dataset")]
        scene: Option<PathBuf>,
        /// Whole dataset; writes `<scene>.pfm` per scene into --out-dir.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Output edge/contour PFM (single scene mode).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Output directory (dataset mode).
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Output direction-field PFM (contour+direction models, single
        /// scene mode).
        #[arg(long)]
        directions_out: Option<PathBuf>,
    },
    /// Build a hierarchical segmentation from an edge probability map.
    Segment {
        /// Edge probability map (PFM).
        #[arg(long)]
        edges: PathBuf,
        /// Optional color image for the red-line overlay.
        #[arg(long)]
        color: Option<PathBuf>,
        /// Output directory (ucm.pfm, merge_tree.txt, base_labels.pgm,
        /// overlay.ppm).
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Refine a disparity estimate with contour and direction constraints.
    Refine {
        /// Initial disparity (PFM).
        #[arg(long)]
        disparity: PathBuf,
        /// Contour probability map (PFM).
        #[arg(long)]
        contour: PathBuf,
        /// Direction field (3-channel PFM, third channel ignored).
        #[arg(long)]
        directions: PathBuf,
        /// Refined disparity output (PFM).
        #[arg(long)]
        out: PathBuf,
        /// Optional per-level objective report.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Evaluate predicted edge maps (and/or baselines) against dataset
    /// ground truth.
    Eval {
        /// Dataset directory with ground-truth edges.
        #[arg(long)]
        dataset: PathBuf,
        /// Directory of predicted edge maps, one `<scene>.pfm` per scene.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Also evaluate the hand-defined single-channel and data-agnostic
        /// baselines.
        #[arg(long)]
        baselines: bool,
        /// Output directory for PR CSVs and the ODS/OIS table.
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn run(cli: Cli) -> depth_edges::Result<()> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Gen {
            out,
            scenes,
            size,
            seed,
        } => commands::gen(&out, scenes, size, size, seed, cli.jobs, &cfg),
        Command::Gt {
            disparity,
            normals,
            focal,
            principal,
            disparity_scale,
            out_dir,
        } => {
            let intrinsics = match (focal, disparity_scale) {
                (Some(f), Some(s)) => {
                    let (cx, cy) = match &principal {
                        Some(text) => parse_principal(text)?,
                        None => {
                            // Default to the image center; read the header.
                            let img = depth_edges::io::read_pfm(&disparity)?;
                            (img.width() as f64 / 2.0, img.height() as f64 / 2.0)
                        }
                    };
                    Some((f, cx, cy, s))
                }
                (None, None) => None,
                _ => {
                    return Err(depth_edges::Error::Config(
                        "--focal and --disparity-scale must be given together".into(),
                    ))
                }
            };
            commands::gt(&disparity, normals.as_deref(), intrinsics, &out_dir, &cfg)
        }
        Command::Train {
            dataset,
            out,
            loss_log,
        } => commands::train(&dataset, &out, loss_log.as_deref(), &cfg),
        Command::Infer {
            model,
            scene,
            dataset,
            out,
            out_dir,
            directions_out,
        } => match (scene, dataset) {
            (Some(scene), None) => {
                let out = out.ok_or_else(|| {
                    depth_edges::Error::Config("single-scene infer needs --out".into())
                })?;
                commands::infer(&model, &scene, &out, directions_out.as_deref(), &cfg)
            }
            (None, Some(dataset)) => {
                let out_dir = out_dir.ok_or_else(|| {
                    depth_edges::Error::Config("dataset infer needs --out-dir".into())
                })?;
                commands::infer_dataset(&model, &dataset, &out_dir, &cfg, cli.jobs)
            }
            _ => Err(depth_edges::Error::Config(
                "infer needs exactly one of --scene or --dataset".into(),
            )),
        },
        Command::Segment {
            edges,
            color,
            out_dir,
        } => commands::segment_cmd(&edges, color.as_deref(), &out_dir, &cfg),
        Command::Refine {
            disparity,
            contour,
            directions,
            out,
            report,
        } => commands::refine_cmd(
            &disparity,
            &contour,
            &directions,
            &out,
            report.as_deref(),
            &cfg,
        ),
        Command::Eval {
            dataset,
            predictions,
            baselines,
            out_dir,
        } => commands::eval_cmd(&dataset, predictions.as_deref(), &out_dir, baselines, &cfg),
    }
}

fn parse_principal(text: &str) -> depth_edges::Result<(f64, f64)> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 2 {
        return Err(depth_edges::Error::Config(format!(
            "--principal expects `cx,cy`, got {text:?}"
        )));
    }
    let cx = parts[0]
        .trim()
        .parse()
        .map_err(|_| depth_edges::Error::Config(format!("bad cx in {text:?}")))?;
    let cy = parts[1]
        .trim()
        .parse()
        .map_err(|_| depth_edges::Error::Config(format!("bad cy in {text:?}")))?;
    Ok((cx, cy))
}

fn exit_code_for(err: &depth_edges::Error) -> u8 {
    match err {
        depth_edges::Error::Config(_) | depth_edges::Error::Format { .. } => 2,
        depth_edges::Error::Shape(_) | depth_edges::Error::Input(_) => 3,
        depth_edges::Error::Numeric(_) => 4,
        depth_edges::Error::Io { .. } => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let mut source = std::error::Error::source(&err);
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            ExitCode::from(exit_code_for(&err))
        }
    }
}
