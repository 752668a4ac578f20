//! `occforge`: generate synthetic scenes, run the occupancy pipeline and
//! evaluate its outputs.
//!
//! Exit codes: 0 on success, 2 for usage, configuration or file-format
//! errors, 3 when a runtime invariant is violated.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use occforge::config::{ExpertMode, RunConfig};
use occforge::eval::gap_report;
use occforge::io::{read_ovg, write_ovg, Calibration, OvgFile};
use occforge::pipeline::{self, compute_metrics};
use occforge::synth::{gen_scene, rasterize_gt, Difficulty, SceneSpec};
use occforge::{Error, Result};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "occforge", version, about = "Depth-guided semantic occupancy on synthetic scenes")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration JSON; desk-scale defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for scene generation and parameter initialization.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true, env = "OCCFORGE_THREADS")]
    threads: Option<usize>,
    /// Start from benchmark-scale sizes instead of desk-scale ones.
    #[arg(long, global = true)]
    paper_scale: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a generated scene as JSON.
    GenScene {
        #[arg(long, default_value = "occluded")]
        difficulty: Difficulty,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ray-cast depth and synthetic features for every camera of a scene.
    RenderDepth {
        #[arg(long)]
        scene: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Voxelize back-projected depth into an occupancy mask.
    Voxelize {
        /// Render depth from this scene.
        #[arg(long, conflicts_with = "depth")]
        scene: Option<PathBuf>,
        /// Depth map OVG files, one per camera in calibration order.
        #[arg(long, requires = "calibration")]
        depth: Vec<PathBuf>,
        #[arg(long)]
        calibration: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full pipeline with artifacts, or the shape check with --paper-scale.
    Pipeline {
        #[arg(long)]
        expert: Option<ExpertMode>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also export occupied voxels as PLY point lists.
        #[arg(long)]
        dump_ply: bool,
    },
    /// Compare depth-derived occupancy with ground truth.
    GapReport {
        /// Depth occupancy mask OVG.
        #[arg(long, conflicts_with = "scene", required_unless_present = "scene")]
        depth: Option<PathBuf>,
        /// Scene JSON to render depth occupancy from.
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Ground-truth label OVG; rasterized from --scene when omitted.
        #[arg(long, required_unless_present = "scene")]
        gt: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// IoU and mIoU of predicted labels against ground truth.
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Depth occupancy OVG for the gap section.
        #[arg(long)]
        depth: Option<PathBuf>,
        #[arg(long, default_value_t = occforge::synth::NUM_CLASSES)]
        num_classes: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-stage wall times over repeated runs.
    Bench {
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long)]
        expert: Option<ExpertMode>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Invariant(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = if cli.common.paper_scale {
        RunConfig::paper_scale()
    } else {
        match &cli.common.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        }
    };
    if let Some(seed) = cli.common.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = cli.common.threads {
        cfg.threads = Some(threads);
    }
    if let Command::Pipeline { expert: Some(mode), .. } | Command::Bench { expert: Some(mode), .. } = &cli.command {
        cfg.experts.mode = *mode;
    }
    cfg.validate()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cfg.threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("cannot start {:?} worker threads: {e}", cfg.threads)))?;
    pool.install(|| dispatch(cli.command, cli.common.paper_scale, cfg))
}

fn emit(value: &impl Serialize, out: Option<&Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn dispatch(command: Command, paper_scale: bool, mut cfg: RunConfig) -> Result<()> {
    match command {
        Command::GenScene { difficulty, out } => {
            gen_scene(cfg.seed, difficulty, &cfg.full_grid()?)?.save(&out)?;
        }
        Command::RenderDepth { scene, out } => {
            cfg.scene = Some(scene);
            let scene = pipeline::load_scene(&cfg)?;
            let data = pipeline::render_scene(&cfg, &scene)?;
            std::fs::create_dir_all(&out)?;
            for (i, (obs, depth)) in data.observations.iter().zip(&data.depths).enumerate() {
                write_ovg(&out.join(format!("depth_{i}.ovg")), &OvgFile::from_depth(depth)?)?;
                write_ovg(
                    &out.join(format!("image_features_{i}.ovg")),
                    &OvgFile::from_feature_map(&obs.image_features)?,
                )?;
                write_ovg(
                    &out.join(format!("depth_features_{i}.ovg")),
                    &OvgFile::from_feature_map(&obs.depth_features)?,
                )?;
            }
            Calibration::from_rig(&data.rig).save(&out.join("calibration.json"))?;
        }
        Command::Voxelize {
            scene,
            depth,
            calibration,
            out,
        } => {
            let grid = cfg.full_grid()?;
            let mask = match (scene, calibration) {
                (Some(scene), _) => {
                    cfg.scene = Some(scene);
                    let scene = pipeline::load_scene(&cfg)?;
                    let data = pipeline::render_scene(&cfg, &scene)?;
                    pipeline::depth_grid(&data.depths, &data.rig, &grid)?
                }
                (None, Some(cal)) => {
                    let rig = Calibration::load(&cal)?.to_rig()?;
                    let depths = depth
                        .iter()
                        .map(|p| read_ovg(p)?.into_depth())
                        .collect::<Result<Vec<_>>>()?;
                    pipeline::depth_grid(&depths, &rig, &grid)?
                }
                (None, None) => return Err(Error::Config("voxelize needs --scene or --depth with --calibration".into())),
            };
            write_ovg(&out, &OvgFile::from_mask(&mask))?;
        }
        Command::Pipeline { out, dump_ply, .. } => {
            if paper_scale {
                let report = pipeline::paper_scale_check(&cfg)?;
                if !report.finite {
                    return Err(Error::Invariant("paper-scale DCA produced non-finite values".into()));
                }
                let path = out.map(|dir| -> Result<PathBuf> {
                    std::fs::create_dir_all(&dir)?;
                    Ok(dir.join("shape_report.json"))
                });
                emit(&report, path.transpose()?.as_deref())?;
                return Ok(());
            }
            let dir = out
                .or_else(|| cfg.out_dir.clone())
                .ok_or_else(|| Error::Config("pipeline needs --out or out_dir in the config".into()))?;
            let scene = pipeline::load_scene(&cfg)?;
            let run = pipeline::run_pipeline(&cfg, &scene)?;
            for path in pipeline::write_artifacts(&run, &dir, dump_ply)? {
                log::info!("wrote {}", path.display());
            }
        }
        Command::GapReport { depth, scene, gt, out } => {
            let grid = cfg.full_grid()?;
            let (depth_mask, scene) = match (depth, scene) {
                (Some(path), _) => (read_ovg(&path)?.into_mask()?, None),
                (None, Some(path)) => {
                    cfg.scene = Some(path);
                    let scene = pipeline::load_scene(&cfg)?;
                    let data = pipeline::render_scene(&cfg, &scene)?;
                    (pipeline::depth_grid(&data.depths, &data.rig, &grid)?, Some(scene))
                }
                (None, None) => return Err(Error::Config("gap-report needs --depth or --scene".into())),
            };
            let gt = match (gt, scene) {
                (Some(path), _) => read_ovg(&path)?.into_labels()?,
                (None, Some(scene)) => rasterize_gt(&scene, &grid)?,
                (None, None) => return Err(Error::Config("gap-report needs --gt".into())),
            };
            emit(&gap_report(&depth_mask, &gt.occupancy(), None)?, out.as_deref())?;
        }
        Command::Metrics {
            pred,
            gt,
            depth,
            num_classes,
            out,
        } => {
            let pred = read_ovg(&pred)?.into_labels()?;
            let gt = read_ovg(&gt)?.into_labels()?;
            let depth = match depth {
                Some(path) => read_ovg(&path)?.into_mask()?,
                None => pred.occupancy(),
            };
            emit(&compute_metrics(&pred, &gt, &depth, num_classes)?, out.as_deref())?;
        }
        Command::Bench { repeats, out, .. } => {
            let scene: SceneSpec = pipeline::load_scene(&cfg)?;
            emit(&pipeline::bench(&cfg, &scene, repeats)?, out.as_deref())?;
        }
    }
    Ok(())
}
