//! End-to-end runs: scene, view transformer, region refinement, decoder and
//! metrics, plus the artifacts, benchmark and shape check built on them.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use indexmap::IndexMap;
use serde::Serialize;

use crate::config::{ExpertMode, RunConfig};
use crate::d2vformer::{d2vformer_run_timed, stage1, stage3_geometric, D2vInputs, D2vOutput, D2vParams, depth_to_distribution};
use crate::dca::{DcaParams, ImageContext};
use crate::decoder::{decode, ClassHead};
use crate::error::{Error, Result};
use crate::eval::{gap_report, iou_binary, miou, GapReport};
use crate::experts::{r2_eformer, r_eformer, MoeParams, R2Params};
use crate::geometry::{rig_depth_to_points, CameraRig, DepthMap, Point3, PointCloud};
use crate::io::{write_ovg, Calibration, OvgFile};
use crate::nn::{FeatureVolume, ParameterStore, Registry};
use crate::synth::{add_depth_noise, gen_scene, observe, rasterize_gt, Observation, SceneSpec};
use crate::voxel::{region_partition, voxelize_points, GridSpec, OccupancyMask, RegionPartition, SemanticGrid};

/// All weights of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineParams {
    pub d2v: D2vParams,
    pub moe: Option<MoeParams>,
    pub r2: Option<R2Params>,
    pub head: ClassHead,
}

impl PipelineParams {
    pub fn register(reg: &mut Registry, cfg: &RunConfig, regions: usize, num_classes: usize) {
        D2vParams::register(reg, &cfg.dca);
        match cfg.experts.mode {
            ExpertMode::Moe => MoeParams::register(reg, regions, &cfg.dca),
            ExpertMode::Mor => R2Params::register(reg, cfg.experts.steps, &cfg.dca),
            ExpertMode::None => {}
        }
        ClassHead::register(reg, cfg.dca.channels, num_classes);
    }

    pub fn load(store: &ParameterStore, cfg: &RunConfig, regions: usize) -> Result<Self> {
        let dca = &cfg.dca;
        Ok(Self {
            d2v: D2vParams::load(store, dca)?,
            moe: match cfg.experts.mode {
                ExpertMode::Moe => Some(MoeParams::load(store, regions, dca)?),
                _ => None,
            },
            r2: match cfg.experts.mode {
                ExpertMode::Mor => Some(R2Params::load(store, cfg.experts.steps, dca)?),
                _ => None,
            },
            head: ClassHead::load(store)?,
        })
    }

    pub fn seeded(cfg: &RunConfig, regions: usize, num_classes: usize) -> Result<Self> {
        let mut reg = Registry::new();
        Self::register(&mut reg, cfg, regions, num_classes);
        Self::load(&ParameterStore::build(cfg.seed, &reg), cfg, regions)
    }
}

/// The configured scene file, or a generated one; a calibration file
/// replaces the scene's rig.
pub fn load_scene(cfg: &RunConfig) -> Result<SceneSpec> {
    let mut scene = match &cfg.scene {
        Some(path) => SceneSpec::load(path)?,
        None => gen_scene(cfg.seed, cfg.difficulty, &cfg.full_grid()?)?,
    };
    if let Some(path) = &cfg.calibration {
        scene.rig = Calibration::load(path)?;
        scene.validate()?;
    }
    Ok(scene)
}

/// Rendered inputs for every camera.
#[derive(Debug, Clone)]
pub struct SceneData {
    pub rig: CameraRig,
    pub observations: Vec<Observation>,
    /// Depth maps fed to the model, noisy if configured.
    pub depths: Vec<DepthMap>,
}

pub fn render_scene(cfg: &RunConfig, scene: &SceneSpec) -> Result<SceneData> {
    let rig = scene.camera_rig()?;
    let observations = observe(scene, &rig, cfg.dca.channels, cfg.seed)?;
    let depths = observations
        .iter()
        .enumerate()
        .map(|(i, o)| {
            if cfg.depth_noise > 0.0 {
                add_depth_noise(&o.depth, cfg.depth_noise, cfg.seed.wrapping_add(i as u64))
            } else {
                o.depth.clone()
            }
        })
        .collect();
    Ok(SceneData {
        rig,
        observations,
        depths,
    })
}

/// Occupancy from back-projected depth on the full grid.
pub fn depth_grid(depths: &[DepthMap], rig: &CameraRig, grid: &GridSpec) -> Result<OccupancyMask> {
    Ok(voxelize_points(&rig_depth_to_points(depths, rig, 1)?, grid))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MoeReport {
    pub scores: Vec<f64>,
    pub selected: Vec<usize>,
    pub weights: Vec<f64>,
    pub executed: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MorReport {
    pub sizes: Vec<usize>,
    pub mask_counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoutingReport {
    pub expert: String,
    pub stage1_occupancy: f64,
    pub moe: Option<MoeReport>,
    pub mor: Option<MorReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub iou: f64,
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
    pub gap: GapReport,
}

/// Metrics of a prediction against ground truth on the full grid, plus the
/// gap between depth-derived occupancy and the ground truth.
pub fn compute_metrics(
    pred: &SemanticGrid,
    gt: &SemanticGrid,
    depth: &OccupancyMask,
    num_classes: usize,
) -> Result<MetricsReport> {
    let gt_occ = gt.occupancy();
    let m = miou(pred, gt, None, num_classes)?;
    Ok(MetricsReport {
        iou: iou_binary(&pred.occupancy(), &gt_occ, None)?,
        per_class: m.per_class,
        miou: m.mean,
        gap: gap_report(depth, &gt_occ, None)?,
    })
}

/// Wall times of one run.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Timings {
    pub stage1: Duration,
    pub d2v: Duration,
    pub experts: Duration,
    pub decode: Duration,
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub scene: SceneSpec,
    pub d2v: D2vOutput,
    pub f_final: FeatureVolume,
    pub depth_grid: OccupancyMask,
    pub pred: SemanticGrid,
    pub gt: SemanticGrid,
    pub routing: RoutingReport,
    pub metrics: MetricsReport,
    pub timings: Timings,
}

fn invariant(ok: bool, what: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Invariant(what()))
    }
}

/// Runs the model on `scene` and checks the run's invariants; a violation
/// is reported as [`Error::Invariant`].
pub fn run_pipeline(cfg: &RunConfig, scene: &SceneSpec) -> Result<PipelineRun> {
    cfg.validate()?;
    let grid = cfg.full_grid()?;
    let coarse = cfg.working_grid()?;
    let partition = region_partition(&coarse, &cfg.experts.height_edges, &cfg.experts.distance_edges)
        .map_err(|e| Error::Config(e.to_string()))?;
    let params = PipelineParams::seeded(cfg, partition.num_regions(), scene.num_classes)?;
    let data = render_scene(cfg, scene)?;
    let image_features: Vec<_> = data.observations.iter().map(|o| o.image_features.clone()).collect();
    let depth_features: Vec<_> = data.observations.iter().map(|o| o.depth_features.clone()).collect();
    let inputs = D2vInputs {
        rig: &data.rig,
        image_features: &image_features,
        depth_features: &depth_features,
        depths: &data.depths,
        grid: &grid,
        factor: cfg.factor,
        bins: cfg.depth_bins,
        sigma_bins: cfg.sigma_bins,
    };
    let (d2v, times) = d2vformer_run_timed(&inputs, &params.d2v, &cfg.dca)?;
    check_d2v(&d2v, &params.d2v.e_empty)?;
    let images = ImageContext::new(&image_features, &data.rig)?;
    let started = Instant::now();
    let mut routing = RoutingReport {
        expert: cfg.experts.mode.as_str().to_string(),
        stage1_occupancy: crate::voxel::occupancy_ratio(&d2v.m_down),
        moe: None,
        mor: None,
    };
    let f_final = match (&params.moe, &params.r2) {
        (Some(moe), _) => run_moe(cfg, &d2v.f_out, &images, &partition, moe, &mut routing)?,
        (_, Some(r2)) => {
            let out = r2_eformer(&d2v.f_out, &images, &cfg.experts.ratios, cfg.experts.steps, r2, &cfg.dca)?;
            invariant(out.schedule.is_nested(), || "recursion masks are not nested".into())?;
            routing.mor = Some(MorReport {
                sizes: out.schedule.sizes.clone(),
                mask_counts: out.schedule.masks.iter().map(OccupancyMask::count).collect(),
            });
            out.f_final
        }
        _ => d2v.f_out.clone(),
    };
    invariant(f_final.tensor.is_finite(), || "refined features are not finite".into())?;
    let experts_time = started.elapsed();
    let started = Instant::now();
    let (_, pred) = decode(&f_final, &params.head, &grid)?;
    let gt = rasterize_gt(scene, &grid)?;
    let depth = depth_grid(&data.depths, &data.rig, &grid)?;
    let metrics = compute_metrics(&pred, &gt, &depth, scene.num_classes)?;
    let implied = metrics.gap.implied_iou(depth.count(), gt.occupancy().count());
    invariant((implied - metrics.gap.iou).abs() < 1e-9, || {
        format!("gap report IoU {} disagrees with its error fractions ({implied})", metrics.gap.iou)
    })?;
    Ok(PipelineRun {
        scene: scene.clone(),
        d2v,
        f_final,
        depth_grid: depth,
        pred,
        gt,
        routing,
        metrics,
        timings: Timings {
            stage1: times.stage1,
            d2v: times.refine,
            experts: experts_time,
            decode: started.elapsed(),
        },
    })
}

fn run_moe(
    cfg: &RunConfig,
    f_out: &FeatureVolume,
    images: &ImageContext<'_>,
    partition: &RegionPartition,
    params: &MoeParams,
    routing: &mut RoutingReport,
) -> Result<FeatureVolume> {
    let out = r_eformer(f_out, images, partition, cfg.experts.k, params, &cfg.dca)?;
    invariant(out.executed.len() == cfg.experts.k, || {
        format!("{} experts ran, expected {}", out.executed.len(), cfg.experts.k)
    })?;
    let total: f64 = out.decision.weights.iter().sum();
    invariant((total - 1.0).abs() < 1e-6, || format!("routing weights sum to {total}"))?;
    routing.moe = Some(MoeReport {
        scores: out.decision.scores.clone(),
        selected: out.decision.selected.clone(),
        weights: out.decision.weights.clone(),
        executed: out.executed.clone(),
    });
    Ok(out.f_final)
}

fn check_d2v(out: &D2vOutput, e_empty: &[f32]) -> Result<()> {
    for v in 0..out.f_geo.num_voxels() {
        if !out.m_down.get(v) {
            invariant(out.f_geo.voxel(v) == e_empty, || {
                format!("voxel {v} outside the depth mask does not hold the empty embedding")
            })?;
        }
    }
    for (name, vol) in [("F_down", &out.f_down), ("F_dense", &out.f_dense), ("F_geo", &out.f_geo), ("F_out", &out.f_out)] {
        invariant(vol.tensor.is_finite(), || format!("{name} has non-finite values"))?;
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// ASCII PLY with one labelled vertex per point.
pub fn write_ply(path: &Path, points: &[(Point3, u16)]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        out,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nproperty ushort label\nend_header",
        points.len()
    )?;
    for (p, label) in points {
        writeln!(out, "{} {} {} {label}", p.x as f32, p.y as f32, p.z as f32)?;
    }
    out.flush()?;
    Ok(())
}

/// Artifact file names written by [`write_artifacts`].
pub const ARTIFACTS: [&str; 9] = [
    "scene.json",
    "f_out.ovg",
    "f_final.ovg",
    "m_down.ovg",
    "depth_grid.ovg",
    "pred_labels.ovg",
    "gt_labels.ovg",
    "routing.json",
    "metrics.json",
];

/// Writes every artifact of `run` into `dir`, plus PLY point lists when
/// `dump_ply` is set. Returns the written paths.
pub fn write_artifacts(run: &PipelineRun, dir: &Path, dump_ply: bool) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let path = |name: &str| dir.join(name);
    run.scene.save(&path("scene.json"))?;
    write_ovg(&path("f_out.ovg"), &OvgFile::from_features(&run.d2v.f_out))?;
    write_ovg(&path("f_final.ovg"), &OvgFile::from_features(&run.f_final))?;
    write_ovg(&path("m_down.ovg"), &OvgFile::from_mask(&run.d2v.m_down))?;
    write_ovg(&path("depth_grid.ovg"), &OvgFile::from_mask(&run.depth_grid))?;
    write_ovg(&path("pred_labels.ovg"), &OvgFile::from_labels(&run.pred))?;
    write_ovg(&path("gt_labels.ovg"), &OvgFile::from_labels(&run.gt))?;
    write_json(&path("routing.json"), &run.routing)?;
    write_json(&path("metrics.json"), &run.metrics)?;
    let mut written: Vec<PathBuf> = ARTIFACTS.iter().map(|n| path(n)).collect();
    if dump_ply {
        let voxels = |labels: &SemanticGrid| -> Vec<(Point3, u16)> {
            (0..labels.labels.len())
                .filter(|&v| labels.labels[v] != crate::voxel::EMPTY_LABEL)
                .map(|v| (labels.grid.center_of(v), labels.labels[v]))
                .collect()
        };
        write_ply(&path("pred_voxels.ply"), &voxels(&run.pred))?;
        write_ply(&path("gt_voxels.ply"), &voxels(&run.gt))?;
        written.push(path("pred_voxels.ply"));
        written.push(path("gt_voxels.ply"));
    }
    Ok(written)
}

/// Per-stage wall times in milliseconds, one sample per repeat.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub repeats: usize,
    pub expert: String,
    pub stages: IndexMap<String, Vec<f64>>,
}

/// Times `repeats` full runs. Stage labels are `stage1`, `D2V` (stages 2
/// and 3) and `RE` or `R2E` for the configured experts.
pub fn bench(cfg: &RunConfig, scene: &SceneSpec, repeats: usize) -> Result<BenchReport> {
    if repeats == 0 {
        return Err(Error::Config("repeats must be >= 1".into()));
    }
    let mut stages: IndexMap<String, Vec<f64>> = IndexMap::new();
    let ms = |d: Duration| d.as_secs_f64() * 1e3;
    for _ in 0..repeats {
        let run = run_pipeline(cfg, scene)?;
        stages.entry("stage1".into()).or_default().push(ms(run.timings.stage1));
        stages.entry("D2V".into()).or_default().push(ms(run.timings.d2v));
        let label = match cfg.experts.mode {
            ExpertMode::Moe => Some("RE"),
            ExpertMode::Mor => Some("R2E"),
            ExpertMode::None => None,
        };
        if let Some(label) = label {
            stages.entry(label.into()).or_default().push(ms(run.timings.experts));
        }
    }
    Ok(BenchReport {
        repeats,
        expert: cfg.experts.mode.as_str().to_string(),
        stages,
    })
}

/// Shapes observed by [`paper_scale_check`]; no numeric claims.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShapeReport {
    pub full_dims: [usize; 3],
    pub working_dims: [usize; 3],
    pub working_resolution: [f64; 3],
    pub channels: usize,
    pub cameras: usize,
    pub f_down_dims: Vec<usize>,
    pub active_voxels: usize,
    pub f_geo_dims: Vec<usize>,
    pub finite: bool,
    pub elapsed_ms: f64,
}

/// Stage 1 and one masked DCA step at benchmark grid sizes.
pub fn paper_scale_check(cfg: &RunConfig) -> Result<ShapeReport> {
    let start = Instant::now();
    let grid = cfg.full_grid()?;
    let scene = load_scene(cfg)?;
    let data = render_scene(cfg, &scene)?;
    let dists = data
        .depths
        .iter()
        .map(|d| depth_to_distribution(d, cfg.depth_bins, cfg.sigma_bins))
        .collect::<Result<Vec<_>>>()?;
    let image_features: Vec<_> = data.observations.iter().map(|o| o.image_features.clone()).collect();
    let depth_features: Vec<_> = data.observations.iter().map(|o| o.depth_features.clone()).collect();
    let points: PointCloud = rig_depth_to_points(&data.depths, &data.rig, 1)?;
    let (f_down, m_down) = stage1(&image_features, &dists, &points, &data.rig, &grid, cfg.factor)?;
    let mut reg = Registry::new();
    DcaParams::register(&mut reg, "d2v.geo", &cfg.dca);
    reg.add("d2v.e_empty", vec![cfg.dca.channels], crate::nn::Init::Uniform { fan_in: cfg.dca.channels });
    let store = ParameterStore::build(cfg.seed, &reg);
    let params = DcaParams::load(&store, "d2v.geo", &cfg.dca)?;
    let e_empty = store.get("d2v.e_empty")?.data().to_vec();
    let depth_ctx = ImageContext::new(&depth_features, &data.rig)?;
    let f_geo = stage3_geometric(&f_down, &depth_ctx, &m_down, &e_empty, &params, &cfg.dca)?;
    let coarse = &f_down.grid;
    Ok(ShapeReport {
        full_dims: grid.dims,
        working_dims: coarse.dims,
        working_resolution: coarse.resolution,
        channels: f_geo.channels(),
        cameras: data.rig.len(),
        f_down_dims: f_down.tensor.dims().to_vec(),
        active_voxels: m_down.count(),
        f_geo_dims: f_geo.tensor.dims().to_vec(),
        finite: f_geo.tensor.is_finite(),
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        RunConfig {
            grid: crate::config::GridConfig {
                origin: [-6.0, -6.0, -1.0],
                resolution: 0.4,
                dims: [30, 30, 8],
            },
            dca: crate::dca::DcaConfig::new(8, 2, 2),
            ..RunConfig::default()
        }
    }

    #[test]
    fn small_runs_for_each_expert_mode() {
        for mode in [ExpertMode::Moe, ExpertMode::Mor, ExpertMode::None] {
            let mut cfg = small();
            cfg.experts.mode = mode;
            if mode == ExpertMode::Moe {
                cfg.experts.k = 2;
            }
            let scene = load_scene(&cfg).unwrap();
            let run = run_pipeline(&cfg, &scene).unwrap();
            assert_eq!(run.pred.grid.dims, [30, 30, 8]);
            assert_eq!(run.routing.moe.is_some(), mode == ExpertMode::Moe);
            assert_eq!(run.routing.mor.is_some(), mode == ExpertMode::Mor);
            assert!(run.metrics.gap.occlusion_miss > 0.0);
        }
    }

    #[test]
    fn bench_reports_configured_stages() {
        let cfg = RunConfig {
            experts: crate::config::ExpertConfig { mode: ExpertMode::None, ..Default::default() },
            ..small()
        };
        let scene = load_scene(&cfg).unwrap();
        let report = bench(&cfg, &scene, 2).unwrap();
        assert_eq!(report.stages.keys().collect::<Vec<_>>(), ["stage1", "D2V"]);
        assert!(report.stages.values().all(|s| s.len() == 2 && s.iter().all(|&t| t >= 0.0)));
    }
}
