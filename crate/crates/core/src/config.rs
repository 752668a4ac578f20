//! Run configuration for the end-to-end pipeline.
//!
//! Every field has a desk-scale default, so `{}` is a valid config. Unknown
//! keys are rejected.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::d2vformer::DepthBins;
use crate::dca::DcaConfig;
use crate::error::{Error, Result};
use crate::experts::k_schedule;
use crate::synth::Difficulty;
use crate::voxel::{GridSpec, DEFAULT_DISTANCE_EDGES, DEFAULT_HEIGHT_EDGES};

/// Region refinement after the view transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpertMode {
    /// Top-K region experts.
    Moe,
    /// One recursively applied expert.
    Mor,
    None,
}

impl ExpertMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Moe => "moe",
            Self::Mor => "mor",
            Self::None => "none",
        }
    }
}

impl FromStr for ExpertMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moe" => Ok(Self::Moe),
            "mor" => Ok(Self::Mor),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!("unknown expert mode {other:?}; expected moe, mor or none"))),
        }
    }
}

/// Isotropic full-resolution grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub origin: [f64; 3],
    pub resolution: f64,
    pub dims: [usize; 3],
}

impl GridConfig {
    pub fn spec(&self) -> Result<GridSpec> {
        GridSpec::new(self.origin, self.resolution, self.dims).map_err(|e| Error::Config(e.to_string()))
    }
}

impl From<&GridSpec> for GridConfig {
    fn from(g: &GridSpec) -> Self {
        Self {
            origin: g.origin,
            resolution: g.resolution[0],
            dims: g.dims,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertConfig {
    pub mode: ExpertMode,
    /// Regions kept by the top-K router.
    pub k: usize,
    /// Coverage ratio per recursion step, starting at 1.
    pub ratios: Vec<f64>,
    /// Recursion steps.
    pub steps: usize,
    pub height_edges: Vec<f64>,
    pub distance_edges: Vec<f64>,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            mode: ExpertMode::Mor,
            k: 3,
            ratios: vec![1.0, 0.75, 0.5],
            steps: 3,
            height_edges: DEFAULT_HEIGHT_EDGES.to_vec(),
            distance_edges: DEFAULT_DISTANCE_EDGES.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Scene JSON; a scene is generated from `difficulty` and `seed` when absent.
    pub scene: Option<PathBuf>,
    /// Calibration JSON overriding the scene's rig.
    pub calibration: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub difficulty: Difficulty,
    pub grid: GridConfig,
    /// Downsampling factor per axis between the full and the working grid.
    pub factor: [usize; 3],
    pub depth_bins: DepthBins,
    /// Gaussian blur of the depth distribution, in bins.
    pub sigma_bins: f64,
    /// Standard deviation of depth noise in meters.
    pub depth_noise: f64,
    pub dca: DcaConfig,
    pub experts: ExpertConfig,
    pub seed: u64,
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene: None,
            calibration: None,
            out_dir: None,
            difficulty: Difficulty::Occluded,
            grid: GridConfig::from(&GridSpec::desk()),
            factor: [2, 2, 2],
            depth_bins: DepthBins::default(),
            sigma_bins: 0.0,
            depth_noise: 0.0,
            dca: DcaConfig::new(16, 8, 4),
            experts: ExpertConfig::default(),
            seed: 0,
            threads: None,
        }
    }
}

impl RunConfig {
    /// Occupancy-benchmark sizes: a 200x200x16 grid at 0.4 m reduced by
    /// (2, 2, 1), with 32 channels.
    pub fn paper_scale() -> Self {
        Self {
            grid: GridConfig::from(&GridSpec::occ3d()),
            factor: [2, 2, 1],
            dca: DcaConfig::new(32, 8, 4),
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn full_grid(&self) -> Result<GridSpec> {
        self.grid.spec()
    }

    pub fn working_grid(&self) -> Result<GridSpec> {
        self.full_grid()?.downsample(self.factor).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| Error::Config(e.to_string());
        self.working_grid()?;
        if self.factor.contains(&0) {
            return Err(Error::Config("downsampling factor must be >= 1".into()));
        }
        self.depth_bins.validate()?;
        if !(self.sigma_bins >= 0.0 && self.sigma_bins.is_finite()) {
            return Err(Error::Config("sigma_bins must be finite and >= 0".into()));
        }
        if !(self.depth_noise >= 0.0 && self.depth_noise.is_finite()) {
            return Err(Error::Config("depth_noise must be finite and >= 0".into()));
        }
        self.dca.validate()?;
        if self.dca.channels < 3 {
            return Err(Error::Config("synthetic features need at least 3 channels".into()));
        }
        let e = &self.experts;
        if e.k == 0 {
            return Err(Error::Config("experts.k must be >= 1".into()));
        }
        if e.steps == 0 || e.steps > e.ratios.len() {
            return Err(Error::Config(format!(
                "experts.steps = {} needs that many ratios, got {}",
                e.steps,
                e.ratios.len()
            )));
        }
        k_schedule(1000, &e.ratios)?;
        crate::voxel::region_partition(&self.working_grid()?, &e.height_edges, &e.distance_edges)
            .map_err(cfg_err)?;
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        Ok(())
    }
}
