//! Depth-guided dual-projection view transformer.
//!
//! Stage 1 lifts image features into the grid along their depth
//! distributions and downsamples them together with the depth-derived
//! occupancy mask. Stage 2 densifies the coarse volume by querying the
//! images from every voxel. Stage 3 refines only the voxels backed by depth
//! evidence: first against depth features, with empty voxels reset to a
//! fixed embedding, then against image features.

use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::dca::{dca_module, DcaConfig, DcaParams, ImageContext};
use crate::error::{Error, Result};
use crate::geometry::{backproject_pixel, cam_to_ego, rig_depth_to_points, CameraRig, DepthMap, PointCloud};
use crate::nn::{FeatureMap, FeatureVolume, ParameterStore, Registry};
use crate::voxel::{downsample_features, downsample_mask, voxelize_points, GridSpec, OccupancyMask};

/// Uniform depth bins over `[d_min, d_max)`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthBins {
    pub d_min: f64,
    pub d_max: f64,
    pub count: usize,
}

impl Default for DepthBins {
    fn default() -> Self {
        Self {
            d_min: 1.0,
            d_max: 41.0,
            count: 16,
        }
    }
}

impl DepthBins {
    pub fn new(d_min: f64, d_max: f64, count: usize) -> Result<Self> {
        let bins = Self { d_min, d_max, count };
        bins.validate()?;
        Ok(bins)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d_min.is_finite() && self.d_max.is_finite() && self.d_min < self.d_max) {
            return Err(Error::Config(format!(
                "depth range [{}, {}) is empty",
                self.d_min, self.d_max
            )));
        }
        if self.count == 0 {
            return Err(Error::Config("need at least one depth bin".into()));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        (self.d_max - self.d_min) / self.count as f64
    }

    pub fn center(&self, bin: usize) -> f64 {
        self.d_min + (bin as f64 + 0.5) * self.width()
    }

    /// Bin holding `depth`; an interior edge belongs to the upper bin.
    pub fn bin_of(&self, depth: f64) -> Option<usize> {
        if !(depth >= self.d_min && depth < self.d_max) {
            return None;
        }
        let b = ((depth - self.d_min) / self.width()).floor() as usize;
        Some(b.min(self.count - 1))
    }
}

/// Per-pixel categorical distribution over depth bins, row-major pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthDistribution {
    pub width: usize,
    pub height: usize,
    pub bins: DepthBins,
    /// `height * width * bins.count` probabilities.
    pub probs: Vec<f64>,
    /// Pixels whose depth was missing or out of range carry a uniform
    /// distribution and are marked invalid.
    pub valid: Vec<bool>,
}

impl DepthDistribution {
    pub fn pixel(&self, u: usize, v: usize) -> &[f64] {
        let n = self.bins.count;
        let p = v * self.width + u;
        &self.probs[p * n..(p + 1) * n]
    }

    pub fn is_valid(&self, u: usize, v: usize) -> bool {
        self.valid[v * self.width + u]
    }
}

/// Bins a depth map. With `sigma_bins > 0` each one-hot is blurred by a
/// Gaussian over bin index and renormalized.
pub fn depth_to_distribution(
    depth: &DepthMap,
    bins: DepthBins,
    sigma_bins: f64,
) -> Result<DepthDistribution> {
    bins.validate()?;
    if !(sigma_bins >= 0.0 && sigma_bins.is_finite()) {
        return Err(Error::invalid(format!("sigma_bins must be >= 0, got {sigma_bins}")));
    }
    let n = bins.count;
    let pixels = depth.width * depth.height;
    let mut probs = vec![0.0; pixels * n];
    let mut valid = vec![false; pixels];
    for (p, (row, ok)) in probs.chunks_mut(n).zip(valid.iter_mut()).enumerate() {
        let hit = depth.values[p];
        match (hit.is_finite()).then(|| bins.bin_of(hit)).flatten() {
            Some(b) if sigma_bins == 0.0 => {
                row[b] = 1.0;
                *ok = true;
            }
            Some(b) => {
                for (i, slot) in row.iter_mut().enumerate() {
                    let d = i as f64 - b as f64;
                    *slot = (-0.5 * d * d / (sigma_bins * sigma_bins)).exp();
                }
                let total: f64 = row.iter().sum();
                row.iter_mut().for_each(|x| *x /= total);
                *ok = true;
            }
            None => row.fill(1.0 / n as f64),
        }
    }
    Ok(DepthDistribution {
        width: depth.width,
        height: depth.height,
        bins,
        probs,
        valid,
    })
}

/// Lift-splat: every valid pixel adds `prob[b] * feature` to the voxel
/// holding its back-projection at each bin center. Out-of-grid splats are
/// dropped. Each voxel sums its contributions in (camera, row, column, bin)
/// order, independent of the thread count.
pub fn forward_projection(
    features: &[FeatureMap],
    dists: &[DepthDistribution],
    rig: &CameraRig,
    grid: &GridSpec,
) -> Result<FeatureVolume> {
    if features.len() != rig.len() || dists.len() != rig.len() {
        return Err(Error::shape(format!(
            "{} feature maps and {} distributions for {} cameras",
            features.len(),
            dists.len(),
            rig.len()
        )));
    }
    let channels = features.first().map_or(0, FeatureMap::channels);
    for (i, ((map, dist), cam)) in features.iter().zip(dists).zip(&rig.cameras).enumerate() {
        let (w, h) = (cam.intrinsics.width, cam.intrinsics.height);
        if map.width() != w || map.height() != h || dist.width != w || dist.height != h {
            return Err(Error::shape(format!("camera {i}: feature or depth shape differs from image")));
        }
        if map.channels() != channels {
            return Err(Error::shape("feature maps disagree on channel count"));
        }
    }
    // Splat lists per camera row, computed in parallel and concatenated in
    // (camera, row) order; a stable sort by voxel keeps that order within
    // each voxel's sum.
    let mut splats: Vec<(usize, usize, usize, usize, f64)> = Vec::new();
    for (cam_idx, (dist, cam)) in dists.iter().zip(&rig.cameras).enumerate() {
        let rows: Vec<Vec<(usize, usize, usize, usize, f64)>> = (0..dist.height)
            .into_par_iter()
            .map(|v| {
                let mut out = Vec::new();
                for u in 0..dist.width {
                    if !dist.is_valid(u, v) {
                        continue;
                    }
                    for (b, &p) in dist.pixel(u, v).iter().enumerate() {
                        if p == 0.0 {
                            continue;
                        }
                        let local = backproject_pixel((u as f64, v as f64), dist.bins.center(b), &cam.intrinsics)
                            .expect("bin centers are positive");
                        if let Some(ijk) = grid.locate(&cam_to_ego(&local, &cam.extrinsics)) {
                            out.push((grid.index(ijk), cam_idx, v, u, p));
                        }
                    }
                }
                out
            })
            .collect();
        splats.extend(rows.into_iter().flatten());
    }
    splats.sort_by_key(|s| s.0);
    let mut vol = FeatureVolume::zeros(grid.clone(), channels);
    let mut acc = vec![0.0f64; channels];
    for group in splats.chunk_by(|a, b| a.0 == b.0) {
        acc.fill(0.0);
        for &(_, cam_idx, v, u, p) in group {
            for (a, &f) in acc.iter_mut().zip(features[cam_idx].pixel(v, u)) {
                *a += p * f64::from(f);
            }
        }
        for (dst, &a) in vol.voxel_mut(group[0].0).iter_mut().zip(&acc) {
            *dst = a as f32;
        }
    }
    Ok(vol)
}

/// Forward projection and depth voxelization, both downsampled by `factor`.
pub fn stage1(
    features: &[FeatureMap],
    dists: &[DepthDistribution],
    depth_points: &PointCloud,
    rig: &CameraRig,
    grid: &GridSpec,
    factor: [usize; 3],
) -> Result<(FeatureVolume, OccupancyMask)> {
    let lifted = forward_projection(features, dists, rig, grid)?;
    let f_down = downsample_features(&lifted, factor)?;
    let m_down = downsample_mask(&voxelize_points(depth_points, grid), factor)?;
    Ok((f_down, m_down))
}

/// Unmasked DCA over the whole coarse volume with image context.
pub fn stage2_densify(
    f_down: &FeatureVolume,
    images: &ImageContext<'_>,
    params: &DcaParams,
    cfg: &DcaConfig,
) -> Result<FeatureVolume> {
    dca_module(f_down, images, None, params, cfg)
}

/// Masked DCA with depth context; voxels outside `m_down` become `e_empty`.
pub fn stage3_geometric(
    f_dense: &FeatureVolume,
    depth: &ImageContext<'_>,
    m_down: &OccupancyMask,
    e_empty: &[f32],
    params: &DcaParams,
    cfg: &DcaConfig,
) -> Result<FeatureVolume> {
    if e_empty.len() != f_dense.channels() {
        return Err(Error::shape(format!(
            "e_empty has {} channels, volume {}",
            e_empty.len(),
            f_dense.channels()
        )));
    }
    let mut out = dca_module(f_dense, depth, Some(m_down), params, cfg)?;
    for v in 0..out.num_voxels() {
        if !m_down.get(v) {
            out.voxel_mut(v).copy_from_slice(e_empty);
        }
    }
    Ok(out)
}

/// Masked DCA with image context.
pub fn stage3_semantic(
    f_geo: &FeatureVolume,
    images: &ImageContext<'_>,
    m_down: &OccupancyMask,
    params: &DcaParams,
    cfg: &DcaConfig,
) -> Result<FeatureVolume> {
    dca_module(f_geo, images, Some(m_down), params, cfg)
}

/// Parameters of the three DCA stages plus the empty-voxel embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct D2vParams {
    pub dense: DcaParams,
    pub geo: DcaParams,
    pub sem: DcaParams,
    pub e_empty: Vec<f32>,
}

impl D2vParams {
    pub fn register(reg: &mut Registry, cfg: &DcaConfig) {
        DcaParams::register(reg, "d2v.dense", cfg);
        DcaParams::register(reg, "d2v.geo", cfg);
        DcaParams::register(reg, "d2v.sem", cfg);
        reg.add("d2v.e_empty", vec![cfg.channels], crate::nn::Init::Uniform { fan_in: cfg.channels });
    }

    pub fn load(store: &ParameterStore, cfg: &DcaConfig) -> Result<Self> {
        let e_empty = store.get("d2v.e_empty")?.data().to_vec();
        if e_empty.len() != cfg.channels {
            return Err(Error::shape("d2v.e_empty does not match channel count"));
        }
        Ok(Self {
            dense: DcaParams::load(store, "d2v.dense", cfg)?,
            geo: DcaParams::load(store, "d2v.geo", cfg)?,
            sem: DcaParams::load(store, "d2v.sem", cfg)?,
            e_empty,
        })
    }
}

/// Everything one forward pass consumes.
#[derive(Debug, Clone, Copy)]
pub struct D2vInputs<'a> {
    pub rig: &'a CameraRig,
    pub image_features: &'a [FeatureMap],
    pub depth_features: &'a [FeatureMap],
    pub depths: &'a [DepthMap],
    /// Full-resolution grid; the stages run at `grid.downsample(factor)`.
    pub grid: &'a GridSpec,
    pub factor: [usize; 3],
    pub bins: DepthBins,
    pub sigma_bins: f64,
}

/// Stage outputs; every volume lives on the downsampled grid.
#[derive(Debug, Clone, PartialEq)]
pub struct D2vOutput {
    pub f_down: FeatureVolume,
    pub f_dense: FeatureVolume,
    pub f_geo: FeatureVolume,
    pub f_out: FeatureVolume,
    pub m_down: OccupancyMask,
}

pub fn d2vformer_run(inputs: &D2vInputs<'_>, params: &D2vParams, cfg: &DcaConfig) -> Result<D2vOutput> {
    d2vformer_run_timed(inputs, params, cfg).map(|(out, _)| out)
}

/// Wall time of stage 1 and of stages 2-3 together.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimes {
    pub stage1: Duration,
    pub refine: Duration,
}

pub fn d2vformer_run_timed(
    inputs: &D2vInputs<'_>,
    params: &D2vParams,
    cfg: &DcaConfig,
) -> Result<(D2vOutput, StageTimes)> {
    let start = Instant::now();
    if inputs.depths.len() != inputs.rig.len() {
        return Err(Error::shape(format!(
            "{} depth maps for {} cameras",
            inputs.depths.len(),
            inputs.rig.len()
        )));
    }
    let dists = inputs
        .depths
        .iter()
        .map(|d| depth_to_distribution(d, inputs.bins, inputs.sigma_bins))
        .collect::<Result<Vec<_>>>()?;
    let points = rig_depth_to_points(inputs.depths, inputs.rig, 1)?;
    let (f_down, m_down) = stage1(
        inputs.image_features,
        &dists,
        &points,
        inputs.rig,
        inputs.grid,
        inputs.factor,
    )?;
    log::debug!(
        "stage 1: {} of {} coarse voxels occupied",
        m_down.count(),
        m_down.bits.len()
    );
    let stage1_done = Instant::now();
    let images = ImageContext::new(inputs.image_features, inputs.rig)?;
    let depth = ImageContext::new(inputs.depth_features, inputs.rig)?;
    let f_dense = stage2_densify(&f_down, &images, &params.dense, cfg)?;
    let f_geo = stage3_geometric(&f_dense, &depth, &m_down, &params.e_empty, &params.geo, cfg)?;
    let f_out = stage3_semantic(&f_geo, &images, &m_down, &params.sem, cfg)?;
    let times = StageTimes {
        stage1: stage1_done - start,
        refine: stage1_done.elapsed(),
    };
    Ok((
        D2vOutput {
            f_down,
            f_dense,
            f_geo,
            f_out,
            m_down,
        },
        times,
    ))
}
