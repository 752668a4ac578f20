//! Region-guided refinement.
//!
//! R-EFormer scores each spatial region, runs only the top-K region experts
//! and blends their outputs. R²-EFormer instead applies one expert
//! repeatedly over a shrinking, nested set of voxels chosen by per-step
//! importance routers.

use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;

use crate::dca::{dca_module, DcaConfig, DcaParams, ImageContext};
use crate::error::{Error, Result};
use crate::nn::{FeatureVolume, Linear, ParameterStore, Registry};
use crate::voxel::{OccupancyMask, RegionPartition};

/// Region scores: a shared linear scorer over each region's mean feature.
/// Regions without voxels score `-inf`.
pub fn router_scores(f: &FeatureVolume, partition: &RegionPartition, router: &Linear) -> Result<Vec<f64>> {
    if partition.grid.dims != f.grid.dims {
        return Err(Error::shape(format!(
            "partition dims {:?} vs volume dims {:?}",
            partition.grid.dims, f.grid.dims
        )));
    }
    if router.in_dim() != f.channels() || router.out_dim() != 1 {
        return Err(Error::shape(format!(
            "router weight {:?} cannot score {} channels",
            router.weight.dims(),
            f.channels()
        )));
    }
    let c = f.channels();
    Ok(partition
        .masks
        .iter()
        .map(|mask| {
            let mut sum = vec![0.0f64; c];
            let mut n = 0usize;
            for v in mask.set_indices() {
                for (s, &x) in sum.iter_mut().zip(f.voxel(v)) {
                    *s += f64::from(x);
                }
                n += 1;
            }
            if n == 0 {
                return f64::NEG_INFINITY;
            }
            let pooled: Vec<f32> = sum.iter().map(|s| (s / n as f64) as f32).collect();
            router.score(&pooled)
        })
        .collect())
}

/// Outcome of top-K routing.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct RouteDecision {
    pub scores: Vec<f64>,
    /// Selected regions, ascending.
    pub selected: Vec<usize>,
    /// Softmax over the selected scores, aligned with `selected`.
    pub weights: Vec<f64>,
}

/// The `k` highest finite scores, ties to the lower index.
pub fn topk_select(scores: &[f64], k: usize) -> Result<RouteDecision> {
    if k == 0 || k > scores.len() {
        return Err(Error::invalid(format!("K = {k} with {} regions", scores.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("router produced a NaN score"));
    }
    let mut order: Vec<usize> = (0..scores.len()).filter(|&m| scores[m] > f64::NEG_INFINITY).collect();
    if order.len() < k {
        return Err(Error::invalid(format!(
            "K = {k} but only {} regions contain voxels",
            order.len()
        )));
    }
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut selected = order[..k].to_vec();
    selected.sort_unstable();
    let picked: Vec<f64> = selected.iter().map(|&m| scores[m]).collect();
    Ok(RouteDecision {
        scores: scores.to_vec(),
        selected,
        weights: crate::nn::softmax_f64(&picked),
    })
}

/// One region expert: a DCA module masked to its region.
pub fn expert_apply(
    f: &FeatureVolume,
    images: &ImageContext<'_>,
    region: &OccupancyMask,
    params: &DcaParams,
    cfg: &DcaConfig,
) -> Result<FeatureVolume> {
    dca_module(f, images, Some(region), params, cfg)
}

/// Router and per-region experts (`router.score`, `expert.{m}.*`).
#[derive(Debug, Clone, PartialEq)]
pub struct MoeParams {
    pub router: Linear,
    pub experts: Vec<DcaParams>,
}

impl MoeParams {
    pub fn register(reg: &mut Registry, regions: usize, cfg: &DcaConfig) {
        reg.linear("router.score", cfg.channels, 1, true);
        for m in 0..regions {
            DcaParams::register(reg, &format!("expert.{m}"), cfg);
        }
    }

    pub fn load(store: &ParameterStore, regions: usize, cfg: &DcaConfig) -> Result<Self> {
        Ok(Self {
            router: Linear::load(store, "router.score", true)?,
            experts: (0..regions)
                .map(|m| DcaParams::load(store, &format!("expert.{m}"), cfg))
                .collect::<Result<_>>()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeOutput {
    pub f_final: FeatureVolume,
    pub decision: RouteDecision,
    /// Experts that actually ran, ascending.
    pub executed: Vec<usize>,
}

/// Routes, runs the selected experts concurrently and blends their full
/// outputs as `sum_m w_m E_m`, accumulated in ascending region order.
pub fn r_eformer(
    f_out: &FeatureVolume,
    images: &ImageContext<'_>,
    partition: &RegionPartition,
    k: usize,
    params: &MoeParams,
    cfg: &DcaConfig,
) -> Result<MoeOutput> {
    if params.experts.len() != partition.num_regions() {
        return Err(Error::shape(format!(
            "{} experts for {} regions",
            params.experts.len(),
            partition.num_regions()
        )));
    }
    let scores = router_scores(f_out, partition, &params.router)?;
    let decision = topk_select(&scores, k)?;
    let runs = AtomicUsize::new(0);
    let outputs: Vec<(usize, FeatureVolume)> = decision
        .selected
        .par_iter()
        .map(|&m| {
            runs.fetch_add(1, Ordering::Relaxed);
            expert_apply(f_out, images, &partition.masks[m], &params.experts[m], cfg).map(|o| (m, o))
        })
        .collect::<Result<_>>()?;
    debug_assert_eq!(runs.load(Ordering::Relaxed), k);
    let mut acc = vec![0.0f64; f_out.tensor.len()];
    for ((_, out), &w) in outputs.iter().zip(&decision.weights) {
        for (a, &x) in acc.iter_mut().zip(out.tensor.data()) {
            *a += w * f64::from(x);
        }
    }
    let mut f_final = FeatureVolume::zeros(f_out.grid.clone(), f_out.channels());
    for (dst, a) in f_final.tensor.data_mut().iter_mut().zip(acc) {
        *dst = a as f32;
    }
    Ok(MoeOutput {
        f_final,
        executed: outputs.into_iter().map(|(m, _)| m).collect(),
        decision,
    })
}

/// Active-set sizes `k_t = max(1, floor(ratio_t * total))`, made strictly
/// decreasing by decrementing repeats. The schedule stops early, with a
/// warning, once a size would reach zero.
pub fn k_schedule(total: usize, ratios: &[f64]) -> Result<Vec<usize>> {
    if ratios.is_empty() || ratios[0] != 1.0 {
        return Err(Error::Config(format!("ratios must start at 1.0, got {ratios:?}")));
    }
    if !ratios.windows(2).all(|w| w[1] < w[0]) || ratios.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
        return Err(Error::Config(format!(
            "ratios must be strictly decreasing in (0, 1], got {ratios:?}"
        )));
    }
    if total == 0 {
        return Err(Error::invalid("schedule over an empty active set"));
    }
    let mut ks: Vec<usize> = Vec::with_capacity(ratios.len());
    for &r in ratios {
        // The small slack keeps exact products such as 0.29 * 100 from
        // flooring one below.
        let mut k = ((r * total as f64 + 1e-9).floor() as usize).max(1);
        if let Some(&prev) = ks.last() {
            if k >= prev {
                k = prev - 1;
            }
        }
        if k == 0 {
            log::warn!(
                "coverage schedule truncated to {} steps for {total} voxels",
                ks.len()
            );
            break;
        }
        ks.push(k);
    }
    Ok(ks)
}

/// Nested active sets of an R²-EFormer run.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSchedule {
    pub sizes: Vec<usize>,
    pub masks: Vec<OccupancyMask>,
}

impl MaskSchedule {
    pub fn iterations(&self) -> usize {
        self.masks.len()
    }

    pub fn is_nested(&self) -> bool {
        self.masks
            .windows(2)
            .all(|w| w[1].is_subset_of(&w[0]))
            && self.masks.iter().zip(&self.sizes).all(|(m, &k)| m.count() == k)
    }
}

/// Keeps the `k` voxels of `prev` with the highest importance
/// `router([feature, prev bit])`, ties to the lower voxel index.
pub fn recursion_mask(
    f_prev: &FeatureVolume,
    prev: &OccupancyMask,
    k: usize,
    router: &Linear,
) -> Result<OccupancyMask> {
    if prev.grid.dims != f_prev.grid.dims {
        return Err(Error::shape("mask and volume grids differ"));
    }
    if router.in_dim() != f_prev.channels() + 1 || router.out_dim() != 1 {
        return Err(Error::shape(format!(
            "recursion router weight {:?} for {} channels",
            router.weight.dims(),
            f_prev.channels()
        )));
    }
    let candidates = prev.set_indices();
    if k > candidates.len() {
        return Err(Error::invalid(format!(
            "k = {k} exceeds the {} active voxels",
            candidates.len()
        )));
    }
    let c = f_prev.channels();
    let mut scored: Vec<(f64, usize)> = candidates
        .par_iter()
        .map_init(
            || vec![0.0f32; c + 1],
            |input, &v| {
                input[..c].copy_from_slice(f_prev.voxel(v));
                input[c] = 1.0;
                (router.score(input), v)
            },
        )
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut next = OccupancyMask::empty(prev.grid.clone());
    for &(_, v) in &scored[..k] {
        next.set(v, true);
    }
    Ok(next)
}

/// Shared expert (`r2.*`) plus one recursion router per step after the
/// first (`r2.router.{t}`, `t >= 2`).
#[derive(Debug, Clone, PartialEq)]
pub struct R2Params {
    pub expert: DcaParams,
    /// Entry `t - 2` routes step `t`.
    pub routers: Vec<Linear>,
}

impl R2Params {
    pub fn register(reg: &mut Registry, steps: usize, cfg: &DcaConfig) {
        DcaParams::register(reg, "r2", cfg);
        for t in 2..=steps {
            reg.linear(&format!("r2.router.{t}"), cfg.channels + 1, 1, true);
        }
    }

    pub fn load(store: &ParameterStore, steps: usize, cfg: &DcaConfig) -> Result<Self> {
        Ok(Self {
            expert: DcaParams::load(store, "r2", cfg)?,
            routers: (2..=steps)
                .map(|t| Linear::load(store, &format!("r2.router.{t}"), true))
                .collect::<Result<_>>()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct R2Output {
    pub f_final: FeatureVolume,
    pub schedule: MaskSchedule,
}

/// `F^(t) = DCA(F^(t-1), images; M^(t))` for `t = 1..n`, with `M^(1)` the
/// full grid and later masks from [`recursion_mask`].
pub fn r2_eformer(
    f_out: &FeatureVolume,
    images: &ImageContext<'_>,
    ratios: &[f64],
    steps: usize,
    params: &R2Params,
    cfg: &DcaConfig,
) -> Result<R2Output> {
    if steps == 0 || steps > ratios.len() {
        return Err(Error::Config(format!(
            "{steps} recursion steps with {} coverage ratios",
            ratios.len()
        )));
    }
    if params.routers.len() + 1 < steps {
        return Err(Error::shape(format!(
            "{} recursion routers for {steps} steps",
            params.routers.len()
        )));
    }
    let sizes = k_schedule(f_out.num_voxels(), &ratios[..steps])?;
    let mut f = f_out.clone();
    let mut masks: Vec<OccupancyMask> = Vec::with_capacity(sizes.len());
    for (t, &k) in sizes.iter().enumerate() {
        let mask = match masks.last() {
            None => OccupancyMask::full(f.grid.clone()),
            Some(prev) => recursion_mask(&f, prev, k, &params.routers[t - 1])?,
        };
        f = dca_module(&f, images, Some(&mask), &params.expert, cfg)?;
        masks.push(mask);
    }
    Ok(R2Output {
        f_final: f,
        schedule: MaskSchedule { sizes, masks },
    })
}
