use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::voxel::OccupancyMask;

use super::iou_binary;

/// How far depth-derived occupancy is from the occupancy ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub iou: f64,
    /// Fraction of depth-grid voxels that are empty in the ground truth.
    pub over_densification: f64,
    /// Fraction of ground-truth voxels the depth grid misses.
    pub occlusion_miss: f64,
}

impl GapReport {
    /// Recomputes IoU from the error fractions and the two set sizes.
    pub fn implied_iou(&self, depth_count: usize, gt_count: usize) -> f64 {
        let (d, g) = (depth_count as f64, gt_count as f64);
        let denom = g + self.over_densification * d;
        if denom == 0.0 {
            1.0
        } else {
            (1.0 - self.occlusion_miss) * g / denom
        }
    }
}

/// All counts are restricted to `eval_mask` when given.
pub fn gap_report(
    depth_grid: &OccupancyMask,
    gt: &OccupancyMask,
    eval_mask: Option<&OccupancyMask>,
) -> Result<GapReport> {
    let iou = iou_binary(depth_grid, gt, eval_mask)?;
    if let Some(m) = eval_mask {
        if m.grid.dims != gt.grid.dims {
            return Err(Error::shape("eval mask dims differ"));
        }
    }
    let (mut depth_only, mut gt_only, mut depth_n, mut gt_n) = (0usize, 0usize, 0usize, 0usize);
    for v in 0..gt.bits.len() {
        if eval_mask.is_some_and(|m| !m.bits[v]) {
            continue;
        }
        let (d, g) = (depth_grid.bits[v], gt.bits[v]);
        depth_n += usize::from(d);
        gt_n += usize::from(g);
        depth_only += usize::from(d && !g);
        gt_only += usize::from(g && !d);
    }
    let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(GapReport {
        iou,
        over_densification: frac(depth_only, depth_n),
        occlusion_miss: frac(gt_only, gt_n),
    })
}
