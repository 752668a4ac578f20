use serde::Serialize;

use crate::error::{Error, Result};
use crate::voxel::{OccupancyMask, SemanticGrid, EMPTY_LABEL};

fn check_dims(a: &crate::voxel::GridSpec, b: &crate::voxel::GridSpec) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::shape(format!("grid dims {:?} vs {:?}", a.dims, b.dims)));
    }
    Ok(())
}

/// Binary IoU over the voxels of `eval_mask` (all voxels when `None`).
/// An empty union counts as perfect agreement.
pub fn iou_binary(pred: &OccupancyMask, gt: &OccupancyMask, eval_mask: Option<&OccupancyMask>) -> Result<f64> {
    check_dims(&pred.grid, &gt.grid)?;
    if let Some(m) = eval_mask {
        check_dims(&pred.grid, &m.grid)?;
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for v in 0..pred.bits.len() {
        if eval_mask.is_some_and(|m| !m.bits[v]) {
            continue;
        }
        let (p, g) = (pred.bits[v], gt.bits[v]);
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MiouReport {
    /// `None` for classes absent from both grids.
    pub per_class: Vec<Option<f64>>,
    /// Mean over the present classes; 1 when none is present.
    pub mean: f64,
}

/// Per-class IoU and their mean over classes present in either grid.
pub fn miou(
    pred: &SemanticGrid,
    gt: &SemanticGrid,
    eval_mask: Option<&OccupancyMask>,
    num_classes: usize,
) -> Result<MiouReport> {
    check_dims(&pred.grid, &gt.grid)?;
    if let Some(m) = eval_mask {
        check_dims(&pred.grid, &m.grid)?;
    }
    pred.check_classes(num_classes)?;
    gt.check_classes(num_classes)?;
    let mut inter = vec![0usize; num_classes];
    let mut union = vec![0usize; num_classes];
    for v in 0..pred.labels.len() {
        if eval_mask.is_some_and(|m| !m.bits[v]) {
            continue;
        }
        let (p, g) = (pred.labels[v], gt.labels[v]);
        if p == g {
            if p != EMPTY_LABEL {
                inter[p as usize] += 1;
                union[p as usize] += 1;
            }
            continue;
        }
        if p != EMPTY_LABEL {
            union[p as usize] += 1;
        }
        if g != EMPTY_LABEL {
            union[g as usize] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = inter
        .iter()
        .zip(&union)
        .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        1.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(MiouReport { per_class, mean })
}
