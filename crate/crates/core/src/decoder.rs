//! Occupancy decoder: trilinear upsampling to the full grid, then a linear
//! class head whose last channel means "empty".

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::{FeatureVolume, Linear, ParameterStore, Registry};
#[cfg(test)]
use crate::nn::Tensor;
use crate::voxel::{GridSpec, SemanticGrid, EMPTY_LABEL};

/// Samples `vol` at the voxel centers of `target`, interpolating between
/// source voxel centers and clamping at the borders.
pub fn trilinear_upsample(vol: &FeatureVolume, target: &GridSpec) -> Result<FeatureVolume> {
    let src = &vol.grid;
    let c = vol.channels();
    let mut out = FeatureVolume::zeros(target.clone(), c);
    if c == 0 {
        return Ok(out);
    }
    // Per-axis (lower index, upper index, upper weight) for every target index.
    let taps: Vec<Vec<(usize, usize, f64)>> = (0..3)
        .map(|a| {
            (0..target.dims[a])
                .map(|i| {
                    let world = target.origin[a] + (i as f64 + 0.5) * target.resolution[a];
                    let pos = (world - src.origin[a]) / src.resolution[a] - 0.5;
                    let max = (src.dims[a] - 1) as f64;
                    let pos = pos.clamp(0.0, max);
                    let lo = pos.floor() as usize;
                    let hi = (lo + 1).min(src.dims[a] - 1);
                    (lo, hi, pos - lo as f64)
                })
                .collect()
        })
        .collect();
    out.tensor
        .data_mut()
        .par_chunks_mut(c)
        .enumerate()
        .for_each(|(v, dst)| {
            let [i, j, k] = target.coords(v);
            let (tx, ty, tz) = (taps[0][i], taps[1][j], taps[2][k]);
            let mut acc = vec![0.0f64; c];
            for (xi, wx) in [(tx.0, 1.0 - tx.2), (tx.1, tx.2)] {
                for (yi, wy) in [(ty.0, 1.0 - ty.2), (ty.1, ty.2)] {
                    for (zi, wz) in [(tz.0, 1.0 - tz.2), (tz.1, tz.2)] {
                        let w = wx * wy * wz;
                        if w == 0.0 {
                            continue;
                        }
                        for (a, &x) in acc.iter_mut().zip(vol.voxel(src.index([xi, yi, zi]))) {
                            *a += w * f64::from(x);
                        }
                    }
                }
            }
            for (d, a) in dst.iter_mut().zip(acc) {
                *d = a as f32;
            }
        });
    Ok(out)
}

/// `C -> num_classes + 1` projection (`head.cls`).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassHead {
    pub proj: Linear,
}

impl ClassHead {
    pub const NAME: &'static str = "head.cls";

    pub fn register(reg: &mut Registry, channels: usize, num_classes: usize) {
        reg.linear(Self::NAME, channels, num_classes + 1, true);
    }

    pub fn load(store: &ParameterStore) -> Result<Self> {
        Ok(Self {
            proj: Linear::load(store, Self::NAME, true)?,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.proj.out_dim() - 1
    }

    pub fn logits(&self, vol: &FeatureVolume) -> Result<FeatureVolume> {
        let [x, y, z] = vol.grid.dims;
        let flat = vol.tensor.clone().reshape(vec![vol.num_voxels(), vol.channels()])?;
        let out = self.proj.forward(&flat)?;
        FeatureVolume::new(vol.grid.clone(), out.reshape(vec![x, y, z, self.proj.out_dim()])?)
    }
}

/// Per-voxel argmax with ties to the lower channel; the last channel maps
/// to [`EMPTY_LABEL`].
pub fn argmax_labels(logits: &FeatureVolume) -> Result<SemanticGrid> {
    let c = logits.channels();
    if c < 2 {
        return Err(Error::shape("logits need a class channel and the empty channel"));
    }
    let labels = (0..logits.num_voxels())
        .map(|v| {
            let row = logits.voxel(v);
            let best = (1..c).fold(0, |b, i| if row[i] > row[b] { i } else { b });
            if best == c - 1 {
                EMPTY_LABEL
            } else {
                best as u16
            }
        })
        .collect();
    SemanticGrid::new(logits.grid.clone(), labels)
}

/// Upsamples to `target`, applies the head and takes the argmax.
pub fn decode(vol: &FeatureVolume, head: &ClassHead, target: &GridSpec) -> Result<(FeatureVolume, SemanticGrid)> {
    let up = trilinear_upsample(vol, target)?;
    let logits = head.logits(&up)?;
    let labels = argmax_labels(&logits)?;
    Ok((logits, labels))
}
