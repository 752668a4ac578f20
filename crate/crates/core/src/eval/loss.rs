use serde::{Deserialize, Serialize};

use crate::d2vformer::DepthDistribution;
use crate::error::{Error, Result};
use crate::nn::{FeatureVolume, Linear, ParameterStore, Registry};
use crate::voxel::{SemanticGrid, EMPTY_LABEL};

/// Probabilities are clamped here before taking logs.
const MIN_PROB: f64 = 1e-12;

/// Per-voxel-weighted cross-entropy. `logits` has one channel per class
/// plus a final channel for the empty label.
pub fn weighted_ce(logits: &FeatureVolume, labels: &SemanticGrid, weights: &[f64]) -> Result<f64> {
    if logits.grid.dims != labels.grid.dims || weights.len() != logits.num_voxels() {
        return Err(Error::shape("logits, labels and weights must cover the same voxels"));
    }
    let channels = logits.channels();
    if channels < 2 {
        return Err(Error::shape("need at least one class channel and the empty channel"));
    }
    labels.check_classes(channels - 1)?;
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(Error::invalid("weights must be finite and non-negative"));
    }
    let total_weight: f64 = weights.iter().sum();
    if total_weight == 0.0 {
        return Err(Error::invalid("all voxel weights are zero"));
    }
    let mut acc = 0.0;
    for (v, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let row: Vec<f64> = logits.voxel(v).iter().map(|&x| f64::from(x)).collect();
        let target = match labels.labels[v] {
            EMPTY_LABEL => channels - 1,
            c => c as usize,
        };
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        acc += w * (lse - row[target]);
    }
    Ok(acc / total_weight)
}

/// Mean cross-entropy of the predicted depth distribution against the
/// ground-truth bin, over pixels that have one.
pub fn depth_loss(pred: &DepthDistribution, gt_bins: &[Option<usize>]) -> Result<f64> {
    if gt_bins.len() != pred.width * pred.height {
        return Err(Error::shape(format!(
            "{} target bins for {} pixels",
            gt_bins.len(),
            pred.width * pred.height
        )));
    }
    let n = pred.bins.count;
    let (mut acc, mut count) = (0.0, 0usize);
    for (p, gt) in gt_bins.iter().enumerate() {
        let Some(b) = *gt else { continue };
        if b >= n {
            return Err(Error::invalid(format!("target bin {b} out of {n}")));
        }
        acc -= pred.probs[p * n + b].max(MIN_PROB).ln();
        count += 1;
    }
    if count == 0 {
        return Err(Error::invalid("no pixel has a target depth bin"));
    }
    Ok(acc / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub seg: f64,
    pub depth: f64,
    pub sem: f64,
    pub geo: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            seg: 10.0,
            depth: 1.0,
            sem: 1.0,
            geo: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.seg, self.depth, self.sem, self.geo]
            .iter()
            .any(|w| !(*w >= 0.0 && w.is_finite()))
        {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub seg: f64,
    pub depth: f64,
    pub sem: f64,
    pub geo: f64,
}

pub fn total_loss(terms: &LossTerms, weights: &LossWeights) -> f64 {
    weights.seg * terms.seg + weights.depth * terms.depth + weights.sem * terms.sem + weights.geo * terms.geo
}

/// Auxiliary head predicting how much each voxel should count in the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceDecoder {
    pub proj: Linear,
}

impl ConfidenceDecoder {
    pub const NAME: &'static str = "aux.confidence";

    pub fn register(reg: &mut Registry, channels: usize) {
        reg.linear(Self::NAME, channels, 1, true);
    }

    pub fn load(store: &ParameterStore) -> Result<Self> {
        Ok(Self {
            proj: Linear::load(store, Self::NAME, true)?,
        })
    }
}

/// `sigmoid(w . f(v) + b)` per voxel.
pub fn confidence_decoder(f: &FeatureVolume, decoder: &ConfidenceDecoder) -> Result<Vec<f64>> {
    if decoder.proj.in_dim() != f.channels() || decoder.proj.out_dim() != 1 {
        return Err(Error::shape(format!(
            "confidence head {:?} for {} channels",
            decoder.proj.weight.dims(),
            f.channels()
        )));
    }
    Ok((0..f.num_voxels())
        .map(|v| 1.0 / (1.0 + (-decoder.proj.score(f.voxel(v))).exp()))
        .collect())
}
