//! Deformable cross-attention (DCA) module.
//!
//! A DCA module has two parts. The transformer block runs on the active
//! voxel tokens only:
//!
//! ```text
//! F_self  = LN1(F_in + SelfAttn(F_in))
//! F_cross = LN2(F_self + DeformCrossAttn(F_self, images))
//! F_trans = LN3(F_cross + FFN(F_cross))
//! ```
//!
//! The feature-deepening part then runs over the lattice on
//! `[F_in, F_trans]` (inactive voxels carry `F_trans = F_in`):
//!
//! ```text
//! F_out = Conv3(C) ∘ ReLU ∘ BN ∘ Conv2(2C) ∘ ReLU ∘ BN ∘ Conv1(2C)
//! ```
//!
//! With a mask, voxels whose 3x3x3 neighbourhood holds no active voxel keep
//! their input features exactly.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{ego_to_cam_and_project, CameraRig, Projection};
use crate::nn::kernels::{accumulate_bilinear, relu_in_place, softmax_f64};
use crate::nn::{
    BatchNormParams, Conv3dParams, FeatureMap, FeatureVolume, LayerNormParams, Linear,
    ParameterStore, Registry, Tensor,
};
use crate::voxel::OccupancyMask;

/// Shape of a DCA module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DcaConfig {
    pub channels: usize,
    pub heads: usize,
    /// Sampling points per head.
    pub n_ref: usize,
    pub ffn_hidden: usize,
}

impl Default for DcaConfig {
    fn default() -> Self {
        Self::new(32, 8, 4)
    }
}

impl DcaConfig {
    /// Config with the FFN hidden width set to `4 * channels`.
    pub fn new(channels: usize, heads: usize, n_ref: usize) -> Self {
        Self {
            channels,
            heads,
            n_ref,
            ffn_hidden: 4 * channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "channels ({}) must be a positive multiple of heads ({})",
                self.channels, self.heads
            )));
        }
        if self.n_ref == 0 {
            return Err(Error::Config("n_ref must be at least 1".into()));
        }
        if self.ffn_hidden == 0 {
            return Err(Error::Config("ffn_hidden must be at least 1".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}

/// All weights of one DCA module.
#[derive(Debug, Clone, PartialEq)]
pub struct DcaParams {
    pub self_q: Linear,
    pub self_k: Linear,
    pub self_v: Linear,
    pub self_o: Linear,
    /// `C -> heads * n_ref * 2` pixel offsets.
    pub off: Linear,
    /// `C -> heads * n_ref` attention logits.
    pub att: Linear,
    /// Value projection of image features, bias-free.
    pub val: Linear,
    /// Output projection, bias-free.
    pub out: Linear,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
    pub ln3: LayerNormParams,
    pub conv1: Conv3dParams,
    pub conv2: Conv3dParams,
    pub conv3: Conv3dParams,
    pub bn1: BatchNormParams,
    pub bn2: BatchNormParams,
}

impl DcaParams {
    /// Registers the module's parameters under namespace `ns`.
    pub fn register(reg: &mut Registry, ns: &str, cfg: &DcaConfig) {
        let c = cfg.channels;
        let points = cfg.heads * cfg.n_ref;
        for name in ["self_q", "self_k", "self_v", "self_o"] {
            reg.linear(&format!("{ns}.{name}"), c, c, true);
        }
        reg.linear(&format!("{ns}.off"), c, points * 2, true)
            .linear(&format!("{ns}.att"), c, points, true)
            .linear(&format!("{ns}.val"), c, c, false)
            .linear(&format!("{ns}.out"), c, c, false)
            .linear(&format!("{ns}.ffn1"), c, cfg.ffn_hidden, true)
            .linear(&format!("{ns}.ffn2"), cfg.ffn_hidden, c, true);
        for ln in ["ln1", "ln2", "ln3"] {
            reg.layer_norm(&format!("{ns}.{ln}"), c);
        }
        reg.conv3d(&format!("{ns}.conv1"), 2 * c, 2 * c)
            .conv3d(&format!("{ns}.conv2"), 2 * c, 2 * c)
            .conv3d(&format!("{ns}.conv3"), 2 * c, c)
            .batch_norm(&format!("{ns}.bn1"), 2 * c)
            .batch_norm(&format!("{ns}.bn2"), 2 * c);
    }

    pub fn load(store: &ParameterStore, ns: &str, cfg: &DcaConfig) -> Result<Self> {
        let lin = |name: &str, bias: bool| Linear::load(store, &format!("{ns}.{name}"), bias);
        let params = Self {
            self_q: lin("self_q", true)?,
            self_k: lin("self_k", true)?,
            self_v: lin("self_v", true)?,
            self_o: lin("self_o", true)?,
            off: lin("off", true)?,
            att: lin("att", true)?,
            val: lin("val", false)?,
            out: lin("out", false)?,
            ffn1: lin("ffn1", true)?,
            ffn2: lin("ffn2", true)?,
            ln1: LayerNormParams::load(store, &format!("{ns}.ln1"))?,
            ln2: LayerNormParams::load(store, &format!("{ns}.ln2"))?,
            ln3: LayerNormParams::load(store, &format!("{ns}.ln3"))?,
            conv1: Conv3dParams::load(store, &format!("{ns}.conv1"))?,
            conv2: Conv3dParams::load(store, &format!("{ns}.conv2"))?,
            conv3: Conv3dParams::load(store, &format!("{ns}.conv3"))?,
            bn1: BatchNormParams::load(store, &format!("{ns}.bn1"))?,
            bn2: BatchNormParams::load(store, &format!("{ns}.bn2"))?,
        };
        params.check(cfg)?;
        Ok(params)
    }

    /// Seeds a fresh parameter set for `cfg` under namespace `ns`.
    pub fn seeded(seed: u64, ns: &str, cfg: &DcaConfig) -> Result<Self> {
        let mut reg = Registry::new();
        Self::register(&mut reg, ns, cfg);
        Self::load(&ParameterStore::build(seed, &reg), ns, cfg)
    }

    pub fn check(&self, cfg: &DcaConfig) -> Result<()> {
        cfg.validate()?;
        let c = cfg.channels;
        let points = cfg.heads * cfg.n_ref;
        let expect = [
            ("self_q", &self.self_q, c, c),
            ("self_k", &self.self_k, c, c),
            ("self_v", &self.self_v, c, c),
            ("self_o", &self.self_o, c, c),
            ("off", &self.off, c, 2 * points),
            ("att", &self.att, c, points),
            ("val", &self.val, c, c),
            ("out", &self.out, c, c),
            ("ffn1", &self.ffn1, c, cfg.ffn_hidden),
            ("ffn2", &self.ffn2, cfg.ffn_hidden, c),
        ];
        for (name, lin, din, dout) in expect {
            if lin.in_dim() != din || lin.out_dim() != dout {
                return Err(Error::shape(format!(
                    "{name}: weight {:?}, expected ({din}, {dout})",
                    lin.weight.dims()
                )));
            }
        }
        let convs = [
            (&self.conv1, 2 * c, 2 * c),
            (&self.conv2, 2 * c, 2 * c),
            (&self.conv3, 2 * c, c),
        ];
        for (i, (conv, cin, cout)) in convs.into_iter().enumerate() {
            if conv.kernel.dims() != [3, 3, 3, cin, cout] {
                return Err(Error::shape(format!(
                    "conv{}: kernel {:?}, expected (3, 3, 3, {cin}, {cout})",
                    i + 1,
                    conv.kernel.dims()
                )));
            }
        }
        Ok(())
    }
}

/// Per-camera image features and the rig they were captured with; map `i`
/// belongs to camera `i`.
#[derive(Debug, Clone, Copy)]
pub struct ImageContext<'a> {
    pub maps: &'a [FeatureMap],
    pub rig: &'a CameraRig,
}

impl<'a> ImageContext<'a> {
    pub fn new(maps: &'a [FeatureMap], rig: &'a CameraRig) -> Result<Self> {
        if maps.len() != rig.len() {
            return Err(Error::shape(format!(
                "{} feature maps for {} cameras",
                maps.len(),
                rig.len()
            )));
        }
        for (i, (map, cam)) in maps.iter().zip(&rig.cameras).enumerate() {
            if map.height() != cam.intrinsics.height || map.width() != cam.intrinsics.width {
                return Err(Error::shape(format!(
                    "camera {i}: map {}x{} vs image {}x{}",
                    map.width(),
                    map.height(),
                    cam.intrinsics.width,
                    cam.intrinsics.height
                )));
            }
        }
        Ok(Self { maps, rig })
    }

    fn check_channels(&self, channels: usize) -> Result<()> {
        match self.maps.iter().find(|m| m.channels() != channels) {
            Some(m) => Err(Error::shape(format!(
                "context map has {} channels, module expects {channels}",
                m.channels()
            ))),
            None => Ok(()),
        }
    }
}

/// Projections of each query voxel's center into every camera.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePoints {
    pub cameras: usize,
    /// Token-major: entry `token * cameras + camera`.
    pub points: Vec<Projection>,
}

impl ReferencePoints {
    pub fn get(&self, token: usize, camera: usize) -> &Projection {
        &self.points[token * self.cameras + camera]
    }
}

/// Active voxels flattened into tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelQuerySet {
    /// Flat voxel indices, ascending.
    pub indices: Vec<usize>,
    /// `(N, C)` token features.
    pub features: Tensor,
    pub refs: ReferencePoints,
}

impl VoxelQuerySet {
    pub fn build(vol: &FeatureVolume, indices: &[usize], rig: &CameraRig) -> Result<Self> {
        let c = vol.channels();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &v in indices {
            if v >= vol.num_voxels() {
                return Err(Error::invalid(format!("voxel {v} outside volume")));
            }
            data.extend_from_slice(vol.voxel(v));
        }
        let points = indices
            .par_iter()
            .flat_map_iter(|&v| {
                let center = vol.grid.center_of(v);
                rig.cameras
                    .iter()
                    .map(move |cam| ego_to_cam_and_project(&center, &cam.intrinsics, &cam.extrinsics))
            })
            .collect();
        Ok(Self {
            indices: indices.to_vec(),
            features: Tensor::new(vec![indices.len(), c], data)?,
            refs: ReferencePoints {
                cameras: rig.len(),
                points,
            },
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn check_tokens(x: &Tensor, cfg: &DcaConfig) -> Result<usize> {
    if x.rank() != 2 || x.dims()[1] != cfg.channels {
        return Err(Error::shape(format!(
            "tokens must be (N, {}), got {:?}",
            cfg.channels,
            x.dims()
        )));
    }
    Ok(x.dims()[0])
}

/// Multi-head scaled dot-product self-attention over the tokens of `x`,
/// output-projected, without residual or normalization.
pub fn self_attention(x: &Tensor, params: &DcaParams, cfg: &DcaConfig) -> Result<Tensor> {
    let n = check_tokens(x, cfg)?;
    let c = cfg.channels;
    let dh = cfg.head_dim();
    let q = params.self_q.forward(x)?;
    let k = params.self_k.forward(x)?;
    let v = params.self_v.forward(x)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Tensor::zeros(vec![n, c]);
    if n == 0 {
        return Ok(out);
    }
    out.data_mut()
        .par_chunks_mut(c)
        .enumerate()
        .for_each_init(
            || (vec![0.0f64; n], vec![0.0f32; c]),
            |(scores, heads), (i, out_row)| {
                let qi = q.row(i);
                for h in 0..cfg.heads {
                    let cols = h * dh..(h + 1) * dh;
                    let qh = &qi[cols.clone()];
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in scores.iter_mut().enumerate() {
                        let kj = &k.row(j)[cols.clone()];
                        let dot: f64 = qh
                            .iter()
                            .zip(kj)
                            .map(|(&a, &b)| f64::from(a) * f64::from(b))
                            .sum();
                        *s = dot * scale;
                        max = max.max(*s);
                    }
                    let mut sum = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        sum += *s;
                    }
                    let mut acc = vec![0.0f64; dh];
                    for (j, &s) in scores.iter().enumerate() {
                        let w = s / sum;
                        for (a, &vv) in acc.iter_mut().zip(&v.row(j)[cols.clone()]) {
                            *a += w * f64::from(vv);
                        }
                    }
                    for (slot, a) in heads[cols].iter_mut().zip(acc) {
                        *slot = a as f32;
                    }
                }
                params.self_o.forward_row(heads, out_row);
            },
        );
    Ok(out)
}

/// Self-attention weights of token `query`, one row per head.
pub fn self_attention_weights(
    x: &Tensor,
    query: usize,
    params: &DcaParams,
    cfg: &DcaConfig,
) -> Result<Vec<Vec<f64>>> {
    let n = check_tokens(x, cfg)?;
    if query >= n {
        return Err(Error::invalid(format!("query {query} out of {n} tokens")));
    }
    let dh = cfg.head_dim();
    let q = params.self_q.forward(x)?;
    let k = params.self_k.forward(x)?;
    let scale = 1.0 / (dh as f64).sqrt();
    Ok((0..cfg.heads)
        .map(|h| {
            let cols = h * dh..(h + 1) * dh;
            let logits: Vec<f64> = (0..n)
                .map(|j| {
                    q.row(query)[cols.clone()]
                        .iter()
                        .zip(&k.row(j)[cols.clone()])
                        .map(|(&a, &b)| f64::from(a) * f64::from(b))
                        .sum::<f64>()
                        * scale
                })
                .collect();
            softmax_f64(&logits)
        })
        .collect())
}

/// `LN1(x + SelfAttn(x))`.
pub fn self_attention_block(x: &Tensor, params: &DcaParams, cfg: &DcaConfig) -> Result<Tensor> {
    let mut y = self_attention(x, params, cfg)?;
    add_in_place(&mut y, x);
    params.ln1.forward(&y)
}

/// Sampling offsets (pixels) and per-head softmax weights for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingPlan {
    /// Entry `head * n_ref + point`: `(du, dv)`.
    pub offsets: Vec<(f64, f64)>,
    /// Entry `head * n_ref + point`; each head's weights sum to 1.
    pub weights: Vec<f64>,
}

pub fn sampling_plan(query: &[f32], params: &DcaParams, cfg: &DcaConfig) -> SamplingPlan {
    let points = cfg.heads * cfg.n_ref;
    let mut off = vec![0.0f32; 2 * points];
    let mut logits = vec![0.0f32; points];
    params.off.forward_row(query, &mut off);
    params.att.forward_row(query, &mut logits);
    let offsets = off
        .chunks_exact(2)
        .map(|d| (f64::from(d[0]), f64::from(d[1])))
        .collect();
    let weights = logits
        .chunks_exact(cfg.n_ref)
        .flat_map(|head| softmax_f64(&head.iter().map(|&l| f64::from(l)).collect::<Vec<_>>()))
        .collect();
    SamplingPlan { offsets, weights }
}

/// Deformable cross-attention of `query` tokens into the image context.
///
/// For each camera where the reference point is in front and inside the
/// image, every head samples its `n_ref` offset locations in the
/// value-projected map and mixes them with its softmax weights. Head outputs
/// are averaged over the valid cameras, concatenated and output-projected.
/// Tokens with no valid camera yield zeros.
pub fn deformable_cross_attention(
    query: &Tensor,
    refs: &ReferencePoints,
    ctx: &ImageContext<'_>,
    params: &DcaParams,
    cfg: &DcaConfig,
) -> Result<Tensor> {
    let n = check_tokens(query, cfg)?;
    let c = cfg.channels;
    ctx.check_channels(c)?;
    if refs.cameras != ctx.rig.len() || refs.points.len() != n * refs.cameras {
        return Err(Error::shape("reference points do not match tokens and cameras"));
    }
    let values: Vec<FeatureMap> = ctx
        .maps
        .iter()
        .map(|m| {
            let projected = params.val.forward(&m.tensor)?;
            FeatureMap::new(projected, m.camera)
        })
        .collect::<Result<_>>()?;
    let dh = cfg.head_dim();
    let mut out = Tensor::zeros(vec![n, c]);
    if n == 0 {
        return Ok(out);
    }
    out.data_mut()
        .par_chunks_mut(c)
        .enumerate()
        .for_each(|(i, out_row)| {
            let plan = sampling_plan(query.row(i), params, cfg);
            let mut acc = vec![0.0f64; c];
            let mut hits = 0usize;
            for (cam_idx, cam) in ctx.rig.cameras.iter().enumerate() {
                let r = refs.get(i, cam_idx);
                if !r.inside(&cam.intrinsics) {
                    continue;
                }
                hits += 1;
                for h in 0..cfg.heads {
                    let head_acc = &mut acc[h * dh..(h + 1) * dh];
                    for k in 0..cfg.n_ref {
                        let p = h * cfg.n_ref + k;
                        let (du, dv) = plan.offsets[p];
                        accumulate_bilinear(
                            &values[cam_idx],
                            r.pixel.0 + du,
                            r.pixel.1 + dv,
                            h * dh,
                            plan.weights[p],
                            head_acc,
                        );
                    }
                }
            }
            if hits == 0 {
                return;
            }
            let heads: Vec<f32> = acc.iter().map(|a| (a / hits as f64) as f32).collect();
            params.out.forward_row(&heads, out_row);
        });
    Ok(out)
}

/// `LN2(F_self + DeformCrossAttn(F_self))`.
pub fn cross_attention_block(
    f_self: &Tensor,
    refs: &ReferencePoints,
    ctx: &ImageContext<'_>,
    params: &DcaParams,
    cfg: &DcaConfig,
) -> Result<Tensor> {
    let mut y = deformable_cross_attention(f_self, refs, ctx, params, cfg)?;
    add_in_place(&mut y, f_self);
    params.ln2.forward(&y)
}

/// `LN3(F_cross + W2 ReLU(W1 F_cross + b1) + b2)`.
pub fn ffn_block(f_cross: &Tensor, params: &DcaParams) -> Result<Tensor> {
    let mut hidden = params.ffn1.forward(f_cross)?;
    relu_in_place(hidden.data_mut());
    let mut y = params.ffn2.forward(&hidden)?;
    add_in_place(&mut y, f_cross);
    params.ln3.forward(&y)
}

/// Self-attention, cross-attention and FFN stages over the query tokens.
pub fn transformer_block(
    queries: &VoxelQuerySet,
    ctx: &ImageContext<'_>,
    params: &DcaParams,
    cfg: &DcaConfig,
) -> Result<Tensor> {
    let f_self = self_attention_block(&queries.features, params, cfg)?;
    let f_cross = cross_attention_block(&f_self, &queries.refs, ctx, params, cfg)?;
    ffn_block(&f_cross, params)
}

/// Channel-wise concatenation `[a, b]` of two volumes on the same grid.
pub fn concat_channels(a: &FeatureVolume, b: &FeatureVolume) -> Result<FeatureVolume> {
    if a.grid.dims != b.grid.dims {
        return Err(Error::shape(format!(
            "cannot concatenate volumes {:?} and {:?}",
            a.grid.dims, b.grid.dims
        )));
    }
    let (ca, cb) = (a.channels(), b.channels());
    let mut out = FeatureVolume::zeros(a.grid.clone(), ca + cb);
    for v in 0..a.num_voxels() {
        let dst = out.voxel_mut(v);
        dst[..ca].copy_from_slice(a.voxel(v));
        dst[ca..].copy_from_slice(b.voxel(v));
    }
    Ok(out)
}

/// Conv1 -> BN -> ReLU -> Conv2 -> BN -> ReLU -> Conv3 on `[F_in, F_trans]`.
pub fn feature_deepening(
    f_in: &FeatureVolume,
    f_trans: &FeatureVolume,
    params: &DcaParams,
) -> Result<FeatureVolume> {
    deepen(f_in, f_trans, params, None)
}

/// Deepening stack whose final output is only needed at `outputs`; earlier
/// layers are evaluated on the dilations that feed those voxels.
fn deepen(
    f_in: &FeatureVolume,
    f_trans: &FeatureVolume,
    params: &DcaParams,
    outputs: Option<&[bool]>,
) -> Result<FeatureVolume> {
    if f_in.channels() != f_trans.channels() {
        return Err(Error::shape(format!(
            "F_in has {} channels, F_trans {}",
            f_in.channels(),
            f_trans.channels()
        )));
    }
    if params.conv1.in_channels() != 2 * f_in.channels() {
        return Err(Error::shape(format!(
            "deepening expects {} input channels per half, got {}",
            params.conv1.in_channels() / 2,
            f_in.channels()
        )));
    }
    let grid = &f_in.grid;
    let (need1, need2) = match outputs {
        Some(s) => (Some(grid.dilate(s, 2)), Some(grid.dilate(s, 1))),
        None => (None, None),
    };
    let cat = concat_channels(f_in, f_trans)?;
    let mut h = params.conv1.forward(&cat, need1.as_deref())?;
    h.tensor = params.bn1.forward(&h.tensor)?;
    relu_in_place(h.tensor.data_mut());
    let mut h = params.conv2.forward(&h, need2.as_deref())?;
    h.tensor = params.bn2.forward(&h.tensor)?;
    relu_in_place(h.tensor.data_mut());
    params.conv3.forward(&h, outputs)
}

/// Full DCA module. `mask` selects the active voxels (all when `None`).
pub fn dca_module(
    f_in: &FeatureVolume,
    ctx: &ImageContext<'_>,
    mask: Option<&OccupancyMask>,
    params: &DcaParams,
    cfg: &DcaConfig,
) -> Result<FeatureVolume> {
    cfg.validate()?;
    if f_in.channels() != cfg.channels {
        return Err(Error::shape(format!(
            "volume has {} channels, module expects {}",
            f_in.channels(),
            cfg.channels
        )));
    }
    ctx.check_channels(cfg.channels)?;
    if let Some(m) = mask {
        if m.grid.dims != f_in.grid.dims {
            return Err(Error::shape(format!(
                "mask dims {:?} vs volume dims {:?}",
                m.grid.dims, f_in.grid.dims
            )));
        }
    }
    let active: Vec<usize> = match mask {
        Some(m) => m.set_indices(),
        None => (0..f_in.num_voxels()).collect(),
    };
    if active.is_empty() {
        return Ok(f_in.clone());
    }
    let queries = VoxelQuerySet::build(f_in, &active, ctx.rig)?;
    let tokens = transformer_block(&queries, ctx, params, cfg)?;
    let mut f_trans = f_in.clone();
    for (row, &v) in active.iter().enumerate() {
        f_trans.voxel_mut(v).copy_from_slice(tokens.row(row));
    }
    match mask {
        None => deepen(f_in, &f_trans, params, None),
        Some(m) => {
            let touched = f_in.grid.dilate(&m.bits, 1);
            let deep = deepen(f_in, &f_trans, params, Some(&touched))?;
            let mut out = f_in.clone();
            for (v, _) in touched.iter().enumerate().filter(|(_, &t)| t) {
                out.voxel_mut(v).copy_from_slice(deep.voxel(v));
            }
            Ok(out)
        }
    }
}

fn add_in_place(acc: &mut Tensor, other: &Tensor) {
    for (a, &b) in acc.data_mut().iter_mut().zip(other.data()) {
        *a += b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Camera, CameraExtrinsics, CameraIntrinsics};
    use crate::voxel::GridSpec;

    fn rig() -> CameraRig {
        CameraRig::new(vec![Camera {
            intrinsics: CameraIntrinsics::new(4.0, 4.0, 3.5, 3.5, 8, 8).unwrap(),
            extrinsics: CameraExtrinsics::new(
                nalgebra::Matrix3::identity(),
                nalgebra::Vector3::new(0.0, 0.0, 4.0),
            )
            .unwrap(),
        }])
        .unwrap()
    }

    fn volume(cfg: &DcaConfig, n: usize) -> FeatureVolume {
        let grid = GridSpec::new([-1.0, -1.0, -1.0], 2.0 / n as f64, [n, n, n]).unwrap();
        let mut vol = FeatureVolume::zeros(grid, cfg.channels);
        for (i, v) in vol.tensor.data_mut().iter_mut().enumerate() {
            *v = ((i * 37 % 101) as f32 / 50.0) - 1.0;
        }
        vol
    }

    fn context(rig: &CameraRig, c: usize) -> Vec<FeatureMap> {
        let mut map = FeatureMap::zeros(8, 8, c, 0);
        for (i, v) in map.tensor.data_mut().iter_mut().enumerate() {
            *v = ((i * 13 % 29) as f32 / 14.0) - 1.0;
        }
        assert_eq!(rig.len(), 1);
        vec![map]
    }

    #[test]
    fn config_validation() {
        assert!(DcaConfig::new(32, 8, 4).validate().is_ok());
        assert!(DcaConfig::new(30, 8, 4).validate().is_err());
        assert!(DcaConfig::new(8, 2, 0).validate().is_err());
        assert_eq!(DcaConfig::default().ffn_hidden, 128);
    }

    #[test]
    fn registry_names_and_shapes() {
        let cfg = DcaConfig::new(8, 2, 3);
        let mut reg = Registry::new();
        DcaParams::register(&mut reg, "dca", &cfg);
        let names: Vec<&str> = reg.specs().iter().map(|s| s.name.as_str()).collect();
        assert!(names.contains(&"dca.off.weight"));
        assert!(names.contains(&"dca.bn2.running_var"));
        assert!(!names.contains(&"dca.val.bias"));
        let store = ParameterStore::build(1, &reg);
        let p = DcaParams::load(&store, "dca", &cfg).unwrap();
        assert_eq!(p.off.weight.dims(), &[8, 12]);
        assert_eq!(p.conv3.kernel.dims(), &[3, 3, 3, 16, 8]);
        assert!(DcaParams::load(&store, "dca", &DcaConfig::new(8, 4, 3)).is_err());
    }

    #[test]
    fn single_token_attends_to_itself() {
        let cfg = DcaConfig::new(4, 2, 1);
        let p = DcaParams::seeded(3, "t", &cfg).unwrap();
        let x = Tensor::new(vec![1, 4], vec![0.3, -0.2, 0.9, 0.1]).unwrap();
        let w = self_attention_weights(&x, 0, &p, &cfg).unwrap();
        assert!(w.iter().all(|h| h == &vec![1.0]));
        let got = self_attention(&x, &p, &cfg).unwrap();
        let v = p.self_v.forward(&x).unwrap();
        let expect = p.self_o.forward(&v).unwrap();
        assert!(got.max_abs_diff(&expect).unwrap() < 1e-6);
    }

    #[test]
    fn identical_tokens_give_identical_outputs() {
        let cfg = DcaConfig::new(4, 2, 1);
        let p = DcaParams::seeded(5, "t", &cfg).unwrap();
        let row = [0.5f32, -1.0, 0.25, 2.0];
        let x = Tensor::new(vec![3, 4], row.repeat(3)).unwrap();
        let y = self_attention_block(&x, &p, &cfg).unwrap();
        assert_eq!(y.row(0), y.row(1));
        assert_eq!(y.row(1), y.row(2));
    }

    #[test]
    fn sampling_weights_normalize_per_head() {
        let cfg = DcaConfig::new(8, 2, 4);
        let p = DcaParams::seeded(11, "t", &cfg).unwrap();
        let plan = sampling_plan(&[0.1, 0.7, -0.3, 0.0, 1.2, -0.8, 0.5, 0.4], &p, &cfg);
        for head in plan.weights.chunks(cfg.n_ref) {
            assert!((head.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(head.iter().all(|&w| w > 0.0));
        }
        assert_eq!(plan.offsets.len(), 8);
    }

    #[test]
    fn zero_context_gives_zero_cross_attention() {
        let cfg = DcaConfig::new(4, 2, 2);
        let p = DcaParams::seeded(2, "t", &cfg).unwrap();
        let rig = rig();
        let maps = vec![FeatureMap::zeros(8, 8, 4, 0)];
        let ctx = ImageContext::new(&maps, &rig).unwrap();
        let vol = volume(&cfg, 2);
        let q = VoxelQuerySet::build(&vol, &[0, 3, 7], &rig).unwrap();
        let y = deformable_cross_attention(&q.features, &q.refs, &ctx, &p, &cfg).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn voxels_behind_every_camera_contribute_nothing() {
        let cfg = DcaConfig::new(4, 2, 2);
        let p = DcaParams::seeded(2, "t", &cfg).unwrap();
        let rig = rig();
        let maps = context(&rig, 4);
        let ctx = ImageContext::new(&maps, &rig).unwrap();
        // Grid entirely behind the camera (camera z = ego z + 4).
        let grid = GridSpec::new([-1.0, -1.0, -9.0], 1.0, [2, 2, 2]).unwrap();
        let vol = FeatureVolume::broadcast(grid, &[1.0, 0.5, -0.5, 0.25]);
        let q = VoxelQuerySet::build(&vol, &[0, 1, 2], &rig).unwrap();
        let y = deformable_cross_attention(&q.features, &q.refs, &ctx, &p, &cfg).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_ffn_weights_leave_bias_path() {
        let cfg = DcaConfig::new(4, 1, 1);
        let mut p = DcaParams::seeded(2, "t", &cfg).unwrap();
        p.ffn1.weight = Tensor::zeros(p.ffn1.weight.dims().to_vec());
        p.ffn2.weight = Tensor::zeros(p.ffn2.weight.dims().to_vec());
        let x = Tensor::new(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 1.0, 0.5]).unwrap();
        let got = ffn_block(&x, &p).unwrap();
        let mut shifted = x.clone();
        for row in shifted.data_mut().chunks_mut(4) {
            for (v, b) in row.iter_mut().zip(p.ffn2.bias.as_ref().unwrap().data()) {
                *v += b;
            }
        }
        let expect = p.ln3.forward(&shifted).unwrap();
        assert_eq!(got, expect);
    }

    #[test]
    fn zero_kernels_give_zero_volume() {
        let cfg = DcaConfig::new(4, 1, 1);
        let mut p = DcaParams::seeded(2, "t", &cfg).unwrap();
        for conv in [&mut p.conv1, &mut p.conv2, &mut p.conv3] {
            conv.kernel = Tensor::zeros(conv.kernel.dims().to_vec());
            conv.bias = None;
        }
        let vol = volume(&cfg, 3);
        let out = feature_deepening(&vol, &vol, &p).unwrap();
        assert!(out.tensor.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_deepening_reproduces_input() {
        let cfg = DcaConfig::new(3, 1, 1);
        let c = cfg.channels;
        let mut p = DcaParams::seeded(2, "t", &cfg).unwrap();
        let delta = |cin: usize, cout: usize| {
            let mut k = Tensor::zeros(vec![3, 3, 3, cin, cout]);
            for ch in 0..cout {
                k.set(&[1, 1, 1, ch, ch], 1.0);
            }
            k
        };
        p.conv1 = Conv3dParams { kernel: delta(2 * c, 2 * c), bias: None };
        p.conv2 = Conv3dParams { kernel: delta(2 * c, 2 * c), bias: None };
        p.conv3 = Conv3dParams { kernel: delta(2 * c, c), bias: None };
        p.bn1 = BatchNormParams::neutral(2 * c);
        p.bn2 = BatchNormParams::neutral(2 * c);
        let mut vol = volume(&cfg, 3);
        // ReLU in the stack: keep the identity path on non-negative inputs.
        for v in vol.tensor.data_mut() {
            *v = v.abs();
        }
        let out = feature_deepening(&vol, &vol, &p).unwrap();
        assert!(out.tensor.max_abs_diff(&vol.tensor).unwrap() < 1e-4);
    }

    #[test]
    fn empty_mask_is_inert_and_full_mask_matches_unmasked() {
        let cfg = DcaConfig::new(4, 2, 2);
        let p = DcaParams::seeded(9, "t", &cfg).unwrap();
        let rig = rig();
        let maps = context(&rig, 4);
        let ctx = ImageContext::new(&maps, &rig).unwrap();
        let vol = volume(&cfg, 2);
        let empty = OccupancyMask::empty(vol.grid.clone());
        assert_eq!(dca_module(&vol, &ctx, Some(&empty), &p, &cfg).unwrap(), vol);
        let full = OccupancyMask::full(vol.grid.clone());
        let a = dca_module(&vol, &ctx, Some(&full), &p, &cfg).unwrap();
        let b = dca_module(&vol, &ctx, None, &p, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.tensor.is_finite());
    }

    #[test]
    fn masked_module_leaves_far_voxels_untouched() {
        let cfg = DcaConfig::new(4, 2, 2);
        let p = DcaParams::seeded(4, "t", &cfg).unwrap();
        let rig = rig();
        let maps = context(&rig, 4);
        let ctx = ImageContext::new(&maps, &rig).unwrap();
        let vol = volume(&cfg, 5);
        let mut mask = OccupancyMask::empty(vol.grid.clone());
        mask.set(vol.grid.index([0, 0, 0]), true);
        let out = dca_module(&vol, &ctx, Some(&mask), &p, &cfg).unwrap();
        for v in 0..vol.num_voxels() {
            let [i, j, k] = vol.grid.coords(v);
            if i > 1 || j > 1 || k > 1 {
                assert_eq!(out.voxel(v), vol.voxel(v));
            }
        }
        assert_ne!(out.voxel(0), vol.voxel(0));
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let cfg = DcaConfig::new(4, 2, 2);
        let p = DcaParams::seeded(4, "t", &cfg).unwrap();
        let rig = rig();
        let maps = context(&rig, 4);
        let ctx = ImageContext::new(&maps, &rig).unwrap();
        let vol = volume(&cfg, 2);
        let wrong = OccupancyMask::empty(GridSpec::new([0.0; 3], 1.0, [3, 3, 3]).unwrap());
        assert!(dca_module(&vol, &ctx, Some(&wrong), &p, &cfg).is_err());
        let other = FeatureVolume::zeros(vol.grid.clone(), 3);
        assert!(dca_module(&other, &ctx, None, &p, &cfg).is_err());
        let bad_maps = vec![FeatureMap::zeros(4, 8, 4, 0)];
        assert!(ImageContext::new(&bad_maps, &rig).is_err());
    }
}
