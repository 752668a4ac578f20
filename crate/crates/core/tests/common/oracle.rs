//! Straightforward f64 reimplementations used as reference values.
//!
//! Everything here reads parameters by name from a [`ParameterStore`] and
//! loops over explicit indices, sharing no code with the library beyond the
//! data containers.

use occforge::dca::DcaConfig;
use occforge::geometry::{Camera, CameraRig, Point3};
use occforge::nn::{FeatureMap, FeatureVolume, ParameterStore};
use occforge::synth::SceneSpec;
use occforge::voxel::{GridSpec, OccupancyMask, SemanticGrid, EMPTY_LABEL};

pub fn param(store: &ParameterStore, name: &str) -> Vec<f64> {
    store
        .get(name)
        .unwrap_or_else(|_| panic!("missing parameter {name}"))
        .data()
        .iter()
        .map(|&x| f64::from(x))
        .collect()
}

/// `x W + b` with `W` stored as `(in, out)` row-major.
pub fn linear(store: &ParameterStore, name: &str, x: &[f64], bias: bool) -> Vec<f64> {
    let w = param(store, &format!("{name}.weight"));
    let dout = w.len() / x.len();
    assert_eq!(w.len(), x.len() * dout, "{name}: input width mismatch");
    let mut out = if bias {
        param(store, &format!("{name}.bias"))
    } else {
        vec![0.0; dout]
    };
    for (o, slot) in out.iter_mut().enumerate() {
        for (i, xi) in x.iter().enumerate() {
            *slot += xi * w[i * dout + o];
        }
    }
    out
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn layer_norm(store: &ParameterStore, name: &str, x: &[f64]) -> Vec<f64> {
    let g = param(store, &format!("{name}.gamma"));
    let b = param(store, &format!("{name}.beta"));
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = (var + 1e-5).sqrt();
    x.iter()
        .enumerate()
        .map(|(c, v)| (v - mean) / sd * g[c] + b[c])
        .collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Attention weights of every token, indexed `[token][head][key]`.
pub fn self_attention_weights(
    store: &ParameterStore,
    ns: &str,
    cfg: &DcaConfig,
    tokens: &[Vec<f64>],
) -> Vec<Vec<Vec<f64>>> {
    let dh = cfg.channels / cfg.heads;
    let q: Vec<Vec<f64>> = tokens.iter().map(|t| linear(store, &format!("{ns}.self_q"), t, true)).collect();
    let k: Vec<Vec<f64>> = tokens.iter().map(|t| linear(store, &format!("{ns}.self_k"), t, true)).collect();
    q.iter()
        .map(|qi| {
            (0..cfg.heads)
                .map(|h| {
                    let logits: Vec<f64> = k
                        .iter()
                        .map(|kj| {
                            (h * dh..(h + 1) * dh).map(|c| qi[c] * kj[c]).sum::<f64>() / (dh as f64).sqrt()
                        })
                        .collect();
                    softmax(&logits)
                })
                .collect()
        })
        .collect()
}

/// `LN1(x + SelfAttn(x))` for every token.
pub fn self_attention_block(store: &ParameterStore, ns: &str, cfg: &DcaConfig, tokens: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dh = cfg.channels / cfg.heads;
    let weights = self_attention_weights(store, ns, cfg, tokens);
    let v: Vec<Vec<f64>> = tokens.iter().map(|t| linear(store, &format!("{ns}.self_v"), t, true)).collect();
    tokens
        .iter()
        .zip(&weights)
        .map(|(x, w)| {
            let mut mixed = vec![0.0; cfg.channels];
            for h in 0..cfg.heads {
                for (j, vj) in v.iter().enumerate() {
                    for c in h * dh..(h + 1) * dh {
                        mixed[c] += w[h][j] * vj[c];
                    }
                }
            }
            let attn = linear(store, &format!("{ns}.self_o"), &mixed, true);
            layer_norm(store, &format!("{ns}.ln1"), &add(x, &attn))
        })
        .collect()
}

/// Pixel of `p` in `camera` when it lies in front and inside the image.
pub fn project(camera: &Camera, p: &Point3) -> Option<(f64, f64)> {
    let r = &camera.extrinsics.rotation;
    let t = &camera.extrinsics.translation;
    let mut x = [0.0; 3];
    for (row, slot) in x.iter_mut().enumerate() {
        *slot = r[(row, 0)] * p.x + r[(row, 1)] * p.y + r[(row, 2)] * p.z + t[row];
    }
    if x[2] <= 1e-6 {
        return None;
    }
    let k = &camera.intrinsics;
    let u = k.fx * x[0] / x[2] + k.cx;
    let v = k.fy * x[1] / x[2] + k.cy;
    let inside = u >= 0.0 && v >= 0.0 && u <= (k.width - 1) as f64 && v <= (k.height - 1) as f64;
    inside.then_some((u, v))
}

/// Bilinear sample of the raw map; corners outside the image read zero.
pub fn bilinear(map: &FeatureMap, u: f64, v: f64) -> Vec<f64> {
    let c = map.channels();
    let mut out = vec![0.0; c];
    let (u0, v0) = (u.floor(), v.floor());
    for (du, dv) in [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)] {
        let (cu, cv) = (u0 + du, v0 + dv);
        let wu = 1.0 - (u - cu).abs();
        let wv = 1.0 - (v - cv).abs();
        if cu < 0.0 || cv < 0.0 || cu > (map.width() - 1) as f64 || cv > (map.height() - 1) as f64 {
            continue;
        }
        let px = map.pixel(cv as usize, cu as usize);
        for ch in 0..c {
            out[ch] += wu * wv * f64::from(px[ch]);
        }
    }
    out
}

/// Per-head softmax sampling weights of one query.
pub fn sampling_weights(store: &ParameterStore, ns: &str, cfg: &DcaConfig, query: &[f64]) -> Vec<Vec<f64>> {
    let logits = linear(store, &format!("{ns}.att"), query, true);
    logits.chunks(cfg.n_ref).map(softmax).collect()
}

/// Deformable cross-attention of one query at ego point `anchor`, before
/// the residual. The value projection is applied to each bilinear sample,
/// which equals sampling the projected map since both are linear.
pub fn cross_attention(
    store: &ParameterStore,
    ns: &str,
    cfg: &DcaConfig,
    query: &[f64],
    anchor: &Point3,
    maps: &[FeatureMap],
    rig: &CameraRig,
) -> Vec<f64> {
    let dh = cfg.channels / cfg.heads;
    let off = linear(store, &format!("{ns}.off"), query, true);
    let weights = sampling_weights(store, ns, cfg, query);
    let mut acc = vec![0.0; cfg.channels];
    let mut hits = 0;
    for (cam, map) in rig.cameras.iter().zip(maps) {
        let Some((u, v)) = project(cam, anchor) else {
            continue;
        };
        hits += 1;
        for h in 0..cfg.heads {
            for k in 0..cfg.n_ref {
                let p = h * cfg.n_ref + k;
                let raw = bilinear(map, u + off[2 * p], v + off[2 * p + 1]);
                let val = linear(store, &format!("{ns}.val"), &raw, false);
                for c in h * dh..(h + 1) * dh {
                    acc[c] += weights[h][k] * val[c];
                }
            }
        }
    }
    if hits == 0 {
        return vec![0.0; cfg.channels];
    }
    let mean: Vec<f64> = acc.iter().map(|a| a / hits as f64).collect();
    linear(store, &format!("{ns}.out"), &mean, false)
}

fn coords(dims: [usize; 3], idx: usize) -> [usize; 3] {
    [idx / (dims[1] * dims[2]), (idx / dims[2]) % dims[1], idx % dims[2]]
}

fn flat(dims: [usize; 3], c: [usize; 3]) -> usize {
    (c[0] * dims[1] + c[1]) * dims[2] + c[2]
}

/// 3x3x3 zero-padded cross-correlation over the whole volume.
pub fn conv3d(store: &ParameterStore, name: &str, dims: [usize; 3], x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let w = param(store, &format!("{name}.weight"));
    let b = param(store, &format!("{name}.bias"));
    let cin = x[0].len();
    let cout = b.len();
    assert_eq!(w.len(), 27 * cin * cout);
    (0..x.len())
        .map(|idx| {
            let at = coords(dims, idx);
            let mut out = b.clone();
            for a in 0..3 {
                for bb in 0..3 {
                    for c in 0..3 {
                        let src = [at[0] + a, at[1] + bb, at[2] + c];
                        if (0..3).any(|ax| src[ax] < 1 || src[ax] > dims[ax]) {
                            continue;
                        }
                        let s = flat(dims, [src[0] - 1, src[1] - 1, src[2] - 1]);
                        let tap = (a * 3 + bb) * 3 + c;
                        for ci in 0..cin {
                            for (co, o) in out.iter_mut().enumerate() {
                                *o += x[s][ci] * w[(tap * cin + ci) * cout + co];
                            }
                        }
                    }
                }
            }
            out
        })
        .collect()
}

pub fn batch_norm_relu(store: &ParameterStore, name: &str, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let g = param(store, &format!("{name}.gamma"));
    let b = param(store, &format!("{name}.beta"));
    let m = param(store, &format!("{name}.running_mean"));
    let var = param(store, &format!("{name}.running_var"));
    x.iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .map(|(c, v)| ((v - m[c]) / (var[c] + 1e-5).sqrt() * g[c] + b[c]).max(0.0))
                .collect()
        })
        .collect()
}

pub fn volume_rows(vol: &FeatureVolume) -> Vec<Vec<f64>> {
    (0..vol.num_voxels())
        .map(|v| vol.voxel(v).iter().map(|&x| f64::from(x)).collect())
        .collect()
}

/// Whether some active voxel lies within Chebyshev distance 1 of `idx`.
fn near_active(dims: [usize; 3], active: &[usize], idx: usize) -> bool {
    let a = coords(dims, idx);
    active.iter().any(|&m| {
        let b = coords(dims, m);
        (0..3).all(|ax| a[ax].abs_diff(b[ax]) <= 1)
    })
}

/// Full DCA module. Inactive voxels keep their input features; with a mask,
/// only voxels next to an active one take the deepened value.
pub fn dca_module(
    store: &ParameterStore,
    ns: &str,
    cfg: &DcaConfig,
    f_in: &FeatureVolume,
    maps: &[FeatureMap],
    rig: &CameraRig,
    mask: Option<&OccupancyMask>,
) -> Vec<Vec<f64>> {
    let grid = &f_in.grid;
    let dims = grid.dims;
    let x = volume_rows(f_in);
    let active: Vec<usize> = (0..x.len()).filter(|&v| mask.map_or(true, |m| m.bits[v])).collect();
    if active.is_empty() {
        return x;
    }
    let tokens: Vec<Vec<f64>> = active.iter().map(|&v| x[v].clone()).collect();
    let f_self = self_attention_block(store, ns, cfg, &tokens);
    let mut f_trans = x.clone();
    for (i, &v) in active.iter().enumerate() {
        let anchor = grid.center_of(v);
        let cross = cross_attention(store, ns, cfg, &f_self[i], &anchor, maps, rig);
        let f_cross = layer_norm(store, &format!("{ns}.ln2"), &add(&f_self[i], &cross));
        let hidden: Vec<f64> = linear(store, &format!("{ns}.ffn1"), &f_cross, true)
            .into_iter()
            .map(|h| h.max(0.0))
            .collect();
        let ffn = linear(store, &format!("{ns}.ffn2"), &hidden, true);
        f_trans[v] = layer_norm(store, &format!("{ns}.ln3"), &add(&f_cross, &ffn));
    }
    let cat: Vec<Vec<f64>> = x.iter().zip(&f_trans).map(|(a, b)| [a.as_slice(), b.as_slice()].concat()).collect();
    let h1 = batch_norm_relu(store, &format!("{ns}.bn1"), &conv3d(store, &format!("{ns}.conv1"), dims, &cat));
    let h2 = batch_norm_relu(store, &format!("{ns}.bn2"), &conv3d(store, &format!("{ns}.conv2"), dims, &h1));
    let deep = conv3d(store, &format!("{ns}.conv3"), dims, &h2);
    match mask {
        None => deep,
        Some(_) => (0..x.len())
            .map(|v| if near_active(dims, &active, v) { deep[v].clone() } else { x[v].clone() })
            .collect(),
    }
}

/// Voxel holding `p`, found by scanning each axis for the half-open cell.
pub fn locate_scan(grid: &GridSpec, p: &Point3) -> Option<usize> {
    let mut ijk = [0usize; 3];
    for a in 0..3 {
        ijk[a] = (0..grid.dims[a]).find(|&i| {
            let lo = grid.origin[a] + i as f64 * grid.resolution[a];
            lo <= p[a] && p[a] < lo + grid.resolution[a]
        })?;
    }
    Some(flat(grid.dims, ijk))
}

/// Mean-pooled router score per region; `-inf` for empty regions.
pub fn router_scores(store: &ParameterStore, name: &str, f: &FeatureVolume, region_of: &[usize], regions: usize) -> Vec<f64> {
    (0..regions)
        .map(|m| {
            let members: Vec<usize> = (0..f.num_voxels()).filter(|&v| region_of[v] == m).collect();
            if members.is_empty() {
                return f64::NEG_INFINITY;
            }
            let mut mean = vec![0.0; f.channels()];
            for &v in &members {
                for (s, &x) in mean.iter_mut().zip(f.voxel(v)) {
                    *s += f64::from(x) / members.len() as f64;
                }
            }
            linear(store, name, &mean, true)[0]
        })
        .collect()
}

/// Indices of the `k` largest scores, ties to the lower index, ascending.
pub fn topk(scores: &[f64], k: usize) -> Vec<usize> {
    let mut chosen = Vec::new();
    let mut remaining: Vec<usize> = (0..scores.len()).filter(|&i| scores[i].is_finite()).collect();
    for _ in 0..k {
        let best = *remaining
            .iter()
            .reduce(|a, b| if scores[*b] > scores[*a] { b } else { a })
            .unwrap();
        remaining.retain(|&i| i != best);
        chosen.push(best);
    }
    chosen.sort_unstable();
    chosen
}

/// Intersection over union of `pred` and `gt` inside `eval`, by counting.
pub fn iou(pred: &[bool], gt: &[bool], eval: Option<&[bool]>) -> f64 {
    let (mut inter, mut union) = (0u64, 0u64);
    for i in 0..pred.len() {
        if eval.map_or(true, |e| e[i]) {
            inter += u64::from(pred[i] && gt[i]);
            union += u64::from(pred[i] || gt[i]);
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Per-class IoU (`None` when the class is absent from both) and their mean.
pub fn miou(pred: &SemanticGrid, gt: &SemanticGrid, num_classes: usize) -> (Vec<Option<f64>>, f64) {
    let per: Vec<Option<f64>> = (0..num_classes as u16)
        .map(|c| {
            let p: Vec<bool> = pred.labels.iter().map(|&l| l == c).collect();
            let g: Vec<bool> = gt.labels.iter().map(|&l| l == c).collect();
            (p.iter().any(|&b| b) || g.iter().any(|&b| b)).then(|| iou(&p, &g, None))
        })
        .collect();
    let present: Vec<f64> = per.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        1.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    (per, mean)
}

pub fn occupied(labels: &[u16]) -> Vec<bool> {
    labels.iter().map(|&l| l != EMPTY_LABEL).collect()
}

/// Ray parameter of the nearest hit, intersecting each box face plane and
/// the cylinder wall and caps separately.
pub fn cast(scene: &SceneSpec, o: &Point3, d: &nalgebra::Vector3<f64>) -> Option<(f64, u16)> {
    let mut best: Option<(f64, u16)> = None;
    let mut take = |t: f64, class: u16| {
        if t > 1e-9 && best.map_or(true, |(b, _)| t < b) {
            best = Some((t, class));
        }
    };
    if let Some(plane) = &scene.plane {
        if d.z != 0.0 {
            take((plane.z - o.z) / d.z, plane.class);
        }
    }
    for b in &scene.boxes {
        for axis in 0..3 {
            if d[axis] == 0.0 {
                continue;
            }
            for face in [b.min[axis], b.max[axis]] {
                let t = (face - o[axis]) / d[axis];
                let p = o + d * t;
                let on_face = (0..3)
                    .filter(|&a| a != axis)
                    .all(|a| p[a] >= b.min[a] - 1e-9 && p[a] <= b.max[a] + 1e-9);
                if on_face {
                    take(t, b.class);
                }
            }
        }
    }
    let base = scene.plane.map_or(0.0, |p| p.z);
    for pole in &scene.poles {
        let (ox, oy) = (o.x - pole.x, o.y - pole.y);
        let a = d.x * d.x + d.y * d.y;
        if a > 0.0 {
            let b = ox * d.x + oy * d.y;
            let c = ox * ox + oy * oy - pole.radius * pole.radius;
            let disc = b * b - a * c;
            if disc >= 0.0 {
                for t in [(-b - disc.sqrt()) / a, (-b + disc.sqrt()) / a] {
                    let z = o.z + t * d.z;
                    if z >= base && z <= base + pole.height {
                        take(t, pole.class);
                    }
                }
            }
        }
        if d.z != 0.0 {
            for cap in [base, base + pole.height] {
                let t = (cap - o.z) / d.z;
                let (x, y) = (ox + t * d.x, oy + t * d.y);
                if x * x + y * y <= pole.radius * pole.radius {
                    take(t, pole.class);
                }
            }
        }
    }
    best
}
