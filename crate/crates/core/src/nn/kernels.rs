//! Dense kernels on [`Tensor`]s.
//!
//! Inputs and outputs are f32; every reduction accumulates in f64 in
//! ascending index order, so results do not depend on the thread count.

use rayon::prelude::*;

use super::tensor::{FeatureMap, FeatureVolume, Tensor};
use crate::error::{Error, Result};

pub const NORM_EPS: f32 = 1e-5;

/// `y = x W + b` over the trailing axis. `w` is `(Din, Dout)`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    if w.rank() != 2 {
        return Err(Error::shape(format!("weight must be 2-D, got {:?}", w.dims())));
    }
    let (din, dout) = (w.dims()[0], w.dims()[1]);
    if x.last_dim() != din {
        return Err(Error::shape(format!(
            "input trailing dim {} != weight rows {din}",
            x.last_dim()
        )));
    }
    if let Some(b) = b {
        if b.dims() != [dout] {
            return Err(Error::shape(format!("bias {:?} != ({dout})", b.dims())));
        }
    }
    let mut dims = x.dims().to_vec();
    if dims.is_empty() {
        dims.push(dout);
    } else {
        *dims.last_mut().unwrap() = dout;
    }
    let mut out = Tensor::zeros(dims);
    if dout == 0 {
        return Ok(out);
    }
    let wd = w.data();
    out.data_mut()
        .par_chunks_mut(dout)
        .enumerate()
        .for_each(|(r, out_row)| {
            let x_row = &x.data()[r * din..(r + 1) * din];
            linear_row(x_row, wd, b.map(Tensor::data), out_row);
        });
    Ok(out)
}

/// Single-row linear map into `out`.
pub(crate) fn linear_row(x: &[f32], w: &[f32], b: Option<&[f32]>, out: &mut [f32]) {
    let dout = out.len();
    let mut acc = vec![0.0f64; dout];
    for (i, &xi) in x.iter().enumerate() {
        let xi = f64::from(xi);
        let w_row = &w[i * dout..(i + 1) * dout];
        for (a, &wv) in acc.iter_mut().zip(w_row) {
            *a += xi * f64::from(wv);
        }
    }
    for (o, (slot, a)) in out.iter_mut().zip(&acc).enumerate() {
        let bias = b.map_or(0.0, |b| f64::from(b[o]));
        *slot = (a + bias) as f32;
    }
}

/// Numerically stable softmax of a slice of logits.
pub fn softmax_f64(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::invalid(format!("axis {axis} out of range for rank {}", x.rank())));
    }
    let extent = x.dims()[axis];
    let inner: usize = x.dims()[axis + 1..].iter().product();
    let outer: usize = x.dims()[..axis].iter().product();
    let mut out = x.clone();
    let mut buf = vec![0.0f64; extent];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * extent * inner + i;
            for (k, slot) in buf.iter_mut().enumerate() {
                *slot = f64::from(x.data()[base + k * inner]);
            }
            for (k, p) in softmax_f64(&buf).into_iter().enumerate() {
                out.data_mut()[base + k * inner] = p as f32;
            }
        }
    }
    Ok(out)
}

/// Normalization over the trailing axis followed by `gamma`, `beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    let c = x.last_dim();
    if c == 0 || gamma.dims() != [c] || beta.dims() != [c] {
        return Err(Error::shape(format!(
            "layer norm over {c} channels with gamma {:?}, beta {:?}",
            gamma.dims(),
            beta.dims()
        )));
    }
    let mut out = x.clone();
    out.data_mut().par_chunks_mut(c).for_each(|row| {
        layer_norm_row(row, gamma.data(), beta.data(), eps);
    });
    Ok(out)
}

pub(crate) fn layer_norm_row(row: &mut [f32], gamma: &[f32], beta: &[f32], eps: f32) {
    let n = row.len() as f64;
    let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = row
        .iter()
        .map(|&v| {
            let d = f64::from(v) - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let inv = 1.0 / (var + f64::from(eps)).sqrt();
    for ((v, &g), &b) in row.iter_mut().zip(gamma).zip(beta) {
        *v = ((f64::from(*v) - mean) * inv * f64::from(g) + f64::from(b)) as f32;
    }
}

/// Inference-mode batch normalization with stored statistics. Channels are
/// the trailing axis.
pub fn batch_norm_inference(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    eps: f32,
) -> Result<Tensor> {
    let c = x.last_dim();
    for (name, t) in [
        ("gamma", gamma),
        ("beta", beta),
        ("running_mean", running_mean),
        ("running_var", running_var),
    ] {
        if t.dims() != [c] {
            return Err(Error::shape(format!("batch norm {name} {:?} != ({c})", t.dims())));
        }
    }
    let scale: Vec<f64> = gamma
        .data()
        .iter()
        .zip(running_var.data())
        .map(|(&g, &v)| f64::from(g) / (f64::from(v) + f64::from(eps)).sqrt())
        .collect();
    let mut out = x.clone();
    out.data_mut().par_chunks_mut(c).for_each(|row| {
        for (ch, v) in row.iter_mut().enumerate() {
            let centered = f64::from(*v) - f64::from(running_mean.data()[ch]);
            *v = (centered * scale[ch] + f64::from(beta.data()[ch])) as f32;
        }
    });
    Ok(out)
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    relu_in_place(out.data_mut());
    out
}

pub(crate) fn relu_in_place(data: &mut [f32]) {
    for v in data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// 3x3x3 cross-correlation with zero padding 1. `kernel` is
/// `(3, 3, 3, Cin, Cout)`.
pub fn conv3d(x: &FeatureVolume, kernel: &Tensor, bias: Option<&Tensor>) -> Result<FeatureVolume> {
    conv3d_restricted(x, kernel, bias, None)
}

/// [`conv3d`] evaluated only at voxels flagged in `outputs`; all other
/// output voxels are left at zero.
pub fn conv3d_restricted(
    x: &FeatureVolume,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    outputs: Option<&[bool]>,
) -> Result<FeatureVolume> {
    let cin = x.channels();
    let kd = kernel.dims();
    if kd.len() != 5 || kd[..3] != [3, 3, 3] || kd[3] != cin {
        return Err(Error::shape(format!(
            "kernel {kd:?} incompatible with {cin} input channels"
        )));
    }
    let cout = kd[4];
    if let Some(b) = bias {
        if b.dims() != [cout] {
            return Err(Error::shape(format!("conv bias {:?} != ({cout})", b.dims())));
        }
    }
    if let Some(mask) = outputs {
        if mask.len() != x.num_voxels() {
            return Err(Error::shape("conv output mask length differs from voxel count"));
        }
    }
    let [nx, ny, nz] = x.grid.dims;
    let mut out = FeatureVolume::zeros(x.grid.clone(), cout);
    if cout == 0 {
        return Ok(out);
    }
    let input = x.tensor.data();
    let kdata = kernel.data();
    let plane = ny * nz * cout;
    out.tensor
        .data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(ix, out_plane)| {
            let mut acc = vec![0.0f64; cout];
            for iy in 0..ny {
                for iz in 0..nz {
                    let vox = (ix * ny + iy) * nz + iz;
                    if outputs.is_some_and(|m| !m[vox]) {
                        continue;
                    }
                    acc.iter_mut().for_each(|a| *a = 0.0);
                    for dx in 0..3 {
                        let sx = ix as isize + dx as isize - 1;
                        if sx < 0 || sx >= nx as isize {
                            continue;
                        }
                        for dy in 0..3 {
                            let sy = iy as isize + dy as isize - 1;
                            if sy < 0 || sy >= ny as isize {
                                continue;
                            }
                            for dz in 0..3 {
                                let sz = iz as isize + dz as isize - 1;
                                if sz < 0 || sz >= nz as isize {
                                    continue;
                                }
                                let src = ((sx as usize * ny + sy as usize) * nz + sz as usize) * cin;
                                let tap = ((dx * 3 + dy) * 3 + dz) * cin * cout;
                                for ci in 0..cin {
                                    let xv = f64::from(input[src + ci]);
                                    if xv == 0.0 {
                                        continue;
                                    }
                                    let w_row = &kdata[tap + ci * cout..tap + (ci + 1) * cout];
                                    for (a, &wv) in acc.iter_mut().zip(w_row) {
                                        *a += xv * f64::from(wv);
                                    }
                                }
                            }
                        }
                    }
                    let dst = &mut out_plane[(iy * nz + iz) * cout..(iy * nz + iz + 1) * cout];
                    for (o, (d, a)) in dst.iter_mut().zip(acc.iter()).enumerate() {
                        let b = bias.map_or(0.0, |b| f64::from(b.data()[o]));
                        *d = (a + b) as f32;
                    }
                }
            }
        });
    Ok(out)
}

/// Bilinear interpolation of `map` at continuous pixel location `(u, v)`
/// (`u` along width, `v` along height). Corners outside the image count as
/// zero.
pub fn bilinear_sample(map: &FeatureMap, u: f64, v: f64) -> Vec<f32> {
    let mut acc = vec![0.0f64; map.channels()];
    accumulate_bilinear(map, u, v, 0, 1.0, &mut acc);
    acc.into_iter().map(|a| a as f32).collect()
}

/// Adds `weight * sample(map, u, v)[c0 .. c0 + acc.len()]` into `acc`.
pub(crate) fn accumulate_bilinear(
    map: &FeatureMap,
    u: f64,
    v: f64,
    c0: usize,
    weight: f64,
    acc: &mut [f64],
) {
    if !u.is_finite() || !v.is_finite() {
        return;
    }
    let (h, w) = (map.height() as isize, map.width() as isize);
    let u0 = u.floor();
    let v0 = v.floor();
    let fu = u - u0;
    let fv = v - v0;
    // Far outside the image every corner is padding; also keeps the casts sane.
    if u0 < -1.0 || v0 < -1.0 || u0 > w as f64 || v0 > h as f64 {
        return;
    }
    let (u0, v0) = (u0 as isize, v0 as isize);
    let corners = [
        (u0, v0, (1.0 - fu) * (1.0 - fv)),
        (u0 + 1, v0, fu * (1.0 - fv)),
        (u0, v0 + 1, (1.0 - fu) * fv),
        (u0 + 1, v0 + 1, fu * fv),
    ];
    let n = acc.len();
    for (cu, cv, cw) in corners {
        if cw == 0.0 || cu < 0 || cv < 0 || cu >= w || cv >= h {
            continue;
        }
        let px = map.pixel(cv as usize, cu as usize);
        let scale = weight * cw;
        for (a, &f) in acc.iter_mut().zip(&px[c0..c0 + n]) {
            *a += scale * f64::from(f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::GridSpec;

    fn t(dims: Vec<usize>, data: Vec<f32>) -> Tensor {
        Tensor::new(dims, data).unwrap()
    }

    #[test]
    fn linear_identity_and_bias_broadcast() {
        let x = t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let eye = t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(linear(&x, &eye, None).unwrap(), x);
        let zero = Tensor::zeros(vec![2, 2]);
        let b = t(vec![3], vec![0.5, -1.0, 2.0]);
        let w = Tensor::zeros(vec![2, 3]);
        let y = linear(&zero, &w, Some(&b)).unwrap();
        assert_eq!(y.data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn linear_rejects_shape_mismatch() {
        let x = Tensor::zeros(vec![2, 3]);
        let w = Tensor::zeros(vec![2, 2]);
        assert!(matches!(linear(&x, &w, None), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_closed_forms() {
        let x = Tensor::zeros(vec![4]);
        let y = softmax(&x, 0).unwrap();
        assert!(y.data().iter().all(|&p| (p - 0.25).abs() < 1e-7));
        let x = t(vec![2], vec![0.0, 3f32.ln()]);
        let y = softmax(&x, 0).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-6);
        assert!((y.data()[1] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn softmax_along_inner_axis() {
        let x = t(vec![2, 2], vec![0.0, 0.0, 0.0, 3f32.ln()]);
        let y = softmax(&x, 0).unwrap();
        // column 0: (0, 0) -> (.5, .5); column 1: (0, ln3) -> (.25, .75)
        let expect = [0.5, 0.25, 0.5, 0.75];
        for (a, b) in y.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn layer_norm_constant_and_normalized_slices() {
        let ones = Tensor::filled(vec![4], 1.0);
        let zeros = Tensor::zeros(vec![4]);
        let y = layer_norm(&Tensor::filled(vec![4], 3.0), &ones, &zeros, NORM_EPS).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let ones = Tensor::filled(vec![2], 1.0);
        let zeros = Tensor::zeros(vec![2]);
        let y = layer_norm(&t(vec![2], vec![-1.0, 1.0]), &ones, &zeros, NORM_EPS).unwrap();
        let scale = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((f64::from(y.data()[0]) + scale).abs() < 1e-6);
        assert!((f64::from(y.data()[1]) - scale).abs() < 1e-6);
    }

    #[test]
    fn batch_norm_identity_and_zero_gamma() {
        let x = t(vec![2, 2], vec![1.0, -2.0, 3.5, 0.25]);
        let ones = Tensor::filled(vec![2], 1.0);
        let zeros = Tensor::zeros(vec![2]);
        let y = batch_norm_inference(&x, &ones, &zeros, &zeros, &ones, NORM_EPS).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() < 1e-4);
        let beta = t(vec![2], vec![0.7, -0.3]);
        let y = batch_norm_inference(&x, &zeros, &beta, &zeros, &ones, NORM_EPS).unwrap();
        assert_eq!(y.data(), &[0.7, -0.3, 0.7, -0.3]);
    }

    #[test]
    fn relu_is_idempotent() {
        let x = t(vec![4], vec![-1.0, 0.0, 2.0, -0.5]);
        let y = relu(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 2.0, 0.0]);
        assert_eq!(relu(&y), y);
    }

    fn grid(n: usize) -> GridSpec {
        GridSpec::new([0.0; 3], 1.0, [n, n, n]).unwrap()
    }

    #[test]
    fn conv3d_delta_kernel_is_identity() {
        let c = 3;
        let mut kernel = Tensor::zeros(vec![3, 3, 3, c, c]);
        for ch in 0..c {
            kernel.set(&[1, 1, 1, ch, ch], 1.0);
        }
        let mut vol = FeatureVolume::zeros(grid(4), c);
        for (i, v) in vol.tensor.data_mut().iter_mut().enumerate() {
            *v = (i as f32 * 0.37).sin();
        }
        let out = conv3d(&vol, &kernel, None).unwrap();
        assert_eq!(out.tensor, vol.tensor);
    }

    #[test]
    fn conv3d_ones_kernel_counts_neighbourhood() {
        let kernel = Tensor::filled(vec![3, 3, 3, 1, 1], 1.0);
        let g = grid(4);
        let mut vol = FeatureVolume::zeros(g.clone(), 1);
        let hot = g.index([0, 1, 2]);
        vol.voxel_mut(hot)[0] = 1.0;
        let out = conv3d(&vol, &kernel, None).unwrap();
        for idx in 0..g.num_voxels() {
            let [x, y, z] = g.coords(idx);
            let near = x <= 1 && (0..=2).contains(&y) && (1..=3).contains(&z);
            assert_eq!(out.voxel(idx)[0], if near { 1.0 } else { 0.0 }, "voxel {x},{y},{z}");
        }
    }

    #[test]
    fn conv3d_restricted_matches_full_where_computed() {
        let kernel = Tensor::new(
            vec![3, 3, 3, 2, 2],
            (0..108).map(|i| ((i * 7 % 11) as f32 - 5.0) * 0.1).collect(),
        )
        .unwrap();
        let mut vol = FeatureVolume::zeros(grid(3), 2);
        for (i, v) in vol.tensor.data_mut().iter_mut().enumerate() {
            *v = (i as f32).cos();
        }
        let full = conv3d(&vol, &kernel, None).unwrap();
        let outputs: Vec<bool> = (0..27).map(|i| i % 4 == 0).collect();
        let part = conv3d_restricted(&vol, &kernel, None, Some(&outputs)).unwrap();
        for (i, &on) in outputs.iter().enumerate() {
            if on {
                assert_eq!(part.voxel(i), full.voxel(i));
            } else {
                assert!(part.voxel(i).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn conv3d_rejects_bad_kernel() {
        let vol = FeatureVolume::zeros(grid(2), 2);
        let kernel = Tensor::zeros(vec![3, 3, 3, 3, 1]);
        assert!(conv3d(&vol, &kernel, None).is_err());
    }

    fn ramp_map() -> FeatureMap {
        let mut map = FeatureMap::zeros(3, 4, 2, 0);
        for v in 0..3 {
            for u in 0..4 {
                let px = map.pixel_mut(v, u);
                px[0] = (10 * v + u) as f32;
                px[1] = -(u as f32);
            }
        }
        map
    }

    #[test]
    fn bilinear_exact_at_pixels_and_midpoints() {
        let map = ramp_map();
        assert_eq!(bilinear_sample(&map, 3.0, 2.0), map.pixel(2, 3).to_vec());
        let mid = bilinear_sample(&map, 1.5, 1.0);
        assert!((mid[0] - 11.5).abs() < 1e-6);
        assert!((mid[1] + 1.5).abs() < 1e-6);
    }

    #[test]
    fn bilinear_zero_padding() {
        let map = ramp_map();
        assert_eq!(bilinear_sample(&map, -5.0, 1.0), vec![0.0, 0.0]);
        assert_eq!(bilinear_sample(&map, 1.0, 100.0), vec![0.0, 0.0]);
        // Half a pixel past the right edge keeps half the edge value.
        let edge = bilinear_sample(&map, 3.5, 0.0);
        assert!((edge[0] - 1.5).abs() < 1e-6);
    }
}
