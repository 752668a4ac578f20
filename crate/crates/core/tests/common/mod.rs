//! Shared fixtures for the integration tests.
#![allow(dead_code)]

pub mod oracle;

use nalgebra::{Matrix3, Vector3};
use occforge::dca::{DcaConfig, DcaParams};
use occforge::geometry::{Camera, CameraExtrinsics, CameraIntrinsics, CameraRig};
use occforge::nn::{FeatureMap, FeatureVolume, ParameterStore, Registry, Tensor};
use occforge::voxel::GridSpec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Two narrow cameras around a 2 m cube centered on the origin, so voxels
/// see zero, one or two of them.
pub fn cube_rig() -> CameraRig {
    let looking_x = Matrix3::from_columns(&[
        Vector3::new(0.0, -1.0, 0.0),
        Vector3::new(0.0, 0.0, -1.0),
        Vector3::new(1.0, 0.0, 0.0),
    ]);
    let looking_y = Matrix3::from_columns(&[
        Vector3::new(1.0, 0.0, 0.0),
        Vector3::new(0.0, 0.0, -1.0),
        Vector3::new(0.0, 1.0, 0.0),
    ]);
    let cam0 = Camera {
        intrinsics: CameraIntrinsics::new(30.0, 30.0, 7.5, 7.5, 16, 16).unwrap(),
        extrinsics: CameraExtrinsics::from_pose(looking_x, Vector3::new(-4.0, 0.4, -0.3)).unwrap(),
    };
    let cam1 = Camera {
        intrinsics: CameraIntrinsics::new(24.0, 24.0, 7.5, 7.5, 16, 16).unwrap(),
        extrinsics: CameraExtrinsics::from_pose(looking_y, Vector3::new(0.3, -4.0, 0.2)).unwrap(),
    };
    CameraRig::new(vec![cam0, cam1]).unwrap()
}

/// `n^3` grid spanning `[-1, 1]^3`.
pub fn cube_grid(n: usize) -> GridSpec {
    GridSpec::new([-1.0; 3], 2.0 / n as f64, [n, n, n]).unwrap()
}

pub fn random_volume(grid: &GridSpec, channels: usize, rng: &mut ChaCha8Rng) -> FeatureVolume {
    let data = (0..grid.num_voxels() * channels)
        .map(|_| rng.gen_range(-1.0f32..1.0))
        .collect();
    FeatureVolume::new(grid.clone(), Tensor::new(vec![grid.dims[0], grid.dims[1], grid.dims[2], channels], data).unwrap()).unwrap()
}

pub fn random_maps(rig: &CameraRig, channels: usize, rng: &mut ChaCha8Rng) -> Vec<FeatureMap> {
    rig.cameras
        .iter()
        .enumerate()
        .map(|(i, cam)| {
            let (w, h) = (cam.intrinsics.width, cam.intrinsics.height);
            let data = (0..w * h * channels).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            FeatureMap::new(Tensor::new(vec![h, w, channels], data).unwrap(), i).unwrap()
        })
        .collect()
}

/// Replaces the neutral normalization parameters with random ones so the
/// oracle comparison exercises them.
pub fn perturb_norms(store: &mut ParameterStore, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = store
        .iter()
        .map(|(n, _)| n.to_string())
        .filter(|n| n.ends_with(".gamma") || n.ends_with(".beta") || n.ends_with("running_mean") || n.ends_with("running_var"))
        .collect();
    for name in names {
        let t = store.get_mut(&name).unwrap();
        for v in t.data_mut() {
            *v = if name.ends_with("running_var") {
                rng.gen_range(0.5f32..2.0)
            } else if name.ends_with(".gamma") {
                rng.gen_range(0.5f32..1.5)
            } else {
                rng.gen_range(-0.3f32..0.3)
            };
        }
    }
}

/// Seeded DCA parameters under `ns` with randomized normalization.
pub fn dca_store(seed: u64, ns: &str, cfg: &DcaConfig) -> (ParameterStore, DcaParams) {
    let mut reg = Registry::new();
    DcaParams::register(&mut reg, ns, cfg);
    let mut store = ParameterStore::build(seed, &reg);
    perturb_norms(&mut store, &mut rng(seed ^ 0x5eed));
    let params = DcaParams::load(&store, ns, cfg).unwrap();
    (store, params)
}

pub fn max_abs_diff(a: &FeatureVolume, b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.num_voxels(), b.len());
    (0..a.num_voxels())
        .flat_map(|v| a.voxel(v).iter().zip(&b[v]).map(|(&x, &y)| (f64::from(x) - y).abs()))
        .fold(0.0, f64::max)
}

/// Largest absolute value, used to scale tolerances.
pub fn max_abs(b: &[Vec<f64>]) -> f64 {
    b.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
}
