//! Procedural scenes with analytic ground truth.
//!
//! A scene is a ground plane, axis-aligned boxes and vertical poles seen by
//! a camera rig. Ground-truth labels come from center-in-solid
//! rasterization, depth maps from closed-form ray casting, and image and
//! depth features from seeded embeddings of what each pixel sees.
//!
//! Generated boxes have their faces on voxel centers. Every visible box or
//! plane point then falls in a voxel whose center lies inside that solid, so
//! depth-derived occupancy never claims a voxel the ground truth leaves
//! empty.

use std::path::Path;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Camera, CameraExtrinsics, CameraIntrinsics, CameraRig, DepthMap, Point3, PointCloud};
use crate::io::Calibration;
use crate::nn::{seeded_init, FeatureMap, SplitMix64, Tensor};
use crate::voxel::{voxelize_points, GridSpec, OccupancyMask, SemanticGrid, EMPTY_LABEL};

pub const CLASS_GROUND: u16 = 0;
pub const CLASS_VEHICLE: u16 = 1;
pub const CLASS_STRUCTURE: u16 = 2;
pub const CLASS_POLE: u16 = 3;
/// Classes used by generated scenes.
pub const NUM_CLASSES: usize = 4;

/// Intersections closer than this are ignored.
const MIN_HIT: f64 = 1e-9;
/// Slack for the closed point-in-solid tests.
const INSIDE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundPlane {
    pub z: f64,
    pub class: u16,
}

/// Closed axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSolid {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub class: u16,
}

impl BoxSolid {
    pub fn contains(&self, p: &Point3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] - INSIDE_TOL && p[a] <= self.max[a] + INSIDE_TOL)
    }
}

/// Vertical cylinder standing on the ground plane (or `z = 0` without one).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pole {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
    pub height: f64,
    pub class: u16,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub num_classes: usize,
    pub plane: Option<GroundPlane>,
    pub boxes: Vec<BoxSolid>,
    pub poles: Vec<Pole>,
    pub rig: Calibration,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let class_ok = |c: u16| (c as usize) < self.num_classes;
        if let Some(p) = &self.plane {
            if !p.z.is_finite() || !class_ok(p.class) {
                return Err(Error::invalid(format!("bad ground plane {p:?}")));
            }
        }
        for (i, b) in self.boxes.iter().enumerate() {
            let finite = b.min.iter().chain(&b.max).all(|v| v.is_finite());
            if !finite || (0..3).any(|a| b.max[a] <= b.min[a]) || !class_ok(b.class) {
                return Err(Error::invalid(format!("box {i} is degenerate or has a bad class")));
            }
        }
        for (i, p) in self.poles.iter().enumerate() {
            let finite = [p.x, p.y, p.radius, p.height].iter().all(|v| v.is_finite());
            if !finite || p.radius <= 0.0 || p.height <= 0.0 || !class_ok(p.class) {
                return Err(Error::invalid(format!("pole {i} is degenerate or has a bad class")));
            }
        }
        self.rig.to_rig().map(|_| ())
    }

    pub fn camera_rig(&self) -> Result<CameraRig> {
        self.rig.to_rig()
    }

    /// Height poles stand on.
    pub fn pole_base(&self) -> f64 {
        self.plane.map_or(0.0, |p| p.z)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let scene: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Class of the last-listed solid containing `p`.
    pub fn label_at(&self, p: &Point3, plane_half_thickness: f64) -> Option<u16> {
        let mut label = None;
        if let Some(plane) = &self.plane {
            if (p.z - plane.z).abs() < plane_half_thickness {
                label = Some(plane.class);
            }
        }
        for b in &self.boxes {
            if b.contains(p) {
                label = Some(b.class);
            }
        }
        let base = self.pole_base();
        for pole in &self.poles {
            let (dx, dy) = (p.x - pole.x, p.y - pole.y);
            if dx * dx + dy * dy <= pole.radius * pole.radius + INSIDE_TOL
                && p.z >= base - INSIDE_TOL
                && p.z <= base + pole.height + INSIDE_TOL
            {
                label = Some(pole.class);
            }
        }
        label
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Plain,
    Occluded,
    Cluttered,
}

impl FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Self::Plain),
            "occluded" => Ok(Self::Occluded),
            "cluttered" => Ok(Self::Cluttered),
            other => Err(Error::invalid(format!(
                "unknown difficulty {other:?}; expected plain, occluded or cluttered"
            ))),
        }
    }
}

/// Labels every voxel whose center lies inside a solid; the plane fills
/// the layer within half a voxel of its height.
pub fn rasterize_gt(scene: &SceneSpec, grid: &GridSpec) -> Result<SemanticGrid> {
    let half = grid.resolution[2] / 2.0;
    let labels = (0..grid.num_voxels())
        .into_par_iter()
        .map(|v| scene.label_at(&grid.center_of(v), half).unwrap_or(EMPTY_LABEL))
        .collect();
    SemanticGrid::new(grid.clone(), labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolidRef {
    Plane,
    Box(usize),
    Pole(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    /// Ray parameter; equals camera depth for rays from [`Camera::pixel_ray`].
    pub t: f64,
    pub point: Point3,
    pub solid: SolidRef,
    pub class: u16,
}

fn ray_plane(o: &Point3, d: &Vector3<f64>, z: f64) -> Option<f64> {
    if d.z == 0.0 {
        return None;
    }
    let t = (z - o.z) / d.z;
    (t > MIN_HIT).then_some(t)
}

fn ray_box(o: &Point3, d: &Vector3<f64>, b: &BoxSolid) -> Option<f64> {
    let (mut near, mut far) = (f64::NEG_INFINITY, f64::INFINITY);
    for a in 0..3 {
        if d[a] == 0.0 {
            if o[a] < b.min[a] || o[a] > b.max[a] {
                return None;
            }
            continue;
        }
        let t1 = (b.min[a] - o[a]) / d[a];
        let t2 = (b.max[a] - o[a]) / d[a];
        near = near.max(t1.min(t2));
        far = far.min(t1.max(t2));
    }
    (near <= far && near > MIN_HIT).then_some(near)
}

fn ray_pole(o: &Point3, d: &Vector3<f64>, p: &Pole, base: f64) -> Option<f64> {
    let top = base + p.height;
    let within_height = |t: f64| {
        let z = o.z + t * d.z;
        z >= base && z <= top
    };
    let mut best: Option<f64> = None;
    let mut consider = |t: f64| {
        if t > MIN_HIT && best.map_or(true, |b| t < b) {
            best = Some(t);
        }
    };
    let (ox, oy) = (o.x - p.x, o.y - p.y);
    let a = d.x * d.x + d.y * d.y;
    if a > 0.0 {
        let b = 2.0 * (ox * d.x + oy * d.y);
        let c = ox * ox + oy * oy - p.radius * p.radius;
        let disc = b * b - 4.0 * a * c;
        if disc >= 0.0 {
            let t = (-b - disc.sqrt()) / (2.0 * a);
            if within_height(t) {
                consider(t);
            }
        }
    }
    for cap in [base, top] {
        if let Some(t) = ray_plane(o, d, cap) {
            let (x, y) = (ox + t * d.x, oy + t * d.y);
            if x * x + y * y <= p.radius * p.radius {
                consider(t);
            }
        }
    }
    best
}

/// Nearest intersection of `origin + t * dir` (`t > 0`) with the scene.
pub fn cast_ray(scene: &SceneSpec, origin: &Point3, dir: &Vector3<f64>) -> Option<Hit> {
    let mut best: Option<(f64, SolidRef, u16)> = None;
    let mut consider = |t: Option<f64>, solid: SolidRef, class: u16| {
        if let Some(t) = t {
            if best.map_or(true, |(b, _, _)| t < b) {
                best = Some((t, solid, class));
            }
        }
    };
    if let Some(plane) = &scene.plane {
        consider(ray_plane(origin, dir, plane.z), SolidRef::Plane, plane.class);
    }
    for (i, b) in scene.boxes.iter().enumerate() {
        consider(ray_box(origin, dir, b), SolidRef::Box(i), b.class);
    }
    let base = scene.pole_base();
    for (i, p) in scene.poles.iter().enumerate() {
        consider(ray_pole(origin, dir, p, base), SolidRef::Pole(i), p.class);
    }
    best.map(|(t, solid, class)| Hit {
        t,
        point: origin + dir * t,
        solid,
        class,
    })
}

/// First hit per pixel, row-major.
pub fn raycast(scene: &SceneSpec, camera: &Camera) -> Vec<Option<Hit>> {
    let (w, h) = (camera.intrinsics.width, camera.intrinsics.height);
    (0..h)
        .into_par_iter()
        .flat_map_iter(|v| {
            (0..w).map(move |u| {
                let (o, d) = camera.pixel_ray(u as f64, v as f64);
                cast_ray(scene, &o, &d)
            })
        })
        .collect()
}

pub fn raycast_depth(scene: &SceneSpec, camera: &Camera) -> DepthMap {
    depth_from_hits(&raycast(scene, camera), camera)
}

fn depth_from_hits(hits: &[Option<Hit>], camera: &Camera) -> DepthMap {
    DepthMap {
        width: camera.intrinsics.width,
        height: camera.intrinsics.height,
        values: hits.iter().map(|h| h.map_or(DepthMap::NO_RETURN, |h| h.t)).collect(),
    }
}

/// Adds zero-mean Gaussian noise to every return; returns pushed to zero
/// or below become missing.
pub fn add_depth_noise(depth: &DepthMap, sigma: f64, seed: u64) -> DepthMap {
    let mut rng = SplitMix64::keyed(seed, "synth.depth_noise");
    let values = depth
        .values
        .iter()
        .map(|&d| {
            // Box-Muller, one draw per pixel keeps the stream aligned.
            let (a, b) = (rng.next_f64(), rng.next_f64());
            let n = (-2.0 * (1.0 - a).ln()).sqrt() * (std::f64::consts::TAU * b).cos();
            let noisy = d + sigma * n;
            if d.is_finite() && noisy > 0.0 {
                noisy
            } else {
                DepthMap::NO_RETURN
            }
        })
        .collect();
    DepthMap { values, ..depth.clone() }
}

/// Everything a camera observes of a scene.
#[derive(Debug, Clone)]
pub struct Observation {
    pub hits: Vec<Option<Hit>>,
    pub depth: DepthMap,
    pub image_features: FeatureMap,
    pub depth_features: FeatureMap,
}

/// Image features: a seeded embedding of the hit class in the first
/// `channels - 2` channels and the normalized pixel coordinates in the last
/// two; zero where nothing is hit. Depth features: `(d, 1/d, 1)` mapped to
/// `channels` by a seeded projection; zero where nothing is hit.
pub fn synth_features(
    hits: &[Option<Hit>],
    camera: &Camera,
    camera_index: usize,
    channels: usize,
    seed: u64,
) -> Result<(FeatureMap, FeatureMap)> {
    let (w, h) = (camera.intrinsics.width, camera.intrinsics.height);
    if hits.len() != w * h {
        return Err(Error::shape(format!("{} hits for a {w}x{h} image", hits.len())));
    }
    if channels < 3 {
        return Err(Error::invalid("synthetic features need at least 3 channels"));
    }
    let embed = channels - 2;
    let proj = seeded_init(seed, "synth.depth_proj", &[3, channels]);
    let mut classes: Vec<Option<Tensor>> = Vec::new();
    let mut image = FeatureMap::zeros(h, w, channels, camera_index);
    let mut depth = FeatureMap::zeros(h, w, channels, camera_index);
    let norm = |x: usize, n: usize| if n > 1 { x as f32 / (n - 1) as f32 } else { 0.0 };
    for (p, hit) in hits.iter().enumerate() {
        let Some(hit) = hit else { continue };
        let (v, u) = (p / w, p % w);
        let c = hit.class as usize;
        if classes.len() <= c {
            classes.resize(c + 1, None);
        }
        let emb = classes[c].get_or_insert_with(|| seeded_init(seed, &format!("synth.class.{c}"), &[embed]));
        let px = image.pixel_mut(v, u);
        px[..embed].copy_from_slice(emb.data());
        px[embed] = norm(u, w);
        px[embed + 1] = norm(v, h);
        let x = [hit.t, 1.0 / hit.t, 1.0];
        for (o, slot) in depth.pixel_mut(v, u).iter_mut().enumerate() {
            *slot = (0..3).map(|i| x[i] * f64::from(proj.data()[i * channels + o])).sum::<f64>() as f32;
        }
    }
    Ok((image, depth))
}

/// Renders every camera of `rig`.
pub fn observe(scene: &SceneSpec, rig: &CameraRig, channels: usize, seed: u64) -> Result<Vec<Observation>> {
    rig.cameras
        .iter()
        .enumerate()
        .map(|(i, cam)| {
            let hits = raycast(scene, cam);
            let depth = depth_from_hits(&hits, cam);
            let (image_features, depth_features) = synth_features(&hits, cam, i, channels, seed)?;
            Ok(Observation {
                hits,
                depth,
                image_features,
                depth_features,
            })
        })
        .collect()
}

/// Voxels holding an analytic first-hit point of any pixel: the surfaces
/// the rig can see.
pub fn visible_surface_mask(scene: &SceneSpec, rig: &CameraRig, grid: &GridSpec) -> OccupancyMask {
    let points: Vec<Point3> = rig
        .cameras
        .iter()
        .flat_map(|cam| raycast(scene, cam).into_iter().flatten().map(|h| h.point))
        .collect();
    voxelize_points(&PointCloud::new(points), grid)
}

/// Whether every sampled point on the box's side and top faces is blocked
/// from every camera center by some other solid.
pub fn box_hidden(scene: &SceneSpec, index: usize, rig: &CameraRig) -> bool {
    const STEPS: usize = 6;
    let b = &scene.boxes[index];
    let lerp = |a: usize, s: usize| b.min[a] + (b.max[a] - b.min[a]) * s as f64 / STEPS as f64;
    let mut samples = Vec::new();
    for s in 0..=STEPS {
        for r in 0..=STEPS {
            samples.push(Vector3::new(lerp(0, s), lerp(1, r), b.max[2]));
            for x in [b.min[0], b.max[0]] {
                samples.push(Vector3::new(x, lerp(1, s), lerp(2, r)));
            }
            for y in [b.min[1], b.max[1]] {
                samples.push(Vector3::new(lerp(0, s), y, lerp(2, r)));
            }
        }
    }
    let mut others = scene.clone();
    others.boxes.remove(index);
    rig.cameras.iter().all(|cam| {
        let o = cam.extrinsics.center();
        samples.iter().all(|p| {
            let d = p - o;
            cast_ray(&others, &o, &d).is_some_and(|h| h.t < 1.0 - 1e-6 && h.solid != SolidRef::Plane)
        })
    })
}

/// Indices of generated boxes that no camera can see.
pub fn hidden_boxes(scene: &SceneSpec, rig: &CameraRig) -> Vec<usize> {
    (0..scene.boxes.len()).filter(|&i| box_hidden(scene, i, rig)).collect()
}

/// Two 64x64 cameras at `(0, 0, 1.5)` facing `+x` and `-x`, pitched 15
/// degrees down.
pub fn desk_rig() -> CameraRig {
    let intrinsics = CameraIntrinsics::new(32.0, 32.0, 31.5, 31.5, 64, 64).expect("valid intrinsics");
    let center = Vector3::new(0.0, 0.0, 1.5);
    let pitch = 15f64.to_radians();
    let cameras = [1.0, -1.0]
        .into_iter()
        .map(|sign: f64| {
            let forward = Vector3::new(sign * pitch.cos(), 0.0, -pitch.sin());
            let right = Vector3::new(0.0, -sign, 0.0);
            let down = forward.cross(&right);
            let cam_to_ego = Matrix3::from_columns(&[right, down, forward]);
            Camera {
                intrinsics,
                extrinsics: CameraExtrinsics::from_pose(cam_to_ego, center).expect("orthonormal pose"),
            }
        })
        .collect();
    CameraRig::new(cameras).expect("two cameras")
}

/// Voxel-index box `[lo, hi]` (inclusive) turned into a solid whose faces
/// sit on voxel centers.
fn snapped_box(grid: &GridSpec, lo: [usize; 3], hi: [usize; 3], class: u16) -> BoxSolid {
    let lo_c = grid.center_unchecked(lo);
    let hi_c = grid.center_unchecked(hi);
    BoxSolid {
        min: [lo_c.x, lo_c.y, lo_c.z],
        max: [hi_c.x, hi_c.y, hi_c.z],
        class,
    }
}

struct Layout<'a> {
    grid: &'a GridSpec,
    rng: SplitMix64,
    ground_k: usize,
}

impl Layout<'_> {
    fn index_of(&self, axis: usize, value: f64) -> usize {
        let g = self.grid;
        let i = ((value - g.origin[axis]) / g.resolution[axis]).floor();
        (i.max(0.0) as usize).min(g.dims[axis] - 1)
    }

    fn pick(&mut self, lo: usize, hi: usize) -> usize {
        lo + self.rng.below(hi - lo + 1)
    }

    /// A box of `size` voxels per horizontal axis and `height` voxels above
    /// the ground layer, placed at a random spot at least `clear` meters
    /// from the rig in x or y.
    fn random_box(&mut self, size: [usize; 2], height: usize, clear: f64, class: u16) -> Option<BoxSolid> {
        let g = self.grid;
        for _ in 0..64 {
            let i0 = self.pick(0, g.dims[0].saturating_sub(size[0] + 1));
            let j0 = self.pick(0, g.dims[1].saturating_sub(size[1] + 1));
            let lo = [i0, j0, self.ground_k];
            let hi = [
                (i0 + size[0]).min(g.dims[0] - 1),
                (j0 + size[1]).min(g.dims[1] - 1),
                (self.ground_k + height).min(g.dims[2] - 1),
            ];
            let b = snapped_box(g, lo, hi, class);
            let near_x = b.min[0] < clear && b.max[0] > -clear;
            let near_y = b.min[1] < clear && b.max[1] > -clear;
            if hi[2] > lo[2] && !(near_x && near_y) {
                return Some(b);
            }
        }
        None
    }
}

/// Seeded scene for the desk rig inside `grid`.
///
/// `plain` is the ground plane alone. `occluded` adds a wall in front of
/// the forward camera with a box hidden behind it (checked by ray casting)
/// and a box behind the rig. `cluttered` scatters boxes and poles.
pub fn gen_scene(seed: u64, difficulty: Difficulty, grid: &GridSpec) -> Result<SceneSpec> {
    let rig = desk_rig();
    let mut layout = Layout {
        grid,
        rng: SplitMix64::keyed(seed, &format!("synth.scene.{difficulty:?}")),
        ground_k: 0,
    };
    layout.ground_k = layout.index_of(2, 0.0);
    let plane = GroundPlane {
        z: grid.center_unchecked([0, 0, layout.ground_k]).z,
        class: CLASS_GROUND,
    };
    let mut scene = SceneSpec {
        seed,
        num_classes: NUM_CLASSES,
        plane: Some(plane),
        boxes: Vec::new(),
        poles: Vec::new(),
        rig: Calibration::from_rig(&rig),
    };
    let top_k = grid.dims[2] - 1;
    match difficulty {
        Difficulty::Plain => {}
        Difficulty::Occluded => {
            if top_k < layout.ground_k + 3 {
                return Err(Error::invalid("grid too shallow for an occluding wall"));
            }
            let mut found = false;
            for _ in 0..32 {
                let wall_x = layout.rng.uniform(2.5, 3.5);
                let i = layout.index_of(0, wall_x);
                let half = 6 + layout.rng.below(4);
                let j_mid = layout.index_of(1, 0.0);
                let wall_top = (layout.ground_k + 4 + layout.rng.below(2)).min(top_k);
                let wall = snapped_box(
                    grid,
                    [i, j_mid.saturating_sub(half), layout.ground_k],
                    [(i + 1).min(grid.dims[0] - 1), (j_mid + half).min(grid.dims[1] - 1), wall_top],
                    CLASS_STRUCTURE,
                );
                let hi0 = (i + 3 + layout.rng.below(3)).min(grid.dims[0] - 1);
                let hidden = snapped_box(
                    grid,
                    [hi0, j_mid.saturating_sub(2), layout.ground_k],
                    [
                        (hi0 + 2 + layout.rng.below(3)).min(grid.dims[0] - 1),
                        (j_mid + 2).min(grid.dims[1] - 1),
                        layout.ground_k + 1 + layout.rng.below(2),
                    ],
                    CLASS_VEHICLE,
                );
                scene.boxes = vec![wall, hidden];
                let back_x = layout.rng.uniform(-6.0, -4.0);
                let bi = layout.index_of(0, back_x);
                let back_y = layout.rng.uniform(-2.0, 2.0);
                let bj = layout.index_of(1, back_y);
                scene.boxes.push(snapped_box(
                    grid,
                    [bi, bj.saturating_sub(2), layout.ground_k],
                    [(bi + 3).min(grid.dims[0] - 1), (bj + 2).min(grid.dims[1] - 1), layout.ground_k + 3],
                    CLASS_VEHICLE,
                ));
                if hidden.max[0] > hidden.min[0] && box_hidden(&scene, 1, &rig) {
                    found = true;
                    break;
                }
            }
            if !found {
                return Err(Error::Invariant(format!(
                    "no fully occluded box found for seed {seed} on this grid"
                )));
            }
        }
        Difficulty::Cluttered => {
            let n_boxes = 3 + layout.rng.below(3);
            for _ in 0..n_boxes {
                let size = [2 + layout.rng.below(4), 2 + layout.rng.below(4)];
                let height = 1 + layout.rng.below(3);
                let class = if layout.rng.below(2) == 0 { CLASS_VEHICLE } else { CLASS_STRUCTURE };
                if let Some(b) = layout.random_box(size, height, 2.0, class) {
                    scene.boxes.push(b);
                }
            }
            let extent = |a: usize| (grid.origin[a], grid.origin[a] + grid.dims[a] as f64 * grid.resolution[a]);
            let n_poles = 2 + layout.rng.below(3);
            let (x_range, y_range) = (extent(0), extent(1));
            while scene.poles.len() < n_poles {
                let x = layout.rng.uniform(x_range.0 + 1.0, x_range.1 - 1.0);
                let y = layout.rng.uniform(y_range.0 + 1.0, y_range.1 - 1.0);
                if x.abs() < 2.0 && y.abs() < 2.0 {
                    continue;
                }
                scene.poles.push(Pole {
                    x,
                    y,
                    radius: layout.rng.uniform(0.15, 0.3),
                    height: layout.rng.uniform(1.2, 2.0),
                    class: CLASS_POLE,
                });
            }
        }
    }
    scene.validate()?;
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{backproject_pixel, cam_to_ego};

    fn plane_scene() -> SceneSpec {
        SceneSpec {
            seed: 0,
            num_classes: NUM_CLASSES,
            plane: Some(GroundPlane { z: 0.0, class: CLASS_GROUND }),
            boxes: vec![],
            poles: vec![],
            rig: Calibration::from_rig(&desk_rig()),
        }
    }

    #[test]
    fn plane_fills_one_layer() {
        let grid = GridSpec::new([-2.0, -2.0, -1.0], 0.4, [10, 10, 6]).unwrap();
        let gt = rasterize_gt(&plane_scene(), &grid).unwrap();
        for v in 0..grid.num_voxels() {
            let [_, _, k] = grid.coords(v);
            assert_eq!(gt.labels[v] != EMPTY_LABEL, k == 2, "voxel {v}");
        }
    }

    #[test]
    fn small_box_labels_its_voxel() {
        let grid = GridSpec::new([0.0; 3], 2.0, [3, 3, 3]).unwrap();
        let mut scene = plane_scene();
        scene.plane = None;
        scene.boxes.push(BoxSolid { min: [2.5, 2.5, 2.5], max: [3.5, 3.5, 3.5], class: 1 });
        let gt = rasterize_gt(&scene, &grid).unwrap();
        assert_eq!(gt.labels[grid.index([1, 1, 1])], 1);
        assert_eq!(gt.occupancy().count(), 1);
    }

    #[test]
    fn axis_ray_hits_plane_at_depth() {
        let cam = Camera {
            intrinsics: CameraIntrinsics::new(10.0, 10.0, 4.0, 4.0, 9, 9).unwrap(),
            extrinsics: CameraExtrinsics::identity(),
        };
        let mut scene = plane_scene();
        scene.plane = Some(GroundPlane { z: 5.0, class: 0 });
        assert_eq!(raycast_depth(&scene, &cam).get(4, 4), Some(5.0));
    }

    #[test]
    fn nearer_box_wins() {
        let mut scene = plane_scene();
        scene.plane = None;
        scene.boxes.push(BoxSolid { min: [-1.0, -1.0, 8.0], max: [1.0, 1.0, 9.0], class: 1 });
        scene.boxes.push(BoxSolid { min: [-1.0, -1.0, 3.0], max: [1.0, 1.0, 4.0], class: 2 });
        let hit = cast_ray(&scene, &Vector3::zeros(), &Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!((hit.t, hit.class), (3.0, 2));
    }

    #[test]
    fn pole_side_and_cap() {
        let mut scene = plane_scene();
        scene.plane = None;
        scene.poles.push(Pole { x: 5.0, y: 0.0, radius: 0.5, height: 2.0, class: CLASS_POLE });
        let side = cast_ray(&scene, &Vector3::new(0.0, 0.0, 1.0), &Vector3::new(1.0, 0.0, 0.0)).unwrap();
        assert!((side.t - 4.5).abs() < 1e-12);
        let cap = cast_ray(&scene, &Vector3::new(5.0, 0.0, 4.0), &Vector3::new(0.0, 0.0, -1.0)).unwrap();
        assert!((cap.t - 2.0).abs() < 1e-12);
    }

    #[test]
    fn backprojected_hits_lie_on_surfaces() {
        let grid = GridSpec::desk();
        let scene = gen_scene(3, Difficulty::Cluttered, &grid).unwrap();
        let rig = scene.camera_rig().unwrap();
        for cam in &rig.cameras {
            let hits = raycast(&scene, cam);
            for (p, hit) in hits.iter().enumerate() {
                let Some(hit) = hit else { continue };
                let (u, v) = ((p % 64) as f64, (p / 64) as f64);
                let q = cam_to_ego(&backproject_pixel((u, v), hit.t, &cam.intrinsics).unwrap(), &cam.extrinsics);
                assert!((q - hit.point).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn desk_rig_faces_opposite_ways() {
        let rig = desk_rig();
        let ahead = Vector3::new(5.0, 0.0, 0.0);
        let p0 = crate::geometry::ego_to_cam_and_project(&ahead, &rig.cameras[0].intrinsics, &rig.cameras[0].extrinsics);
        let p1 = crate::geometry::ego_to_cam_and_project(&ahead, &rig.cameras[1].intrinsics, &rig.cameras[1].extrinsics);
        assert!(p0.inside(&rig.cameras[0].intrinsics));
        assert!(!p1.in_front);
        assert!(p0.pixel.1 > 31.5);
    }

    #[test]
    fn generation_is_seeded() {
        let grid = GridSpec::desk();
        for d in [Difficulty::Plain, Difficulty::Occluded, Difficulty::Cluttered] {
            assert_eq!(gen_scene(9, d, &grid).unwrap(), gen_scene(9, d, &grid).unwrap());
        }
        let plain = gen_scene(1, Difficulty::Plain, &grid).unwrap();
        assert!(plain.boxes.is_empty() && plain.poles.is_empty() && plain.plane.is_some());
        let occluded = gen_scene(1, Difficulty::Occluded, &grid).unwrap();
        assert_eq!(hidden_boxes(&occluded, &desk_rig()), vec![1]);
    }

    #[test]
    fn features_follow_hits() {
        let grid = GridSpec::desk();
        let scene = gen_scene(2, Difficulty::Occluded, &grid).unwrap();
        let rig = scene.camera_rig().unwrap();
        let obs = observe(&scene, &rig, 8, 5).unwrap();
        let o = &obs[0];
        let mut seen = std::collections::HashMap::new();
        for (p, hit) in o.hits.iter().enumerate() {
            let px = o.image_features.pixel(p / 64, p % 64);
            match hit {
                None => {
                    assert!(px.iter().all(|&x| x == 0.0));
                    assert!(o.depth_features.pixel(p / 64, p % 64).iter().all(|&x| x == 0.0));
                }
                Some(h) => {
                    let emb = seen.entry(h.class).or_insert_with(|| px[..6].to_vec());
                    assert_eq!(&px[..6], emb.as_slice());
                }
            }
        }
        assert!(seen.len() >= 2);
    }

    #[test]
    fn noise_is_seeded_and_off_at_zero() {
        let depth = DepthMap::new(2, 1, vec![3.0, f64::NAN]).unwrap();
        assert_eq!(add_depth_noise(&depth, 0.0, 1).get(0, 0), Some(3.0));
        let a = add_depth_noise(&depth, 0.1, 1);
        assert_eq!(a.get(0, 0), add_depth_noise(&depth, 0.1, 1).get(0, 0));
        assert_eq!(a.get(1, 0), None);
    }
}
