//! Pinhole camera model: back-projection, ego/camera transforms and
//! forward projection of ego points into images.
//!
//! Extrinsics map ego coordinates into the camera frame, `x_cam = R p + t`,
//! so the camera-to-ego transform is `p = Rᵀ (x_cam - t)`. Pixel `(u, v)`
//! addresses the continuous image point `(u, v)` with no half-pixel shift.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};

pub type Point3 = Vector3<f64>;

/// Points closer than this to the image plane (camera z) are "behind".
pub const MIN_FRONT_DEPTH: f64 = 1e-6;

const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let intr = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::invalid(format!(
                "focal lengths must be positive, got fx={}, fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::invalid("principal point must be finite"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("image size must be at least 1x1"));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Whether the continuous location lies inside `[0, W-1] x [0, H-1]`.
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraExtrinsics {
    /// Ego -> camera rotation.
    pub rotation: Matrix3<f64>,
    /// Ego -> camera translation, meters.
    pub translation: Vector3<f64>,
}

impl CameraExtrinsics {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if !(ortho <= ROTATION_TOL) {
            return Err(Error::invalid(format!(
                "rotation is not orthonormal (max |RᵀR - I| = {ortho:e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOL {
            return Err(Error::invalid(format!("rotation determinant {det} != 1")));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("translation must be finite"));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Camera placed at ego position `center` with camera-to-ego rotation
    /// `cam_to_ego` (columns are the camera axes in ego coordinates).
    pub fn from_pose(cam_to_ego: Matrix3<f64>, center: Point3) -> Result<Self> {
        let rotation = cam_to_ego.transpose();
        Self::new(rotation, -(rotation * center))
    }

    /// Optical center in ego coordinates.
    pub fn center(&self) -> Point3 {
        -(self.rotation.transpose() * self.translation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: CameraExtrinsics,
}

impl Camera {
    /// Ego-frame ray through pixel `(u, v)`: origin plus a direction scaled so
    /// that the ray parameter equals camera depth.
    pub fn pixel_ray(&self, u: f64, v: f64) -> (Point3, Vector3<f64>) {
        let k = &self.intrinsics;
        let dir_cam = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
        (
            self.extrinsics.center(),
            self.extrinsics.rotation.transpose() * dir_cam,
        )
    }
}

/// Ordered list of calibrated cameras; indices are 0-based and stable.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    pub cameras: Vec<Camera>,
}

impl CameraRig {
    pub fn new(cameras: Vec<Camera>) -> Result<Self> {
        if cameras.is_empty() {
            return Err(Error::invalid("a camera rig needs at least one camera"));
        }
        Ok(Self { cameras })
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }
}

/// Per-pixel metric depth, row-major. `NaN` marks "no return".
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl DepthMap {
    pub const NO_RETURN: f64 = f64::NAN;

    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::shape(format!(
                "depth map {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|d| !d.is_nan() && !(**d > 0.0)) {
            return Err(Error::invalid(format!("depth values must be positive, got {bad}")));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![Self::NO_RETURN; width * height],
        }
    }

    /// Depth at column `u`, row `v`; `None` for no return.
    pub fn get(&self, u: usize, v: usize) -> Option<f64> {
        let d = self.values[v * self.width + u];
        (!d.is_nan()).then_some(d)
    }
}

/// Ego-frame points, optionally tagged with their source camera.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub sources: Option<Vec<usize>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Self {
        Self {
            points,
            sources: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Appends `other`; source tags survive only if both clouds carry them.
    pub fn extend(&mut self, other: PointCloud) {
        let was_empty = self.points.is_empty();
        self.points.extend(other.points);
        self.sources = match (self.sources.take(), other.sources) {
            (Some(mut a), Some(b)) => {
                a.extend(b);
                Some(a)
            }
            (None, Some(b)) if was_empty => Some(b),
            _ => None,
        };
    }
}

/// `d · K⁻¹ [u v 1]ᵀ` in the camera frame.
pub fn backproject_pixel(pixel: (f64, f64), depth: f64, intr: &CameraIntrinsics) -> Result<Point3> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(Error::invalid(format!("depth must be positive and finite, got {depth}")));
    }
    let (u, v) = pixel;
    let x = (u - intr.cx) / intr.fx;
    let y = (v - intr.cy) / intr.fy;
    Ok(Vector3::new(x * depth, y * depth, depth))
}

/// `Rᵀ (x_cam - t)`.
pub fn cam_to_ego(point_cam: &Point3, extr: &CameraExtrinsics) -> Point3 {
    extr.rotation.transpose() * (point_cam - extr.translation)
}

/// `R p + t`.
pub fn ego_to_cam(point_ego: &Point3, extr: &CameraExtrinsics) -> Point3 {
    extr.rotation * point_ego + extr.translation
}

/// Result of projecting an ego point into one camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    /// Undefined (`NaN`) when `in_front` is false.
    pub pixel: (f64, f64),
    pub depth: f64,
    pub in_front: bool,
}

impl Projection {
    pub fn inside(&self, intr: &CameraIntrinsics) -> bool {
        self.in_front && intr.contains(self.pixel.0, self.pixel.1)
    }
}

pub fn ego_to_cam_and_project(
    point_ego: &Point3,
    intr: &CameraIntrinsics,
    extr: &CameraExtrinsics,
) -> Projection {
    let x = ego_to_cam(point_ego, extr);
    if !(x.z > MIN_FRONT_DEPTH) {
        return Projection {
            pixel: (f64::NAN, f64::NAN),
            depth: x.z,
            in_front: false,
        };
    }
    Projection {
        pixel: (intr.fx * x.x / x.z + intr.cx, intr.fy * x.y / x.z + intr.cy),
        depth: x.z,
        in_front: true,
    }
}

/// Back-projects every non-sentinel pixel on the `stride` lattice into the
/// ego frame, in row-major pixel order.
pub fn depth_map_to_points(depth: &DepthMap, camera: &Camera, stride: usize) -> Result<PointCloud> {
    if stride == 0 {
        return Err(Error::invalid("stride must be at least 1"));
    }
    let intr = &camera.intrinsics;
    let extr = &camera.extrinsics;
    let rows: Vec<usize> = (0..depth.height).step_by(stride).collect();
    let per_row: Vec<Vec<Point3>> = rows
        .par_iter()
        .map(|&v| {
            (0..depth.width)
                .step_by(stride)
                .filter_map(|u| {
                    let d = depth.get(u, v)?;
                    let cam = backproject_pixel((u as f64, v as f64), d, intr).ok()?;
                    Some(cam_to_ego(&cam, extr))
                })
                .collect()
        })
        .collect();
    Ok(PointCloud::new(per_row.into_iter().flatten().collect()))
}

/// [`depth_map_to_points`] over a rig, tagging each point with its camera.
pub fn rig_depth_to_points(depths: &[DepthMap], rig: &CameraRig, stride: usize) -> Result<PointCloud> {
    if depths.len() != rig.len() {
        return Err(Error::shape(format!(
            "{} depth maps for {} cameras",
            depths.len(),
            rig.len()
        )));
    }
    let mut cloud = PointCloud {
        points: Vec::new(),
        sources: Some(Vec::new()),
    };
    for (i, (depth, cam)) in depths.iter().zip(&rig.cameras).enumerate() {
        let pts = depth_map_to_points(depth, cam, stride)?;
        let n = pts.len();
        cloud.extend(PointCloud {
            points: pts.points,
            sources: Some(vec![i; n]),
        });
    }
    Ok(cloud)
}
