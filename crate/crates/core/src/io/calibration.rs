use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{Camera, CameraExtrinsics, CameraIntrinsics, CameraRig};

/// One camera as stored in calibration JSON. `R` (row-major) and `t` map
/// ego points into the camera frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    #[serde(rename = "R")]
    pub rotation: [f64; 9],
    pub t: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calibration {
    pub cameras: Vec<CameraRecord>,
}

impl Calibration {
    pub fn from_rig(rig: &CameraRig) -> Self {
        let cameras = rig
            .cameras
            .iter()
            .map(|cam| {
                let (i, e) = (&cam.intrinsics, &cam.extrinsics);
                let r = &e.rotation;
                CameraRecord {
                    fx: i.fx,
                    fy: i.fy,
                    cx: i.cx,
                    cy: i.cy,
                    width: i.width,
                    height: i.height,
                    rotation: std::array::from_fn(|k| r[(k / 3, k % 3)]),
                    t: [e.translation.x, e.translation.y, e.translation.z],
                }
            })
            .collect();
        Self { cameras }
    }

    /// Validates every camera and builds the rig.
    pub fn to_rig(&self) -> Result<CameraRig> {
        let cameras = self
            .cameras
            .iter()
            .map(|c| {
                Ok(Camera {
                    intrinsics: CameraIntrinsics::new(c.fx, c.fy, c.cx, c.cy, c.width, c.height)?,
                    extrinsics: CameraExtrinsics::new(
                        Matrix3::from_row_slice(&c.rotation),
                        Vector3::from(c.t),
                    )?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        CameraRig::new(cameras)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_unknown_keys_and_bad_rotations() {
        let ok = r#"{"cameras":[{"fx":1,"fy":1,"cx":0,"cy":0,"width":2,"height":2,
            "R":[1,0,0,0,1,0,0,0,1],"t":[0,0,0]}]}"#;
        let cal: Calibration = serde_json::from_str(ok).unwrap();
        assert_eq!(cal.to_rig().unwrap().len(), 1);
        let extra = ok.replace("\"t\"", "\"skew\":0,\"t\"");
        assert!(serde_json::from_str::<Calibration>(&extra).is_err());
        let skewed = ok.replace("[1,0,0,0,1,0,0,0,1]", "[1,0,0,0,2,0,0,0,1]");
        let cal: Calibration = serde_json::from_str(&skewed).unwrap();
        assert!(cal.to_rig().is_err());
    }
}
