//! On-disk formats: the OVG voxel container, OPRM parameter files and
//! calibration JSON.

pub mod calibration;
pub mod oprm;
pub mod ovg;

pub use calibration::{Calibration, CameraRecord};
pub use oprm::{read_params, write_params};
pub use ovg::{read_ovg, write_ovg, OvgFile, OvgPayload};
