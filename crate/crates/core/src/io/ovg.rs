//! OVG: a little-endian voxel container.
//!
//! ```text
//! "OVG1"  u8 kind (0 mask, 1 u16 labels, 2 f32)
//! u32 X, Y, Z, channels   f64 origin[3], resolution
//! payload in index order ((x * Y + y) * Z + z) * channels + c
//! ```
//!
//! Masks store one byte (0 or 1) per voxel. Two-dimensional maps use
//! `X = height`, `Y = width`, `Z = 1`, unit resolution at the origin.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::DepthMap;
use crate::nn::{FeatureMap, FeatureVolume, Tensor};
use crate::voxel::{GridSpec, OccupancyMask, SemanticGrid};

const MAGIC: &[u8; 4] = b"OVG1";

#[derive(Debug, Clone, PartialEq)]
pub enum OvgPayload {
    Mask(Vec<bool>),
    Labels(Vec<u16>),
    Values { channels: usize, data: Vec<f32> },
}

impl OvgPayload {
    fn kind(&self) -> u8 {
        match self {
            Self::Mask(_) => 0,
            Self::Labels(_) => 1,
            Self::Values { .. } => 2,
        }
    }

    fn channels(&self) -> usize {
        match self {
            Self::Values { channels, .. } => *channels,
            _ => 1,
        }
    }

    fn len(&self) -> usize {
        match self {
            Self::Mask(b) => b.len(),
            Self::Labels(l) => l.len(),
            Self::Values { data, .. } => data.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OvgFile {
    pub grid: GridSpec,
    pub payload: OvgPayload,
}

impl OvgFile {
    pub fn new(grid: GridSpec, payload: OvgPayload) -> Result<Self> {
        if payload.len() != grid.num_voxels() * payload.channels() {
            return Err(Error::shape(format!(
                "payload of {} entries for {} voxels x {} channels",
                payload.len(),
                grid.num_voxels(),
                payload.channels()
            )));
        }
        Ok(Self { grid, payload })
    }

    pub fn from_mask(mask: &OccupancyMask) -> Self {
        Self {
            grid: mask.grid.clone(),
            payload: OvgPayload::Mask(mask.bits.clone()),
        }
    }

    pub fn from_labels(labels: &SemanticGrid) -> Self {
        Self {
            grid: labels.grid.clone(),
            payload: OvgPayload::Labels(labels.labels.clone()),
        }
    }

    pub fn from_features(vol: &FeatureVolume) -> Self {
        Self {
            grid: vol.grid.clone(),
            payload: OvgPayload::Values {
                channels: vol.channels(),
                data: vol.tensor.data().to_vec(),
            },
        }
    }

    fn planar(height: usize, width: usize) -> Result<GridSpec> {
        GridSpec::new([0.0; 3], 1.0, [height, width, 1])
    }

    /// Depth map with missing returns stored as 0.
    pub fn from_depth(depth: &DepthMap) -> Result<Self> {
        let data = depth
            .values
            .iter()
            .map(|&d| if d.is_finite() { d as f32 } else { 0.0 })
            .collect();
        Self::new(
            Self::planar(depth.height, depth.width)?,
            OvgPayload::Values { channels: 1, data },
        )
    }

    pub fn from_feature_map(map: &FeatureMap) -> Result<Self> {
        Self::new(
            Self::planar(map.height(), map.width())?,
            OvgPayload::Values {
                channels: map.channels(),
                data: map.tensor.data().to_vec(),
            },
        )
    }

    pub fn into_mask(self) -> Result<OccupancyMask> {
        match self.payload {
            OvgPayload::Mask(bits) => OccupancyMask::new(self.grid, bits),
            _ => Err(Error::format("OVG", "expected a mask payload")),
        }
    }

    pub fn into_labels(self) -> Result<SemanticGrid> {
        match self.payload {
            OvgPayload::Labels(labels) => SemanticGrid::new(self.grid, labels),
            _ => Err(Error::format("OVG", "expected a label payload")),
        }
    }

    pub fn into_features(self) -> Result<FeatureVolume> {
        match self.payload {
            OvgPayload::Values { channels, data } => {
                let [x, y, z] = self.grid.dims;
                FeatureVolume::new(self.grid, Tensor::new(vec![x, y, z, channels], data)?)
            }
            _ => Err(Error::format("OVG", "expected an f32 payload")),
        }
    }

    /// Reads a depth map; stored zeros become missing returns.
    pub fn into_depth(self) -> Result<DepthMap> {
        let [h, w, z] = self.grid.dims;
        match self.payload {
            OvgPayload::Values { channels: 1, data } if z == 1 => DepthMap::new(
                w,
                h,
                data.iter()
                    .map(|&d| if d == 0.0 { DepthMap::NO_RETURN } else { f64::from(d) })
                    .collect(),
            ),
            _ => Err(Error::format("OVG", "expected a single-channel 2D f32 payload")),
        }
    }

    pub fn encode(&self, out: &mut impl Write) -> Result<()> {
        if !self.grid.is_isotropic() {
            return Err(Error::invalid("OVG stores a single resolution; grid is anisotropic"));
        }
        let mut buf = Vec::with_capacity(45 + self.payload.len() * 4);
        buf.extend_from_slice(MAGIC);
        buf.push(self.payload.kind());
        for d in self.grid.dims.into_iter().chain([self.payload.channels()]) {
            let d = u32::try_from(d).map_err(|_| Error::invalid("dimension exceeds u32"))?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for o in self.grid.origin {
            buf.extend_from_slice(&o.to_le_bytes());
        }
        buf.extend_from_slice(&self.grid.resolution[0].to_le_bytes());
        match &self.payload {
            OvgPayload::Mask(bits) => buf.extend(bits.iter().map(|&b| u8::from(b))),
            OvgPayload::Labels(l) => l.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
            OvgPayload::Values { data, .. } => {
                data.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()))
            }
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn decode(input: &mut impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        let mut r = Cursor { bytes: &bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format("OVG", "bad magic"));
        }
        let kind = r.take(1)?[0];
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let origin = [r.f64()?, r.f64()?, r.f64()?];
        let resolution = r.f64()?;
        let [x, y, z, channels] = dims;
        let grid = GridSpec::new(origin, resolution, [x, y, z])
            .map_err(|e| Error::format("OVG", format!("invalid grid header: {e}")))?;
        let count = x
            .checked_mul(y)
            .and_then(|n| n.checked_mul(z))
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| Error::format("OVG", "dimensions overflow"))?;
        let payload = match (kind, channels) {
            (0, 1) => OvgPayload::Mask(
                r.take(count)?
                    .iter()
                    .map(|&b| match b {
                        0 => Ok(false),
                        1 => Ok(true),
                        other => Err(Error::format("OVG", format!("mask byte {other}"))),
                    })
                    .collect::<Result<_>>()?,
            ),
            (1, 1) => OvgPayload::Labels(
                r.take(count.checked_mul(2).ok_or_else(|| Error::format("OVG", "too large"))?)?
                    .chunks_exact(2)
                    .map(|c| u16::from_le_bytes([c[0], c[1]]))
                    .collect(),
            ),
            (2, _) => OvgPayload::Values {
                channels,
                data: r
                    .take(count.checked_mul(4).ok_or_else(|| Error::format("OVG", "too large"))?)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            },
            (0 | 1, c) => return Err(Error::format("OVG", format!("{c} channels for a mask or label payload"))),
            (k, _) => return Err(Error::format("OVG", format!("unknown payload kind {k}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::format("OVG", "trailing bytes after payload"));
        }
        Self::new(grid, payload)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("OVG", "truncated file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn write_ovg(path: &Path, file: &OvgFile) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.encode(&mut out)?;
    out.flush()?;
    Ok(())
}

pub fn read_ovg(path: &Path) -> Result<OvgFile> {
    OvgFile::decode(&mut std::fs::File::open(path)?)
}
