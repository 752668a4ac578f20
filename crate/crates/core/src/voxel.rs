//! Voxel lattices, occupancy masks, downsampling, the height/distance region
//! partition and distance-based spatial weights.
//!
//! Voxel `(i, j, k)` has flat index `(i * Y + j) * Z + k` and covers the
//! half-open cell `[origin + i r, origin + (i + 1) r)` on each axis.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud};
use crate::nn::{FeatureVolume, Tensor};

/// Height bin edges in meters: `[-1.0, 0.2)`, `[0.2, 2.2)`, `[2.2, 5.4]`.
pub const DEFAULT_HEIGHT_EDGES: [f64; 4] = [-1.0, 0.2, 2.2, 5.4];
/// Planar distance bin edges in meters: `[0, 10)`, `[10, 30)`, `[30, inf)`.
pub const DEFAULT_DISTANCE_EDGES: [f64; 3] = [0.0, 10.0, 30.0];
/// Decay of the distance weight `exp(-alpha d)`, per meter.
pub const DEFAULT_WEIGHT_DECAY: f64 = 0.01;

/// Lattice definition. Full-resolution grids are isotropic; a grid produced
/// by [`GridSpec::downsample`] with unequal per-axis factors is not.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    /// Minimum corner, meters.
    pub origin: [f64; 3],
    /// Voxel edge length per axis, meters.
    pub resolution: [f64; 3],
    pub dims: [usize; 3],
}

impl GridSpec {
    pub fn new(origin: [f64; 3], resolution: f64, dims: [usize; 3]) -> Result<Self> {
        Self::anisotropic(origin, [resolution; 3], dims)
    }

    pub fn anisotropic(origin: [f64; 3], resolution: [f64; 3], dims: [usize; 3]) -> Result<Self> {
        if resolution.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
            return Err(Error::invalid(format!("resolution must be positive, got {resolution:?}")));
        }
        if dims.contains(&0) {
            return Err(Error::invalid(format!("grid dims must be >= 1, got {dims:?}")));
        }
        for a in 0..3 {
            if !(origin[a] + resolution[a] * dims[a] as f64).is_finite() {
                return Err(Error::invalid("grid extent is not finite"));
            }
        }
        Ok(Self {
            origin,
            resolution,
            dims,
        })
    }

    /// 200 x 200 x 16 voxels of 0.4 m covering x, y in [-40, 40], z in [-1, 5.4].
    pub fn occ3d() -> Self {
        Self::new([-40.0, -40.0, -1.0], 0.4, [200, 200, 16]).expect("valid constant grid")
    }

    /// 50 x 50 x 8 voxels of 0.4 m around the ego origin.
    pub fn desk() -> Self {
        Self::new([-10.0, -10.0, -1.0], 0.4, [50, 50, 8]).expect("valid constant grid")
    }

    pub fn num_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_isotropic(&self) -> bool {
        self.resolution[0] == self.resolution[1] && self.resolution[1] == self.resolution[2]
    }

    pub fn index(&self, [i, j, k]: [usize; 3]) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    pub fn coords(&self, index: usize) -> [usize; 3] {
        let k = index % self.dims[2];
        let j = (index / self.dims[2]) % self.dims[1];
        let i = index / (self.dims[2] * self.dims[1]);
        [i, j, k]
    }

    /// Voxel containing `p`, or `None` outside the half-open extent.
    pub fn locate(&self, p: &Point3) -> Option<[usize; 3]> {
        let mut out = [0usize; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / self.resolution[a]).floor();
            if !(f >= 0.0 && f < self.dims[a] as f64) {
                return None;
            }
            out[a] = f as usize;
        }
        Some(out)
    }

    /// Center of voxel `index`; errors when out of range.
    pub fn voxel_center(&self, index: [usize; 3]) -> Result<Point3> {
        if (0..3).any(|a| index[a] >= self.dims[a]) {
            return Err(Error::invalid(format!(
                "voxel {index:?} outside grid {:?}",
                self.dims
            )));
        }
        Ok(self.center_unchecked(index))
    }

    pub(crate) fn center_unchecked(&self, index: [usize; 3]) -> Point3 {
        Point3::new(
            self.origin[0] + (index[0] as f64 + 0.5) * self.resolution[0],
            self.origin[1] + (index[1] as f64 + 0.5) * self.resolution[1],
            self.origin[2] + (index[2] as f64 + 0.5) * self.resolution[2],
        )
    }

    /// Center of the voxel with flat index `index`.
    pub fn center_of(&self, index: usize) -> Point3 {
        self.center_unchecked(self.coords(index))
    }

    /// Coarse grid for per-axis factors; trailing partial blocks are kept.
    pub fn downsample(&self, factor: [usize; 3]) -> Result<GridSpec> {
        check_factor(factor)?;
        let dims = [0, 1, 2].map(|a| self.dims[a].div_ceil(factor[a]));
        let resolution = [0, 1, 2].map(|a| self.resolution[a] * factor[a] as f64);
        GridSpec::anisotropic(self.origin, resolution, dims)
    }

    /// Flat indices within Chebyshev distance `radius` of any flagged voxel.
    pub fn dilate(&self, mask: &[bool], radius: usize) -> Vec<bool> {
        let mut cur = mask.to_vec();
        let strides = [self.dims[1] * self.dims[2], self.dims[2], 1];
        for axis in 0..3 {
            let mut next = cur.clone();
            for (idx, &on) in cur.iter().enumerate() {
                if !on {
                    continue;
                }
                let c = self.coords(idx)[axis];
                let lo = c.saturating_sub(radius);
                let hi = (c + radius).min(self.dims[axis] - 1);
                for n in lo..=hi {
                    next[idx - c * strides[axis] + n * strides[axis]] = true;
                }
            }
            cur = next;
        }
        cur
    }
}

fn check_factor(factor: [usize; 3]) -> Result<()> {
    if factor.contains(&0) {
        return Err(Error::invalid(format!("downsample factor must be >= 1, got {factor:?}")));
    }
    Ok(())
}

/// One boolean per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyMask {
    pub grid: GridSpec,
    pub bits: Vec<bool>,
}

impl OccupancyMask {
    pub fn new(grid: GridSpec, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != grid.num_voxels() {
            return Err(Error::shape(format!(
                "mask has {} bits for {} voxels",
                bits.len(),
                grid.num_voxels()
            )));
        }
        Ok(Self { grid, bits })
    }

    pub fn empty(grid: GridSpec) -> Self {
        let n = grid.num_voxels();
        Self {
            grid,
            bits: vec![false; n],
        }
    }

    pub fn full(grid: GridSpec) -> Self {
        let n = grid.num_voxels();
        Self {
            grid,
            bits: vec![true; n],
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, index: usize) -> bool {
        self.bits[index]
    }

    pub fn set(&mut self, index: usize, value: bool) {
        self.bits[index] = value;
    }

    /// Flat indices of set voxels, ascending.
    pub fn set_indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn check_same_grid(&self, other: &OccupancyMask) -> Result<()> {
        if self.grid.dims != other.grid.dims {
            return Err(Error::shape(format!(
                "mask dims {:?} vs {:?}",
                self.grid.dims, other.grid.dims
            )));
        }
        Ok(())
    }

    pub fn is_subset_of(&self, other: &OccupancyMask) -> bool {
        self.bits.len() == other.bits.len()
            && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }
}

/// Reserved label for empty voxels.
pub const EMPTY_LABEL: u16 = u16::MAX;

/// One class id per voxel, or [`EMPTY_LABEL`].
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticGrid {
    pub grid: GridSpec,
    pub labels: Vec<u16>,
}

impl SemanticGrid {
    pub fn new(grid: GridSpec, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != grid.num_voxels() {
            return Err(Error::shape(format!(
                "{} labels for {} voxels",
                labels.len(),
                grid.num_voxels()
            )));
        }
        Ok(Self { grid, labels })
    }

    pub fn empty(grid: GridSpec) -> Self {
        let n = grid.num_voxels();
        Self {
            grid,
            labels: vec![EMPTY_LABEL; n],
        }
    }

    pub fn occupancy(&self) -> OccupancyMask {
        OccupancyMask {
            grid: self.grid.clone(),
            bits: self.labels.iter().map(|&l| l != EMPTY_LABEL).collect(),
        }
    }

    /// Errors if any non-empty label is `>= num_classes`.
    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        match self
            .labels
            .iter()
            .find(|&&l| l != EMPTY_LABEL && usize::from(l) >= num_classes)
        {
            Some(l) => Err(Error::invalid(format!("label {l} >= class count {num_classes}"))),
            None => Ok(()),
        }
    }
}

/// Sets every voxel that contains at least one point; points outside the
/// extent are dropped.
pub fn voxelize_points(points: &PointCloud, grid: &GridSpec) -> OccupancyMask {
    let hits: Vec<Option<usize>> = points
        .points
        .par_iter()
        .map(|p| grid.locate(p).map(|ijk| grid.index(ijk)))
        .collect();
    let mut mask = OccupancyMask::empty(grid.clone());
    for idx in hits.into_iter().flatten() {
        mask.bits[idx] = true;
    }
    mask
}

/// OR-pooling over `factor` blocks.
pub fn downsample_mask(mask: &OccupancyMask, factor: [usize; 3]) -> Result<OccupancyMask> {
    let coarse = mask.grid.downsample(factor)?;
    let mut out = OccupancyMask::empty(coarse.clone());
    for idx in mask.set_indices() {
        let [i, j, k] = mask.grid.coords(idx);
        out.bits[coarse.index([i / factor[0], j / factor[1], k / factor[2]])] = true;
    }
    Ok(out)
}

/// Channel-wise mean over `factor` blocks; missing cells of a trailing
/// partial block count as zeros.
pub fn downsample_features(vol: &FeatureVolume, factor: [usize; 3]) -> Result<FeatureVolume> {
    let coarse = vol.grid.downsample(factor)?;
    let c = vol.channels();
    let fine = &vol.grid;
    let block = (factor[0] * factor[1] * factor[2]) as f64;
    let mut data = vec![0.0f32; coarse.num_voxels() * c];
    data.par_chunks_mut(c.max(1))
        .enumerate()
        .for_each(|(cidx, out)| {
            if c == 0 {
                return;
            }
            let [ci, cj, ck] = coarse.coords(cidx);
            let mut acc = vec![0.0f64; c];
            for i in ci * factor[0]..((ci + 1) * factor[0]).min(fine.dims[0]) {
                for j in cj * factor[1]..((cj + 1) * factor[1]).min(fine.dims[1]) {
                    for k in ck * factor[2]..((ck + 1) * factor[2]).min(fine.dims[2]) {
                        let src = vol.voxel(fine.index([i, j, k]));
                        for (a, &s) in acc.iter_mut().zip(src) {
                            *a += f64::from(s);
                        }
                    }
                }
            }
            for (o, a) in out.iter_mut().zip(acc) {
                *o = (a / block) as f32;
            }
        });
    let [x, y, z] = coarse.dims;
    FeatureVolume::new(coarse, Tensor::new(vec![x, y, z, c], data)?)
}

/// Disjoint cover of the grid by height x distance bins of voxel centers.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionPartition {
    pub grid: GridSpec,
    /// Region `height_bin * distance_bins + distance_bin`.
    pub masks: Vec<OccupancyMask>,
    pub height_edges: Vec<f64>,
    pub distance_edges: Vec<f64>,
    /// Region of every voxel.
    pub region_of: Vec<usize>,
}

impl RegionPartition {
    pub fn num_regions(&self) -> usize {
        self.masks.len()
    }

    pub fn height_bins(&self) -> usize {
        self.height_edges.len() - 1
    }

    pub fn distance_bins(&self) -> usize {
        self.distance_edges.len()
    }
}

/// Partitions `grid` by voxel-center height and planar distance from the
/// ego origin.
///
/// `height_edges` has one more entry than there are height bins; the last
/// bin is closed and centers outside the edges clamp to the nearest bin.
/// `distance_edges` starts each distance bin; the last bin is unbounded.
pub fn region_partition(
    grid: &GridSpec,
    height_edges: &[f64],
    distance_edges: &[f64],
) -> Result<RegionPartition> {
    let increasing = |e: &[f64]| e.windows(2).all(|w| w[0] < w[1]);
    if height_edges.len() < 2 || !increasing(height_edges) {
        return Err(Error::invalid(format!(
            "height edges must be strictly increasing with at least two entries, got {height_edges:?}"
        )));
    }
    if distance_edges.is_empty() || !increasing(distance_edges) || distance_edges[0] < 0.0 {
        return Err(Error::invalid(format!(
            "distance edges must be non-negative and strictly increasing, got {distance_edges:?}"
        )));
    }
    let nh = height_edges.len() - 1;
    let nd = distance_edges.len();
    let mut masks = vec![OccupancyMask::empty(grid.clone()); nh * nd];
    let mut region_of = vec![0usize; grid.num_voxels()];
    for (idx, slot) in region_of.iter_mut().enumerate() {
        let c = grid.center_of(idx);
        let h = height_bin(c.z, height_edges);
        let d = distance_bin((c.x * c.x + c.y * c.y).sqrt(), distance_edges);
        let region = h * nd + d;
        *slot = region;
        masks[region].bits[idx] = true;
    }
    Ok(RegionPartition {
        grid: grid.clone(),
        masks,
        height_edges: height_edges.to_vec(),
        distance_edges: distance_edges.to_vec(),
        region_of,
    })
}

/// Partition with the default 3 x 3 height/distance bins.
pub fn default_region_partition(grid: &GridSpec) -> RegionPartition {
    region_partition(grid, &DEFAULT_HEIGHT_EDGES, &DEFAULT_DISTANCE_EDGES)
        .expect("default edges are valid")
}

fn height_bin(z: f64, edges: &[f64]) -> usize {
    let n = edges.len() - 1;
    (0..n).rfind(|&b| z >= edges[b]).unwrap_or(0)
}

fn distance_bin(d: f64, edges: &[f64]) -> usize {
    (0..edges.len()).rfind(|&b| d >= edges[b]).unwrap_or(0)
}

/// `exp(-alpha * sqrt(x² + y²))`.
pub fn spatial_weight(point: &Point3, alpha: f64) -> f64 {
    (-alpha * (point.x * point.x + point.y * point.y).sqrt()).exp()
}

/// [`spatial_weight`] at every voxel center.
pub fn spatial_weights(grid: &GridSpec, alpha: f64) -> Vec<f64> {
    (0..grid.num_voxels())
        .map(|i| spatial_weight(&grid.center_of(i), alpha))
        .collect()
}

/// Fraction of set voxels.
pub fn occupancy_ratio(mask: &OccupancyMask) -> f64 {
    mask.count() as f64 / mask.bits.len() as f64
}
