use crate::error::{Error, Result};
use crate::voxel::GridSpec;

/// Dense row-major f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: Vec<usize>, value: f32) -> Self {
        let len = dims.iter().product();
        Self {
            dims,
            data: vec![value; len],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Extent of the trailing axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.dims.last().copied().unwrap_or(1)
    }

    pub fn reshape(self, dims: Vec<usize>) -> Result<Self> {
        Self::new(dims, self.data)
    }

    /// Row `i` when viewed as `(len / last_dim, last_dim)`.
    pub fn row(&self, i: usize) -> &[f32] {
        let w = self.last_dim();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let w = self.last_dim();
        &mut self.data[i * w..(i + 1) * w]
    }

    pub fn rows(&self) -> usize {
        let w = self.last_dim();
        if w == 0 {
            0
        } else {
            self.data.len() / w
        }
    }

    pub fn get(&self, index: &[usize]) -> f32 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f32) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.dims.len(), "index rank mismatch");
        index.iter().zip(&self.dims).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {i} out of range {d}");
            acc * d + i
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; `None` if shapes differ.
    pub fn max_abs_diff(&self, other: &Tensor) -> Option<f32> {
        if self.dims != other.dims {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f32::max),
        )
    }
}

/// Per-camera 2D feature map with dims `(H, W, D)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub tensor: Tensor,
    pub camera: usize,
}

impl FeatureMap {
    pub fn new(tensor: Tensor, camera: usize) -> Result<Self> {
        if tensor.rank() != 3 {
            return Err(Error::shape(format!(
                "feature map must be (H, W, D), got {:?}",
                tensor.dims()
            )));
        }
        Ok(Self { tensor, camera })
    }

    pub fn zeros(height: usize, width: usize, channels: usize, camera: usize) -> Self {
        Self {
            tensor: Tensor::zeros(vec![height, width, channels]),
            camera,
        }
    }

    pub fn height(&self) -> usize {
        self.tensor.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.tensor.dims()[1]
    }

    pub fn channels(&self) -> usize {
        self.tensor.dims()[2]
    }

    /// Feature vector at row `v`, column `u`.
    pub fn pixel(&self, v: usize, u: usize) -> &[f32] {
        self.tensor.row(v * self.width() + u)
    }

    pub fn pixel_mut(&mut self, v: usize, u: usize) -> &mut [f32] {
        let w = self.width();
        self.tensor.row_mut(v * w + u)
    }
}

/// Feature volume with dims `(X, Y, Z, C)` over a voxel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    pub grid: GridSpec,
    pub tensor: Tensor,
}

impl FeatureVolume {
    pub fn new(grid: GridSpec, tensor: Tensor) -> Result<Self> {
        let [x, y, z] = grid.dims;
        if tensor.rank() != 4 || tensor.dims()[..3] != [x, y, z] {
            return Err(Error::shape(format!(
                "volume dims {:?} do not match grid {:?}",
                tensor.dims(),
                grid.dims
            )));
        }
        Ok(Self { grid, tensor })
    }

    pub fn zeros(grid: GridSpec, channels: usize) -> Self {
        let [x, y, z] = grid.dims;
        Self {
            grid,
            tensor: Tensor::zeros(vec![x, y, z, channels]),
        }
    }

    /// Every voxel holds a copy of `value`.
    pub fn broadcast(grid: GridSpec, value: &[f32]) -> Self {
        let mut vol = Self::zeros(grid, value.len());
        for v in 0..vol.num_voxels() {
            vol.voxel_mut(v).copy_from_slice(value);
        }
        vol
    }

    pub fn channels(&self) -> usize {
        self.tensor.dims()[3]
    }

    pub fn num_voxels(&self) -> usize {
        self.grid.num_voxels()
    }

    pub fn voxel(&self, index: usize) -> &[f32] {
        self.tensor.row(index)
    }

    pub fn voxel_mut(&mut self, index: usize) -> &mut [f32] {
        self.tensor.row_mut(index)
    }
}
