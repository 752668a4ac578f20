//! Parameter bundles for the standard layers, loaded from a [`ParameterStore`].

use super::kernels::{self, NORM_EPS};
use super::params::ParameterStore;
use super::tensor::{FeatureVolume, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `(in, out)`
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        if weight.rank() != 2 {
            return Err(Error::shape(format!("linear weight {:?} is not 2-D", weight.dims())));
        }
        if let Some(b) = &bias {
            if b.dims() != [weight.dims()[1]] {
                return Err(Error::shape(format!(
                    "linear bias {:?} does not match weight {:?}",
                    b.dims(),
                    weight.dims()
                )));
            }
        }
        Ok(Self { weight, bias })
    }

    pub fn load(store: &ParameterStore, name: &str, bias: bool) -> Result<Self> {
        let weight = store.get(&format!("{name}.weight"))?.clone();
        let bias = if bias {
            Some(store.get(&format!("{name}.bias"))?.clone())
        } else {
            None
        };
        Self::new(weight, bias)
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        kernels::linear(x, &self.weight, self.bias.as_ref())
    }

    pub(crate) fn forward_row(&self, x: &[f32], out: &mut [f32]) {
        debug_assert_eq!(x.len(), self.in_dim());
        debug_assert_eq!(out.len(), self.out_dim());
        kernels::linear_row(x, self.weight.data(), self.bias.as_ref().map(Tensor::data), out);
    }

    /// Scalar output of a `(in, 1)` projection, in f64.
    pub(crate) fn score(&self, x: &[f32]) -> f64 {
        let mut acc = self.bias.as_ref().map_or(0.0, |b| f64::from(b.data()[0]));
        let w = self.weight.data();
        let dout = self.out_dim();
        for (i, &xi) in x.iter().enumerate() {
            acc += f64::from(xi) * f64::from(w[i * dout]);
        }
        acc
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormParams {
    pub fn load(store: &ParameterStore, name: &str) -> Result<Self> {
        Ok(Self {
            gamma: store.get(&format!("{name}.gamma"))?.clone(),
            beta: store.get(&format!("{name}.beta"))?.clone(),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        kernels::layer_norm(x, &self.gamma, &self.beta, NORM_EPS)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNormParams {
    pub fn load(store: &ParameterStore, name: &str) -> Result<Self> {
        Ok(Self {
            gamma: store.get(&format!("{name}.gamma"))?.clone(),
            beta: store.get(&format!("{name}.beta"))?.clone(),
            running_mean: store.get(&format!("{name}.running_mean"))?.clone(),
            running_var: store.get(&format!("{name}.running_var"))?.clone(),
        })
    }

    /// Statistics (0, 1), gamma 1, beta 0.
    pub fn neutral(channels: usize) -> Self {
        Self {
            gamma: Tensor::filled(vec![channels], 1.0),
            beta: Tensor::zeros(vec![channels]),
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::filled(vec![channels], 1.0),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        kernels::batch_norm_inference(
            x,
            &self.gamma,
            &self.beta,
            &self.running_mean,
            &self.running_var,
            NORM_EPS,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv3dParams {
    /// `(3, 3, 3, in, out)`
    pub kernel: Tensor,
    pub bias: Option<Tensor>,
}

impl Conv3dParams {
    pub fn load(store: &ParameterStore, name: &str) -> Result<Self> {
        Ok(Self {
            kernel: store.get(&format!("{name}.weight"))?.clone(),
            bias: Some(store.get(&format!("{name}.bias"))?.clone()),
        })
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.dims()[3]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.dims()[4]
    }

    pub fn forward(&self, x: &FeatureVolume, outputs: Option<&[bool]>) -> Result<FeatureVolume> {
        kernels::conv3d_restricted(x, &self.kernel, self.bias.as_ref(), outputs)
    }
}
