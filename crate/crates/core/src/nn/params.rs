//! Named parameter tensors generated from a run seed.

use indexmap::IndexMap;

use super::rng::SplitMix64;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// How a registered parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// i.i.d. uniform on `[-a, a]`, `a = 1 / sqrt(fan_in)`.
    Uniform { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub init: Init,
}

/// Ordered list of parameter names and shapes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Registry {
    specs: Vec<ParamSpec>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn add(&mut self, name: impl Into<String>, dims: Vec<usize>, init: Init) -> &mut Self {
        self.specs.push(ParamSpec {
            name: name.into(),
            dims,
            init,
        });
        self
    }

    /// `{name}.weight` of shape `(din, dout)` and, optionally, `{name}.bias`.
    pub fn linear(&mut self, name: &str, din: usize, dout: usize, bias: bool) -> &mut Self {
        let init = Init::Uniform { fan_in: din };
        self.add(format!("{name}.weight"), vec![din, dout], init);
        if bias {
            self.add(format!("{name}.bias"), vec![dout], init);
        }
        self
    }

    pub fn layer_norm(&mut self, name: &str, channels: usize) -> &mut Self {
        self.add(format!("{name}.gamma"), vec![channels], Init::Ones);
        self.add(format!("{name}.beta"), vec![channels], Init::Zeros)
    }

    pub fn batch_norm(&mut self, name: &str, channels: usize) -> &mut Self {
        self.add(format!("{name}.gamma"), vec![channels], Init::Ones);
        self.add(format!("{name}.beta"), vec![channels], Init::Zeros);
        self.add(format!("{name}.running_mean"), vec![channels], Init::Zeros);
        self.add(format!("{name}.running_var"), vec![channels], Init::Ones)
    }

    pub fn conv3d(&mut self, name: &str, cin: usize, cout: usize) -> &mut Self {
        let init = Init::Uniform { fan_in: 27 * cin };
        self.add(format!("{name}.weight"), vec![3, 3, 3, cin, cout], init);
        self.add(format!("{name}.bias"), vec![cout], init)
    }
}

/// Default fan-in: product of every extent but the last; a vector's own
/// length for rank 1.
pub fn default_fan_in(dims: &[usize]) -> usize {
    match dims.len() {
        0 => 1,
        1 => dims[0],
        n => dims[..n - 1].iter().product(),
    }
    .max(1)
}

/// Seeded uniform tensor with the default fan-in rule.
pub fn seeded_init(seed: u64, name: &str, dims: &[usize]) -> Tensor {
    seeded_uniform(seed, name, dims, default_fan_in(dims))
}

/// Values uniform on `[-a, a]`, `a = 1/sqrt(fan_in)`, drawn in row-major
/// order from SplitMix64 keyed by `seed ^ fnv1a(name)`.
pub fn seeded_uniform(seed: u64, name: &str, dims: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let mut rng = SplitMix64::keyed(seed, name);
    let len: usize = dims.iter().product();
    let data = (0..len)
        .map(|_| (bound * (2.0 * rng.next_f64() - 1.0)) as f32)
        .collect();
    Tensor::new(dims.to_vec(), data).expect("length matches dims")
}

/// Named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore {
    seed: u64,
    params: IndexMap<String, Tensor>,
}

impl ParameterStore {
    pub fn empty(seed: u64) -> Self {
        Self {
            seed,
            params: IndexMap::new(),
        }
    }

    /// Materializes every registry entry in registry order.
    pub fn build(seed: u64, registry: &Registry) -> Self {
        let mut store = Self::empty(seed);
        for spec in registry.specs() {
            let tensor = match spec.init {
                Init::Uniform { fan_in } => seeded_uniform(seed, &spec.name, &spec.dims, fan_in),
                Init::Zeros => Tensor::zeros(spec.dims.clone()),
                Init::Ones => Tensor::filled(spec.dims.clone(), 1.0),
            };
            store.params.insert(spec.name.clone(), tensor);
        }
        store
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))
    }

    /// Inserts or replaces a tensor; replaced entries keep their position.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.params.insert(name.into(), tensor)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Checks that every registry entry is present with the registered shape.
    pub fn check(&self, registry: &Registry) -> Result<()> {
        for spec in registry.specs() {
            let t = self.get(&spec.name)?;
            if t.dims() != spec.dims.as_slice() {
                return Err(Error::shape(format!(
                    "parameter `{}` has dims {:?}, registry expects {:?}",
                    spec.name,
                    t.dims(),
                    spec.dims
                )));
            }
        }
        Ok(())
    }
}
