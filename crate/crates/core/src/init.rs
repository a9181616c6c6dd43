//! Parameter initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{ParamId, ParamKind, ParamStore, Tensor};

/// Standard deviation for transformer projections and embeddings.
pub const PROJ_STD: f64 = 0.02;

/// Seeded source of initial parameter values, registering straight into a store.
pub struct Initializer<'s, T> {
    pub store: &'s mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<'s, T: Scalar> Initializer<'s, T> {
    pub fn new(store: &'s mut ParamStore<T>, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Normal(0, std) truncated to ±2 std by resampling.
    pub fn trunc_normal(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break T::from_f64_lossy(z * std);
            }
        })
    }

    pub fn weight(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        let v = self.trunc_normal(shape, PROJ_STD);
        self.store.register(name, ParamKind::Weight, v)
    }

    /// He-normal conv kernel `[cout, cin/g, k, k]`, fan-in scaled.
    pub fn conv(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        let fan_in: usize = shape[1..].iter().product();
        let v = self.trunc_normal(shape, (2.0 / fan_in as f64).sqrt());
        self.store.register(name, ParamKind::Weight, v)
    }

    pub fn embedding(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        let v = self.trunc_normal(shape, PROJ_STD);
        self.store.register(name, ParamKind::NoDecay, v)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.store.register(name, ParamKind::NoDecay, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.store.register(name, ParamKind::NoDecay, Tensor::ones(shape))
    }

    pub fn buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        self.store.register(name, ParamKind::Buffer, value)
    }
}
