//! Named parameter registry shared by every layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Populated by `Tape::backward`; same shape as `value`.
    pub grad: Option<Tensor<T>>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Param { name: name.into(), value, grad: None });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[T]) {
        let p = &mut self.params[id.0];
        match &mut p.grad {
            Some(acc) => {
                for (a, &v) in acc.data_mut().iter_mut().zip(g) {
                    *a += v;
                }
            }
            None => {
                p.grad =
                    Some(Tensor::new(p.value.shape().to_vec(), g.to_vec()).expect("gradient matches parameter shape"))
            }
        }
    }

    /// Replace values from another store with identical layout.
    pub fn load_values(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Format(format!("parameter count {} does not match {}", other.len(), self.len())));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Format(format!(
                    "parameter `{}` {:?} does not match `{}` {:?}",
                    src.name,
                    src.value.shape(),
                    dst.name,
                    dst.value.shape()
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }

    /// Add N(0, std²) noise to every parameter. Used to move blocks away from
    /// their identity initialization before gradient checks.
    pub fn perturb(&mut self, seed: u64, std: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).expect("finite std");
        for p in &mut self.params {
            for v in p.value.data_mut() {
                *v += T::c(normal.sample(&mut rng));
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), value: p.value.cast(), grad: p.grad.as_ref().map(Tensor::cast) })
                .collect(),
        }
    }
}

/// Deterministic initializers. Values are drawn in f64 and cast so that f32
/// and f64 networks built from one seed agree up to rounding.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn uniform<T: Scalar>(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        Tensor::from_fn(shape.to_vec(), |_| T::c(self.rng.random_range(-bound..=bound)))
    }

    /// Variance-preserving uniform: `Var = 1/fan_in`.
    pub fn fan_in<T: Scalar>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        self.uniform(shape, (3.0 / fan_in.max(1) as f64).sqrt())
    }

    pub fn unit(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        Normal::new(0.0, 1.0).expect("unit normal").sample(&mut self.rng)
    }
}
