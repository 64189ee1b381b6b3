use std::collections::BTreeMap;

use rand::Rng as _;

use super::{Graph, NormUpdate, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NormId(pub(crate) usize);

/// Running statistics of a batch-normalization layer.
#[derive(Debug, Clone)]
pub struct NormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub initialized: bool,
}

impl<T: Scalar> NormState<T> {
    /// Zero mean, unit variance; usable in eval mode immediately.
    pub fn standard(channels: usize) -> Self {
        NormState { running_mean: vec![T::zero(); channels], running_var: vec![T::one(); channels], initialized: true }
    }

    /// No statistics yet: eval mode refuses to run until a training pass fills them.
    pub fn uninitialized(channels: usize) -> Self {
        NormState { initialized: false, ..Self::standard(channels) }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn absorb(&mut self, update: &NormUpdate<T>) {
        let m = T::of(BN_MOMENTUM);
        let keep = T::one() - m;
        if !self.initialized {
            self.running_mean.copy_from_slice(&update.batch_mean);
            self.running_var.copy_from_slice(&update.batch_var);
            self.initialized = true;
            return;
        }
        for (r, &b) in self.running_mean.iter_mut().zip(&update.batch_mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(&update.batch_var) {
            *r = keep * *r + m * b;
        }
    }
}

#[derive(Debug, Clone)]
struct Param<T: Scalar> {
    name: String,
    tensor: Tensor<T>,
}

/// Named trainable tensors plus named normalization statistics.
#[derive(Debug, Clone)]
pub struct ParamStore<T: Scalar> {
    params: Vec<Param<T>>,
    norms: Vec<(String, NormState<T>)>,
    by_name: BTreeMap<String, ParamId>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), norms: Vec::new(), by_name: BTreeMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, tensor: tensor.with_requires_grad(true) });
        id
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape.to_vec()))
    }

    pub fn add_full(&mut self, name: impl Into<String>, shape: &[usize], v: f64) -> ParamId {
        self.add(name, Tensor::full(shape.to_vec(), T::of(v)))
    }

    /// Uniform(-bound, bound) initialization with bound = sqrt(6 / (fan_in + fan_out)).
    pub fn add_xavier(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut Rng) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
        self.add(name, Tensor::new(shape.to_vec(), data).expect("shape"))
    }

    /// Normal(0, std) initialization via Box-Muller.
    pub fn add_normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut Rng) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = rng.gen();
                T::of(std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos())
            })
            .collect();
        self.add(name, Tensor::new(shape.to_vec(), data).expect("shape"))
    }

    pub fn add_norm(&mut self, name: impl Into<String>, state: NormState<T>) -> NormId {
        let id = NormId(self.norms.len());
        self.norms.push((name.into(), state));
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn norm(&self, id: NormId) -> &NormState<T> {
        &self.norms[id.0].1
    }

    pub fn norm_mut(&mut self, id: NormId) -> &mut NormState<T> {
        &mut self.norms[id.0].1
    }

    pub fn norms(&self) -> impl Iterator<Item = (&str, &NormState<T>)> {
        self.norms.iter().map(|(n, s)| (n.as_str(), s))
    }

    pub fn norm_id(&self, name: &str) -> Option<NormId> {
        self.norms.iter().position(|(n, _)| n == name).map(NormId)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Adds the gradients a graph computed for bound parameters into the store.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>) {
        for (id, g) in graph.param_grads() {
            let dst = self.params[id.0].tensor.grad_mut();
            for (d, &s) in dst.iter_mut().zip(g) {
                *d = *d + s;
            }
        }
    }

    /// Folds the batch statistics recorded during a training forward pass
    /// into the running statistics, in recording order.
    pub fn apply_norm_updates(&mut self, graph: &Graph<T>) {
        for up in graph.norm_updates() {
            if let Some(id) = up.slot {
                self.norms[id.0].1.absorb(up);
            }
        }
    }

    /// Replaces a parameter's values, checking the shape.
    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name:?}")))?;
        let cur = &mut self.params[id.0].tensor;
        if cur.shape() != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name:?}: checkpoint shape {:?} does not match model shape {:?}",
                tensor.shape(),
                cur.shape()
            )));
        }
        *cur = tensor.with_requires_grad(true);
        Ok(())
    }

    /// Copies every parameter and norm state into another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|p| Param { name: p.name.clone(), tensor: p.tensor.cast() }).collect(),
            norms: self
                .norms
                .iter()
                .map(|(n, s)| {
                    (
                        n.clone(),
                        NormState {
                            running_mean: s.running_mean.iter().map(|x| U::of(x.as_f64())).collect(),
                            running_var: s.running_var.iter().map(|x| U::of(x.as_f64())).collect(),
                            initialized: s.initialized,
                        },
                    )
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}
