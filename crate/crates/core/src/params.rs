//! Named parameter storage and initialisation.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU32, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a parameter. Carries the tag of its owning store so that
/// parameters of several stores can share one graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    store: u32,
    index: u32,
}

impl ParamId {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

static NEXT_TAG: AtomicU32 = AtomicU32::new(1);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Ordered collection of named parameter tensors. Insertion order is the
/// checkpoint manifest order.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    tag: u32,
    params: Vec<Param<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: PartialEq> PartialEq for ParamStore<T> {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tag: NEXT_TAG.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::config("unique-parameter-names", format!("duplicate parameter '{name}'")));
        }
        let id = ParamId {
            store: self.tag,
            index: self.params.len() as u32,
        };
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value });
        Ok(id)
    }

    fn slot(&self, id: ParamId) -> usize {
        assert_eq!(id.store, self.tag, "parameter id from a different store");
        id.index()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[self.slot(id)].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        let i = self.slot(id);
        &mut self.params[i].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[self.slot(id)].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    fn id_at(&self, i: usize) -> ParamId {
        ParamId {
            store: self.tag,
            index: i as u32,
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(|i| self.id_at(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (self.id_at(i), p))
    }

    pub fn zero_grads(&self) -> GradStore<T> {
        GradStore {
            tag: self.tag,
            grads: self
                .params
                .iter()
                .map(|p| vec![T::zero(); p.value.numel()])
                .collect(),
        }
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradStore<T> {
    tag: u32,
    grads: Vec<Vec<T>>,
}

impl<T: Scalar> GradStore<T> {
    /// Whether `id` belongs to the store these buffers were made for.
    pub fn owns(&self, id: ParamId) -> bool {
        id.store == self.tag
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        assert!(self.owns(id), "parameter id from a different store");
        &self.grads[id.index()]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        assert!(self.owns(id), "parameter id from a different store");
        &mut self.grads[id.index()]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    /// Adds `other` into `self`, element by element.
    pub fn add_assign(&mut self, other: &GradStore<T>) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn max_abs(&self, id: ParamId) -> T {
        self.get(id).iter().fold(T::zero(), |m, x| m.max(x.abs()))
    }
}

/// Seeded parameter initialiser. Draws are made in `f64` and rounded, so the
/// same seed yields the same values (up to rounding) at either precision.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Xavier/Glorot uniform for an `out × in` matrix (vectors are treated as `1 × n`).
    pub fn xavier<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        let (fan_out, fan_in) = match shape {
            [n] => (1, *n),
            [o, i] => (*o, *i),
            _ => panic!("xavier init expects a vector or matrix, got {shape:?}"),
        };
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(shape, limit)
    }

    /// Fan-in scaled uniform for `out × in × k` convolution kernels (variance `1/fan_in`).
    pub fn conv<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        let fan_in: usize = shape[1..].iter().product();
        let limit = (3.0 / fan_in as f64).sqrt();
        self.uniform(shape, limit)
    }

    pub fn uniform<T: Scalar>(&mut self, shape: &[usize], limit: f64) -> Tensor<T> {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| T::c(rng.gen_range(-limit..=limit)))
    }

    pub fn normal<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("std must be positive");
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| T::c(dist.sample(rng)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_ordered() {
        let mut s = ParamStore::<f64>::new();
        let a = s.add("a", Tensor::zeros(&[2])).unwrap();
        let b = s.add("b", Tensor::zeros(&[3, 2])).unwrap();
        assert_eq!(s.add("a", Tensor::zeros(&[1])).unwrap_err().constraint(), Some("unique-parameter-names"));
        assert_eq!(s.ids().collect::<Vec<_>>(), vec![a, b]);
        assert_eq!(s.id("b"), Some(b));
        assert_eq!(s.name(a), "a");
        assert_eq!(s.total_numel(), 8);
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn stores_have_distinct_tags() {
        let mut s1 = ParamStore::<f64>::new();
        let mut s2 = ParamStore::<f64>::new();
        let a = s1.add("w", Tensor::zeros(&[1])).unwrap();
        let b = s2.add("w", Tensor::zeros(&[1])).unwrap();
        assert_ne!(a, b);
        assert_eq!(a.index(), b.index());
        let g = s1.zero_grads();
        assert!(g.owns(a) && !g.owns(b));
        // Clones keep the tag so ids stay valid in the copy.
        assert_eq!(s1.clone().get(a).numel(), 1);
    }

    #[test]
    fn grad_store_arithmetic() {
        let mut s = ParamStore::<f64>::new();
        let a = s.add("a", Tensor::zeros(&[2])).unwrap();
        let mut g = s.zero_grads();
        g.get_mut(a).copy_from_slice(&[1.0, -3.0]);
        let mut h = s.zero_grads();
        h.add_assign(&g);
        h.add_assign(&g);
        assert_eq!(h.get(a), &[2.0, -6.0]);
        assert_eq!(h.max_abs(a), 6.0);
        h.zero();
        assert_eq!(h.get(a), &[0.0, 0.0]);
    }

    #[test]
    fn initializer_is_seeded_and_bounded() {
        let a: Tensor<f64> = Initializer::new(5).xavier(&[4, 6]);
        let b: Tensor<f64> = Initializer::new(5).xavier(&[4, 6]);
        let c: Tensor<f64> = Initializer::new(6).xavier(&[4, 6]);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.max_abs() <= (6.0f64 / 10.0).sqrt());
        let lo: Tensor<f32> = Initializer::new(5).xavier(&[4, 6]);
        for (x, y) in lo.data().iter().zip(a.data()) {
            assert_eq!(*x, *y as f32);
        }
        let n: Tensor<f64> = Initializer::new(7).normal(&[20000], 0.02);
        let var = n.data().iter().map(|x| x * x).sum::<f64>() / 20000.0;
        assert!((var.sqrt() - 0.02).abs() < 0.001);
    }
}
