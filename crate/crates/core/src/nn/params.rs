//! Named parameter storage and the per-pass graph that binds parameters
//! onto a tape.

use std::collections::HashMap;
use std::ops::{Deref, DerefMut};

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::tape::{Tape, Var};
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameter tensors in registration order, addressable by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S> {
    names: Vec<String>,
    values: Vec<Tensor<S>>,
    by_name: HashMap<String, ParamId>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
        }
        let id = ParamId(self.values.len());
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(id)
    }

    /// Registers a tensor drawn uniformly from `[-range, range]`.
    pub fn uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        range: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| S::of(rng.gen_range(-range..=range))).collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<S>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Ids whose names start with `prefix`.
    pub fn group(&self, prefix: &str) -> Vec<ParamId> {
        self.iter().filter(|(_, n, _)| n.starts_with(prefix)).map(|(id, _, _)| id).collect()
    }

    pub fn num_values(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Overwrites every parameter with the same-named tensor from `other`.
    pub fn load_from(&mut self, other: &ParamStore<S>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::ArchMismatch(format!(
                "{} parameters, checkpoint has {}",
                self.len(),
                other.len()
            )));
        }
        for (_, name, value) in other.iter() {
            let own = self
                .id(name)
                .ok_or_else(|| Error::ArchMismatch(format!("unexpected parameter {name}")))?;
            if self.values[own.0].shape() != value.shape() {
                return Err(Error::ArchMismatch(format!(
                    "{name}: {:?} vs {:?}",
                    self.values[own.0].shape(),
                    value.shape()
                )));
            }
            self.values[own.0] = value.clone();
        }
        Ok(())
    }
}

/// Gradient accumulator parallel to a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct GradBuffer<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> GradBuffer<S> {
    pub fn new(store: &ParamStore<S>) -> Self {
        Self { grads: vec![None; store.len()] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.grads[id.0].as_ref()
    }

    pub fn add(&mut self, id: ParamId, g: &Tensor<S>) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(g),
            slot => *slot = Some(g.clone()),
        }
    }

    pub fn merge(&mut self, other: &GradBuffer<S>) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.add(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, c: S) {
        for g in self.grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn zero(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::all_finite)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<S>)> {
        self.grads.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

/// A tape plus lazily bound parameters for one forward/backward pass.
///
/// Parameters outside the trainable mask are bound as constants, so no
/// gradient can reach them.
pub struct Graph<'p, S> {
    tape: Tape<S>,
    params: &'p ParamStore<S>,
    trainable: Option<&'p [bool]>,
    record: bool,
    bound: Vec<Option<Var>>,
}

impl<'p, S: Scalar> Graph<'p, S> {
    /// Every parameter receives gradients.
    pub fn new(params: &'p ParamStore<S>) -> Self {
        Self { tape: Tape::new(), params, trainable: None, record: true, bound: vec![None; params.len()] }
    }

    /// Only parameters with `mask[id] == true` receive gradients.
    pub fn with_mask(params: &'p ParamStore<S>, mask: &'p [bool]) -> Self {
        let mut g = Self::new(params);
        g.trainable = Some(mask);
        g
    }

    /// No parameter receives gradients.
    pub fn inference(params: &'p ParamStore<S>) -> Self {
        let mut g = Self::new(params);
        g.record = false;
        g
    }

    pub fn params(&self) -> &'p ParamStore<S> {
        self.params
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let rg = self.record && self.trainable.map_or(true, |m| m[id.0]);
        let v = self.tape.leaf(self.params.get(id).clone(), rg);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.tape.constant(t)
    }

    /// Current tape length, for use with [`Graph::rewind`].
    pub fn mark(&self) -> usize {
        self.tape.len()
    }

    /// Drops nodes recorded after `mark`, unbinding parameters bound since.
    pub fn rewind(&mut self, mark: usize) {
        self.tape.truncate(mark);
        for b in self.bound.iter_mut() {
            if matches!(b, Some(v) if v.index() >= mark) {
                *b = None;
            }
        }
    }

    /// Adds the gradients of all bound parameters into `buf`.
    pub fn collect_grads(&self, buf: &mut GradBuffer<S>) {
        for (i, b) in self.bound.iter().enumerate() {
            if let Some(v) = b {
                if let Some(g) = self.tape.grad(*v) {
                    buf.add(ParamId(i), g);
                }
            }
        }
    }
}

impl<S> Deref for Graph<'_, S> {
    type Target = Tape<S>;
    fn deref(&self) -> &Tape<S> {
        &self.tape
    }
}

impl<S> DerefMut for Graph<'_, S> {
    fn deref_mut(&mut self) -> &mut Tape<S> {
        &mut self.tape
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParamStore::<f64>::new();
        ps.add("w", Tensor::zeros(&[2])).unwrap();
        assert!(ps.add("w", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn uniform_init_respects_range_and_seed() {
        let mut a = ParamStore::<f64>::new();
        let mut b = ParamStore::<f64>::new();
        let ia = a.uniform("w", &[10, 10], 0.1, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let ib = b.uniform("w", &[10, 10], 0.1, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a.get(ia), b.get(ib));
        assert!(a.get(ia).data().iter().all(|v| v.abs() <= 0.1));
    }

    #[test]
    fn masked_params_get_no_gradient() {
        let mut ps = ParamStore::<f64>::new();
        let w = ps.add("w", Tensor::row(vec![1.0, 2.0])).unwrap();
        let u = ps.add("u", Tensor::row(vec![3.0, 4.0])).unwrap();
        let mask = vec![true, false];
        let mut g = Graph::with_mask(&ps, &mask);
        let (wv, uv) = (g.param(w), g.param(u));
        let p = g.mul(wv, uv).unwrap();
        let loss = g.sum(p);
        g.backward(loss).unwrap();
        let mut buf = GradBuffer::new(&ps);
        g.collect_grads(&mut buf);
        assert_eq!(buf.get(w).unwrap().data(), &[3.0, 4.0]);
        assert!(buf.get(u).is_none());
    }

    #[test]
    fn rewind_unbinds_late_params() {
        let mut ps = ParamStore::<f64>::new();
        let w = ps.add("w", Tensor::scalar(1.0)).unwrap();
        let mut g = Graph::inference(&ps);
        let m = g.mark();
        let v = g.param(w);
        g.rewind(m);
        let v2 = g.param(w);
        assert_eq!(v, v2);
        assert_eq!(g.len(), 1);
    }
}
