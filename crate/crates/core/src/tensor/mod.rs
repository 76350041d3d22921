//! Dense tensors, named parameter sets, a reverse-mode tape, and the
//! optimizers and initializers used by the training recipes.

mod graph;
mod init;
mod optim;

use std::collections::HashMap;

pub use graph::{Graph, NodeId};
pub use init::{dropout, dropout_mask, init_uniform, init_xavier, xavier_bound, Rng, RngSeed};
pub use optim::{clip_global_norm, AdamConfig, AdamState};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major n-dimensional array with an optional gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::contract(format!("invalid tensor shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::contract(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor::new(shape, vec![T::zero(); numel]).expect("zeros: valid shape")
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor::new(shape, (0..numel).map(&mut f).collect()).expect("from_fn: valid shape")
    }

    pub fn scalar(value: T) -> Self {
        Tensor::new([1], vec![value]).expect("scalar shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [T]> {
        self.grad.as_deref_mut()
    }

    /// Mutable access to values and gradient at the same time.
    pub fn data_and_grad_mut(&mut self) -> (&mut [T], Option<&mut [T]>) {
        (&mut self.data, self.grad.as_deref_mut())
    }

    /// Resets the gradient slot to zeros (allocating it if absent).
    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|x| *x = T::zero()),
            None => self.grad = Some(vec![T::zero(); self.data.len()]),
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the gradient slot.
    pub fn accumulate_grad(&mut self, delta: &[T]) {
        assert_eq!(delta.len(), self.data.len(), "gradient length mismatch");
        let g = self.grad.get_or_insert_with(|| vec![T::zero(); delta.len()]);
        for (a, &b) in g.iter_mut().zip(delta) {
            *a += b;
        }
    }

    /// Rows of the 2-D view: leading dimension, or 1 for vectors.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[0]
        }
    }

    /// Columns of the 2-D view: product of all trailing dimensions.
    pub fn cols(&self) -> usize {
        self.numel() / self.rows()
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Converts element type; the gradient slot is dropped.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of(x.as_f64())).collect(),
            grad: None,
        }
    }
}

/// Handle to a tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameters (dotted names such as
/// `encoder.char_emb`).
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter `{name}`")));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.tensors.iter_mut()
    }

    /// Replaces the values of an existing parameter; the shape must match.
    pub fn assign(&mut self, name: &str, values: &Tensor<T>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?;
        let dst = self.get_mut(id);
        if dst.shape() != values.shape() {
            return Err(Error::contract(format!(
                "`{name}`: shape {:?} does not match {:?}",
                values.shape(),
                dst.shape()
            )));
        }
        dst.data_mut().copy_from_slice(values.data());
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn clear_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::clear_grad);
    }

    /// Adds gradients produced by [`Graph::backward`] into the grad slots.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (tensor, slot) in self.tensors.iter_mut().zip(&grads.slots) {
            if let Some(g) = slot {
                tensor.accumulate_grad(g);
            }
        }
    }

    /// Global L2 gradient clipping over every parameter with a gradient.
    pub fn clip_grad_norm(&mut self, max_norm: T) -> T {
        let mut grads: Vec<&mut [T]> = self.tensors.iter_mut().filter_map(Tensor::grad_mut).collect();
        clip_global_norm(&mut grads, max_norm)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// Parameter gradients collected by one backward pass, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    slots: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub(crate) fn with_len(n: usize) -> Self {
        Gradients {
            slots: vec![None; n],
        }
    }

    pub(crate) fn add(&mut self, id: usize, delta: &[T]) {
        match &mut self.slots[id] {
            Some(g) => g.iter_mut().zip(delta).for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(delta.to_vec()),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.slots.get(id.0).and_then(|s| s.as_deref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::new([2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new([0], vec![]).is_err());
        let t = Tensor::<f32>::new([2, 3], vec![0.0; 6]).unwrap();
        assert_eq!((t.rows(), t.cols()), (2, 3));
        let v = Tensor::<f32>::zeros([4]);
        assert_eq!((v.rows(), v.cols()), (1, 4));
        let c = Tensor::<f32>::zeros([5, 2, 3]);
        assert_eq!((c.rows(), c.cols()), (5, 6));
    }

    #[test]
    fn grads_accumulate_until_cleared() {
        let mut t = Tensor::<f64>::zeros([2]);
        t.accumulate_grad(&[1.0, 2.0]);
        t.accumulate_grad(&[1.0, 2.0]);
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0, 0.0]);
        t.clear_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParamSet::<f32>::new();
        ps.insert("a.b", Tensor::zeros([1])).unwrap();
        assert!(ps.insert("a.b", Tensor::zeros([1])).is_err());
        assert_eq!(ps.id("a.b"), Some(ParamId(0)));
    }
}
