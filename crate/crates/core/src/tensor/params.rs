use std::collections::HashMap;

use rand::Rng;

use super::{numel, shape_err, Grads, Graph, Shape, Tensor, TensorError, Var};
use crate::scalar::Scalar;

/// Named tensors in registration order: trainable parameters plus
/// non-trainable buffers such as running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    trainable: Vec<bool>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            trainable: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a tensor and returns its slot. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        self.insert(name.into(), t, true)
    }

    /// Registers a tensor that is stored and loaded with the parameters but
    /// never trained.
    pub fn add_buffer(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        self.insert(name.into(), t, false)
    }

    fn insert(&mut self, name: String, t: Tensor<T>, trainable: bool) -> usize {
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        self.trainable.push(trainable);
        self.names.len() - 1
    }

    /// Conv weight `[cout, cin, k, k]` drawn Kaiming-uniform over the fan-in.
    pub fn add_conv_weight(
        &mut self,
        name: impl Into<String>,
        shape: Shape,
        rng: &mut impl Rng,
    ) -> usize {
        let fan_in = (shape[1] * shape[2] * shape[3]).max(1) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let data = (0..numel(&shape))
            .map(|_| T::of(rng.random_range(-bound..bound)))
            .collect();
        self.add(name, Tensor { shape, data })
    }

    /// Adds uniform noise in `[-amplitude, amplitude)` to every entry. Moves
    /// a freshly initialised network (zero shifts, exact-zero activations)
    /// off ReLU kinks before finite-difference checks.
    pub fn jitter(&mut self, amplitude: f64, rng: &mut impl Rng) {
        for (t, _) in self
            .tensors
            .iter_mut()
            .zip(&self.trainable)
            .filter(|(_, tr)| **tr)
        {
            for v in &mut t.data {
                *v = T::of(v.widen() + rng.random_range(-amplitude..amplitude));
            }
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Scalar entries of the trainable tensors only.
    pub fn trainable_numel(&self) -> usize {
        self.tensors
            .iter()
            .zip(&self.trainable)
            .filter(|(_, tr)| **tr)
            .map(|(t, _)| t.numel())
            .sum()
    }

    pub fn is_trainable(&self, slot: usize) -> bool {
        self.trainable[slot]
    }

    pub fn trainable_mask(&self) -> &[bool] {
        &self.trainable
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.slot(name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Places every tensor on `g` in slot order: parameters as trainable
    /// leaves, buffers as constants.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.tensors
            .iter()
            .zip(&self.trainable)
            .map(|(t, &tr)| {
                if tr {
                    g.param(t.clone())
                } else {
                    g.input(t.clone())
                }
            })
            .collect()
    }

    /// Places every parameter on `g` as a constant, for inference.
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.tensors.iter().map(|t| g.input(t.clone())).collect()
    }

    /// Gradients for the bound leaves, zero-filled where none arrived.
    pub fn gather_grads(&self, grads: &Grads, vars: &[Var]) -> Vec<Vec<f64>> {
        self.tensors
            .iter()
            .zip(vars)
            .map(|(t, &v)| {
                grads
                    .get(v)
                    .map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)
            })
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            trainable: self.trainable.clone(),
            index: self.index.clone(),
        }
    }

    /// Overwrites values from `other`, which must hold the same names and
    /// shapes.
    pub fn assign<U: Scalar>(&mut self, other: &ParamStore<U>) -> Result<(), TensorError> {
        for (name, src) in other.iter() {
            let slot = self
                .slot(name)
                .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
            let dst = &mut self.tensors[slot];
            if dst.shape != src.shape {
                return Err(shape_err(
                    "assign",
                    format!("{name}: {:?} vs {:?}", dst.shape, src.shape),
                ));
            }
            *dst = src.cast();
        }
        if other.len() != self.len() {
            let missing = self
                .names
                .iter()
                .find(|n| other.slot(n).is_none())
                .cloned()
                .unwrap_or_default();
            return Err(TensorError::UnknownParam(missing));
        }
        Ok(())
    }
}
