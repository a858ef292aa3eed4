//! Named parameter registry and gradient maps.
//!
//! All trainable tensors of a model live in one flat [`ParamSet`]; modules
//! hold typed [`ParamId`] handles into it. The flat layout gives a fixed
//! deterministic order for optimizer updates, checkpoint serialization, and
//! finite-difference sweeps.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng;

/// Handle to one parameter tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamSet<S> {
    names: Vec<String>,
    values: Vec<Tensor<S>>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Weight matrix initialized from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn add_weight<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (rows as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| S::of(rng.gen_range(-bound..bound)))
            .collect();
        self.add(name, Tensor::new(vec![rows, cols], data).unwrap())
    }

    /// Zero-initialized bias vector.
    pub fn add_bias(&mut self, name: impl Into<String>, len: usize) -> ParamId {
        self.add(name, Tensor::zeros(vec![len]))
    }

    /// Constant-filled vector (used for layer-norm gains).
    pub fn add_filled(&mut self, name: impl Into<String>, len: usize, v: f64) -> ParamId {
        self.add(
            name,
            Tensor::new(vec![len], vec![S::of(v); len]).expect("filled tensor"),
        )
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

    pub fn set(&mut self, id: ParamId, value: Tensor<S>) {
        assert_eq!(
            self.values[id.0].shape(),
            value.shape(),
            "parameter shape is fixed after creation"
        );
        self.values[id.0] = value;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<S>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn total_numel(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }

    /// Mutable access for optimizer updates and finite-difference probes.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.values[id.0]
    }
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Accumulated gradients, one tensor per parameter, same order as the
/// [`ParamSet`] the backward pass was run against. Parameters that did not
/// participate in the forward pass hold zeros.
#[derive(Clone, Debug)]
pub struct GradientMap<S> {
    grads: Vec<Tensor<S>>,
}

impl<S: Scalar> GradientMap<S> {
    pub(crate) fn from_vec(grads: Vec<Tensor<S>>) -> Self {
        GradientMap { grads }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor<S>> {
        self.grads.iter()
    }

    /// Checks the shape contract against a parameter set.
    pub fn validate_shapes(&self, params: &ParamSet<S>) -> Result<()> {
        if self.grads.len() != params.len() {
            return Err(Error::Invariant(format!(
                "gradient map holds {} entries for {} parameters",
                self.grads.len(),
                params.len()
            )));
        }
        for (i, g) in self.grads.iter().enumerate() {
            if g.shape() != params.get(ParamId(i)).shape() {
                return Err(Error::Invariant(format!(
                    "gradient shape {:?} != parameter shape {:?} for {}",
                    g.shape(),
                    params.get(ParamId(i)).shape(),
                    params.name(ParamId(i))
                )));
            }
        }
        Ok(())
    }
}
