use crate::graph::Gradients;
use crate::{NnError, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A named parameter with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct ParamTensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

/// Ordered collection of parameters. Order is the checkpoint order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<ParamTensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], value: Vec<T>) -> ParamId {
        let n: usize = shape.iter().product();
        assert_eq!(n, value.len(), "parameter value length must match its shape");
        self.params.push(ParamTensor {
            name: name.into(),
            shape: shape.to_vec(),
            grad: vec![T::zero(); n],
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &[T] {
        &self.params[id.0].value
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.params[id.0].shape
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds the parameter gradients recorded by a backward pass.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (i, p) in self.params.iter_mut().enumerate() {
            if let Some(g) = grads.param(ParamId(i)) {
                for (acc, &v) in p.grad.iter_mut().zip(g) {
                    *acc += v;
                }
            }
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for p in &self.params {
            if !p.value.iter().all(|v| v.is_finite()) {
                return Err(NnError::NonFiniteParameter(p.name.clone()));
            }
        }
        Ok(())
    }

    /// Copies every parameter into another element type.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| ParamTensor {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    value: p.value.iter().map(|v| U::of(v.f64())).collect(),
                    grad: vec![U::zero(); p.value.len()],
                })
                .collect(),
        }
    }

    /// Flat view over all parameter values in store order.
    pub fn flat_values(&self) -> Vec<T> {
        self.params.iter().flat_map(|p| p.value.iter().copied()).collect()
    }

    /// Writes a single scalar addressed by its flat index.
    pub fn set_flat(&mut self, mut index: usize, v: T) {
        for p in &mut self.params {
            if index < p.value.len() {
                p.value[index] = v;
                return;
            }
            index -= p.value.len();
        }
        panic!("flat parameter index out of range");
    }
}
