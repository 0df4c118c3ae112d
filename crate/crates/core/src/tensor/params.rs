use indexmap::IndexMap;
use rand::Rng;

use super::{Gradients, Graph, Result, Tensor, TensorError, Var};
use crate::scalar::Scalar;

/// A named learnable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Insertion-ordered collection of uniquely named parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    entries: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ModelParams<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ModelParams<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    /// Replaces the value of an existing parameter, keeping its position.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self
            .entries
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "set_param",
                left: slot.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn into_params(self) -> Vec<ParamTensor<T>> {
        self.entries
            .into_iter()
            .map(|(name, value)| ParamTensor { name, value })
            .collect()
    }

    pub fn total_len(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Zero-filled parameter of the given shape.
    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn add_full(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> Result<()> {
        self.insert(name, Tensor::full(shape, T::lit(value)))
    }

    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` initialisation.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::lit(rng.gen_range(-bound..bound)))
            .collect();
        self.insert(name, Tensor::new(shape, data)?)
    }

    /// Sets every entry to zero.
    pub fn zero_all(&mut self) {
        for v in self.entries.values_mut() {
            v.data_mut().iter_mut().for_each(|x| *x = T::zero());
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Registers every parameter as a leaf of `graph`.
    pub fn bind<'g>(&self, graph: &'g Graph<T>, trainable: bool) -> BoundParams<'g, T> {
        let vars = self
            .entries
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    graph.param(v.clone())
                } else {
                    graph.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        BoundParams { vars }
    }
}

/// Parameters registered on a graph, looked up by name.
pub struct BoundParams<'g, T: Scalar> {
    vars: IndexMap<String, Var<'g, T>>,
}

impl<'g, T: Scalar> BoundParams<'g, T> {
    pub fn get(&self, name: &str) -> Result<Var<'g, T>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'g, T>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradients keyed by parameter name, in f64.
    pub fn collect_grads(&self, grads: &Gradients<T>) -> IndexMap<String, Vec<f64>> {
        self.vars
            .iter()
            .map(|(k, v)| {
                (
                    k.clone(),
                    grads.get_f64(*v).unwrap_or_else(|| vec![0.0; v.numel()]),
                )
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ModelParams::<f32>::new();
        p.add_zeros("a", &[2]).unwrap();
        assert_eq!(
            p.add_zeros("a", &[3]),
            Err(TensorError::DuplicateParam("a".into()))
        );
    }

    #[test]
    fn set_checks_shape() {
        let mut p = ModelParams::<f64>::new();
        p.add_zeros("w", &[2, 2]).unwrap();
        assert!(p.set("w", Tensor::zeros(&[4])).is_err());
        assert!(p.set("missing", Tensor::zeros(&[4])).is_err());
        p.set("w", Tensor::full(&[2, 2], 1.0)).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.0; 4]);
    }
}
