use std::collections::HashMap;

use super::{Real, Tensor};
use crate::{LumError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Named parameters in insertion order, with Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
    first_moment: Vec<Tensor<T>>,
    second_moment: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Real> Default for ParameterStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            step: 0,
        }
    }

    /// Registers a parameter; names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(LumError::InvalidInput(format!(
                "duplicate parameter name `{name}`"
            )));
        }
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.first_moment.push(Tensor::zeros(value.shape()));
        self.second_moment.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
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

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. Missing gradients count as zero.
    pub fn adam_step(&mut self, grads: &ParamGrads<T>, cfg: &AdamConfig) -> Result<()> {
        if grads.len() != self.len() {
            return Err(LumError::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.shape() != self.values[i].shape() {
                    return Err(LumError::Shape(format!(
                        "gradient {:?} for parameter `{}` {:?}",
                        g.shape(),
                        self.names[i],
                        self.values[i].shape()
                    )));
                }
                if !g.all_finite() {
                    return Err(LumError::NonFiniteGradient(self.names[i].clone()));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::lit(cfg.beta1);
        let b2 = T::lit(cfg.beta2);
        let lr = T::lit(cfg.lr);
        let eps = T::lit(cfg.eps);
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            let p = self.values[i].data_mut();
            for j in 0..p.len() {
                let gj = g.as_ref().map_or(T::zero(), |g| g.data()[j]);
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Copy of the parameter values in another precision, without optimizer state.
    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        let mut out = ParameterStore::new();
        for (_, name, value) in self.iter() {
            out.add(name, value.cast()).expect("unique names");
        }
        out
    }
}

/// Gradients aligned with a [`ParameterStore`] by index.
pub type ParamGrads<T> = Vec<Option<Tensor<T>>>;
