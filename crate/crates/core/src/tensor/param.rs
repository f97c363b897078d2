use std::collections::HashMap;

use super::{Real, Tensor};
use crate::error::{DvpError, Result};
use crate::rng::Rng;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable tensor with an optional exponential-moving-average shadow.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub ema: Option<Tensor<T>>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(DvpError::usage(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor,
            ema: None,
        });
        Ok(id)
    }

    /// Gaussian init with standard deviation `gain / sqrt(fan_in)`.
    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        gain: f64,
        rng: &mut Rng,
    ) -> Result<ParamId> {
        let std = gain / (fan_in.max(1) as f64).sqrt();
        let t = rng.normal_tensor::<T>(shape).map(|v| v * T::from_f64(std));
        self.add(name, t)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Start EMA shadows as copies of the current values.
    pub fn init_ema(&mut self) {
        for p in &mut self.params {
            p.ema = Some(p.tensor.clone());
        }
    }

    /// A store whose live values are the EMA shadows (or the values where
    /// no shadow exists).
    pub fn ema_view(&self) -> Self {
        let mut out = self.clone();
        for p in &mut out.params {
            if let Some(e) = p.ema.take() {
                p.tensor = e;
            }
        }
        out
    }

    /// Replace the value of `name`, checking its shape.
    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| DvpError::usage(format!("unknown parameter {name}")))?;
        let p = &mut self.params[id.0];
        if p.tensor.shape() != tensor.shape() {
            return Err(DvpError::dim(
                "param set",
                format!("{name}: {:?} vs {:?}", p.tensor.shape(), tensor.shape()),
            ));
        }
        p.tensor = tensor;
        Ok(())
    }
}

/// Gradients aligned with the parameters of a store; unused parameters get zeros.
#[derive(Clone, Debug)]
pub struct ParamGrads<T> {
    pub grads: Vec<Tensor<T>>,
}

impl<T: Real> ParamGrads<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self {
            grads: store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.tensor.shape()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(|g| g.all_finite())
    }
}
