use rand::Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Index of a tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Graph handles for every tensor of a [`ParamSet`], in the same order.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wraps externally created handles, in parameter order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    /// Weight matrix drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn weight<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        self.insert(
            name,
            Tensor {
                shape: vec![fan_in, fan_out],
                data,
            },
        )
    }

    pub fn zeros(&mut self, name: impl Into<String>, n: usize) -> ParamId {
        self.insert(name, Tensor::zeros(&[n]))
    }

    pub fn ones(&mut self, name: impl Into<String>, n: usize) -> ParamId {
        self.insert(name, Tensor::full(&[n], 1.0))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every tensor on `g`, trainable or frozen.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound(
            self.tensors
                .iter()
                .map(|t| {
                    if trainable {
                        g.param(t.clone())
                    } else {
                        g.constant(t.clone())
                    }
                })
                .collect(),
        )
    }

    /// Gradients for every bound tensor; unreached tensors get zeros.
    pub fn grads(&self, g: &Graph, bound: &Bound) -> Vec<Tensor> {
        bound
            .vars()
            .iter()
            .zip(&self.tensors)
            .map(|(v, t)| {
                g.grad(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect()
    }

    /// Replaces values by name; shapes and the name set must match exactly.
    pub fn load_from<'a>(
        &mut self,
        entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
        prefix: &str,
    ) -> Result<()> {
        let mut seen = 0;
        for (name, t) in entries {
            let Some(local) = name.strip_prefix(prefix) else {
                continue;
            };
            let idx = self
                .names
                .iter()
                .position(|n| n == local)
                .ok_or_else(|| Error::config(format!("unexpected parameter {name}")))?;
            if self.tensors[idx].shape() != t.shape() {
                return Err(Error::config(format!(
                    "parameter {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    self.tensors[idx].shape()
                )));
            }
            self.tensors[idx] = t.clone();
            seen += 1;
        }
        if seen != self.tensors.len() {
            return Err(Error::config(format!(
                "checkpoint holds {seen} of {} parameters under '{prefix}'",
                self.tensors.len()
            )));
        }
        Ok(())
    }
}
