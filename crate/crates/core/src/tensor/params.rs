use std::collections::HashMap;
use std::ops::Index;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

use super::tape::{Gradients, Tape, Var};
use super::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
}

/// Initial value distribution for a new parameter.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Const(f64),
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
    Normal(f64),
}

/// Named parameter collection of one model. Names are path-like
/// (`dpn/0/block_a/conv/w`) and unique within the store.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid("param", format!("duplicate name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        let grad = vec![0.0; value.numel()];
        self.params.push(Parameter { name, value, grad });
        Ok(id)
    }

    pub fn add_init<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Const(v) => vec![v; n],
            Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).map_err(|e| Error::invalid("param", e.to_string()))?;
                (0..n).map(|_| dist.sample(rng)).collect()
            }
        };
        self.add(name, Tensor::new(shape, data)?)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn names(&self) -> Vec<&str> {
        self.params.iter().map(|p| p.name.as_str()).collect()
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape(
                "param",
                format!("`{}` is {:?}, got {:?}", p.name, p.value.shape(), value.shape()),
            ));
        }
        p.value = value;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Zero buffers with the shape of every gradient accumulator.
    pub fn grad_buffers(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| vec![0.0; p.value.numel()]).collect()
    }

    pub fn accumulate(&mut self, grads: &[Vec<f64>]) {
        for (p, g) in self.params.iter_mut().zip(grads) {
            p.grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// `(prefix + name, value)` for every parameter, in creation order.
    pub fn records(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|p| (format!("{prefix}{}", p.name), p.value.clone()))
            .collect()
    }

    /// Replaces every value from `lookup(prefix + name)`; all parameters
    /// must be present with matching shapes.
    pub fn load_records(&mut self, prefix: &str, lookup: &HashMap<String, Tensor>) -> Result<()> {
        for p in &mut self.params {
            let key = format!("{prefix}{}", p.name);
            let t = lookup
                .get(&key)
                .ok_or_else(|| Error::format("checkpoint", format!("missing parameter `{key}`")))?;
            if t.shape() != p.value.shape() {
                return Err(Error::format(
                    "checkpoint",
                    format!("`{key}` is {:?}, model expects {:?}", t.shape(), p.value.shape()),
                ));
            }
            p.value = t.clone();
        }
        Ok(())
    }

    /// Places every parameter on `tape`. Frozen bindings produce leaves that
    /// never receive gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| tape.param_leaf(ParamId(i), p.value.clone(), trainable))
            .collect();
        Bound { vars }
    }
}

/// Tape handles of a bound [`ParamStore`], indexed by [`ParamId`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Gradient of every bound parameter, zeros where unreachable.
    pub fn grads(&self, tape: &Tape, g: &Gradients) -> Vec<Vec<f64>> {
        self.vars.iter().map(|&v| g.wrt_or_zeros(tape, v)).collect()
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}
