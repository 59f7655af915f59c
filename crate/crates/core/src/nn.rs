//! Parameter storage, dense layers and two-hidden-layer MLPs.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::rng::{self, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_FLOW_HIDDEN_LARGE: usize = 256;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ParamId(pub usize);

/// Named, ordered collection of parameter tensors owned by one model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(Error::GradientLength {
                params: self.numel(),
                grads: values.len(),
            });
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Replaces every tensor by name from `other`; names and shapes must agree.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let j = other
                .find(name)
                .ok_or_else(|| Error::Config(alloc::format!("missing parameter `{name}`")))?;
            let src = &other.tensors[j.0];
            if src.shape() != self.tensors[i].shape() {
                return Err(Error::Shape {
                    op: "load_params",
                    lhs: self.tensors[i].shape().to_vec(),
                    rhs: src.shape().to_vec(),
                });
            }
            self.tensors[i] = src.clone();
        }
        Ok(())
    }

    /// Puts every tensor on `tape`, as gradient-receiving leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// Tape handles for a [`ParamStore`], in store order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Handles in store order, e.g. from a finite-difference checker.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Flattened gradient in store order; unreached parameters contribute zeros.
    pub fn flat_grad(&self, tape: &Tape) -> Vec<f64> {
        let mut out = Vec::new();
        for &v in &self.vars {
            match tape.grad_slice(v) {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(core::iter::repeat_n(0.0, tape.value(v).len())),
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum HiddenActivation {
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum OutputActivation {
    Identity,
    Softmax,
}

/// Glorot-uniform weights, zero bias.
pub fn glorot(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = math::sqrt(6.0 / (fan_in + fan_out) as f64);
    let data = (0..fan_in * fan_out).map(|_| rng::uniform(rng, -limit, limit)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("glorot shape")
}

/// Affine layer `x · W + b` with `W` stored as `[in, out]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let weight = store.add(alloc::format!("{name}.weight"), glorot(rng, in_dim, out_dim));
        let bias = store.add(alloc::format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = tape.matmul(x, p.var(self.weight))?;
        tape.add_row(h, p.var(self.bias))
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).data_mut().fill(0.0);
        store.get_mut(self.bias).data_mut().fill(0.0);
    }
}

/// Feedforward network: ReLU hidden layers, then an output activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub hidden_activation: HiddenActivation,
    pub output_activation: OutputActivation,
}

impl Mlp {
    /// `dims = [in, h1, ..., out]`.
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], output: OutputActivation, rng: &mut Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output widths");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &alloc::format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self {
            layers,
            hidden_activation: HiddenActivation::Relu,
            output_activation: output,
        }
    }

    /// Two ReLU hidden layers of width `hidden`.
    pub fn two_hidden(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        activation: OutputActivation,
        rng: &mut Rng,
    ) -> Self {
        Self::new(store, name, &[input, hidden, hidden, output], activation, rng)
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn output_layer(&self) -> &Linear {
        &self.layers[self.layers.len() - 1]
    }

    /// Output of the last hidden layer (after ReLU), skipping the output layer.
    pub fn trunk(&self, tape: &mut Tape, p: &Bound, input: Var) -> Result<Var> {
        let width = tape.value(input).cols();
        if width != self.in_dim() {
            return Err(Error::Shape {
                op: "mlp_forward",
                lhs: tape.value(input).shape().to_vec(),
                rhs: vec![self.in_dim()],
            });
        }
        let mut h = input;
        for layer in &self.layers[..self.layers.len() - 1] {
            h = layer.forward(tape, p, h)?;
            h = match self.hidden_activation {
                HiddenActivation::Relu => tape.relu(h)?,
            };
        }
        Ok(h)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, input: Var) -> Result<Var> {
        let h = self.trunk(tape, p, input)?;
        let out = self.output_layer().forward(tape, p, h)?;
        match self.output_activation {
            OutputActivation::Identity => Ok(out),
            OutputActivation::Softmax => tape.softmax(out),
        }
    }
}
