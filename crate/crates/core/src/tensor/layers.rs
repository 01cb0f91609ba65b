//! Dense building blocks shared by the networks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{init, Bound, Graph, ParamId, ParamStore, Tensor, Var, LEAKY_SLOPE};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu,
    Tanh,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::LeakyRelu => g.leaky_relu(x, LEAKY_SLOPE),
            Activation::Tanh => g.tanh(x),
        }
    }
}

/// Affine map `x W + b` over the rows of `x`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            init::he_uniform(rng, &[fan_in, fan_out], fan_in),
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([fan_out]))?;
        Ok(Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    /// Same layer with every weight and bias zero.
    pub fn zeroed(self, store: &mut ParamStore) -> Self {
        store.get_mut(self.weight).data_mut().fill(0.0);
        store.get_mut(self.bias).data_mut().fill(0.0);
        self
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = g.matmul(x, p[self.weight])?;
        g.add(h, p[self.bias])
    }
}

/// Stack of [`Linear`] layers with an activation between consecutive layers.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
    pub activate_last: bool,
}

impl Mlp {
    /// `widths` lists every layer boundary, input first.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        activation: Activation,
        activate_last: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(Mlp {
            layers,
            activation,
            activate_last,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, mut x: Var) -> Result<Var> {
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, p, x)?;
            if i + 1 < n || self.activate_last {
                x = self.activation.apply(g, x);
            }
        }
        Ok(x)
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }
}
