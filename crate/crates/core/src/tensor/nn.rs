//! Layers built from tape ops. Each layer owns only [`ParamId`]s; values live
//! in the [`ParamStore`].

use rand::Rng;

use super::conv::ConvSpec;
use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::Result;
use crate::real::Real;

/// `y = x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add_uniform(format!("{name}.weight"), &[in_dim, out_dim], bound, rng);
        let bias = store.add_uniform(format!("{name}.bias"), &[out_dim], bound, rng);
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.linear(x, w, b)
    }

    /// Overwrites the weights with identity (square layers) and zero bias.
    pub fn set_identity<T: Real>(&self, store: &mut ParamStore<T>) {
        assert_eq!(self.in_dim, self.out_dim);
        *store.value_mut(self.weight) = Tensor::identity(self.in_dim);
        *store.value_mut(self.bias) = Tensor::zeros(&[self.out_dim]);
    }

    pub fn set_zero<T: Real>(&self, store: &mut ParamStore<T>) {
        *store.value_mut(self.weight) = Tensor::zeros(&[self.in_dim, self.out_dim]);
        *store.value_mut(self.bias) = Tensor::zeros(&[self.out_dim]);
    }
}

/// Two linear layers with a ReLU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        width: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Mlp {
            hidden: Linear::new(store, &format!("{name}.0"), in_dim, width, rng),
            output: Linear::new(store, &format!("{name}.1"), width, width, rng),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, x)?;
        let h = g.relu(h)?;
        self.output.forward(g, h)
    }
}

/// One single-head transformer encoder block over a set of rows:
/// scaled dot-product self-attention with a residual connection, then a
/// ReLU feed-forward layer with a residual connection.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub dim: usize,
}

impl Encoder {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        ff_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Encoder {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            ff_in: Linear::new(store, &format!("{name}.ff0"), dim, ff_dim, rng),
            ff_out: Linear::new(store, &format!("{name}.ff1"), ff_dim, dim, rng),
            dim,
        }
    }

    /// `x: [n, dim]` with `n >= 1`; returns `[n, dim]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 2 || s[1] != self.dim {
            return Err(crate::Error::dim(
                "self_attention_encoder",
                format!("input {s:?}, width {}", self.dim),
            ));
        }
        if s[0] == 0 {
            return Err(crate::Error::EmptySet {
                op: "self_attention_encoder",
            });
        }
        let q = self.query.forward(g, x)?;
        let k = self.key.forward(g, x)?;
        let v = self.value.forward(g, x)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, T::one() / T::lit(self.dim as f64).sqrt())?;
        let attn = g.softmax(scores, 1)?;
        let mixed = g.matmul(attn, v)?;
        let mixed = self.out.forward(g, mixed)?;
        let x1 = g.add(x, mixed)?;
        let h = self.ff_in.forward(g, x1)?;
        let h = g.relu(h)?;
        let h = self.ff_out.forward(g, h)?;
        g.add(x1, h)
    }

    /// Zeroes the attention output and feed-forward output projections so the
    /// block reduces to the identity through its residual paths.
    pub fn set_identity<T: Real>(&self, store: &mut ParamStore<T>) {
        self.out.set_zero(store);
        self.ff_out.set_zero(store);
    }
}

/// Convolution layer with its kernel geometry.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: ConvSpec,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        spec: ConvSpec,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * spec.kernel.iter().product::<usize>();
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut shape = vec![out_channels, in_channels];
        shape.extend(&spec.kernel);
        let weight = store.add_uniform(format!("{name}.weight"), &shape, bound, rng);
        let bias = store.add_uniform(format!("{name}.bias"), &[out_channels], bound, rng);
        Conv {
            weight,
            bias,
            spec,
            in_channels,
            out_channels,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv(x, w, b, &self.spec)
    }

    pub fn set_zero<T: Real>(&self, store: &mut ParamStore<T>) {
        let ws = store.value(self.weight).shape().to_vec();
        *store.value_mut(self.weight) = Tensor::zeros(&ws);
        *store.value_mut(self.bias) = Tensor::zeros(&[self.out_channels]);
    }
}
