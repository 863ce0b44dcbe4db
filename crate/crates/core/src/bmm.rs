//! Boundary-matching head.
//!
//! A two-layer temporal convolution trunk feeds a boundary head (start and
//! end probability per snippet) and a proposal head. The proposal head
//! samples the trunk output at `n_s` evenly spaced points inside every
//! candidate interval `[t, t + d]`, collapses the sample axis with a strided
//! 3-D convolution and scores each cell with a small 2-D convolution stack.
//! Cell `(d, t)` (duration `d` in `1..=D`) is valid when `t + d <= T`.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Conv, ConvSpec, Graph, ParamStore, Taps, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BmmConfig {
    /// Output channels of the two trunk convolutions.
    pub trunk_channels: [usize; 2],
    /// Hidden channels of the boundary head.
    pub boundary_channels: usize,
    /// Points sampled per candidate interval.
    pub samples: usize,
    /// Output channels of the 3-D convolution and the two hidden 2-D convolutions.
    pub proposal_channels: [usize; 3],
    /// Longest candidate duration in snippets; `None` means `T`.
    pub max_duration: Option<usize>,
}

impl Default for BmmConfig {
    fn default() -> Self {
        BmmConfig {
            trunk_channels: [256, 128],
            boundary_channels: 256,
            samples: 32,
            proposal_channels: [512, 128, 128],
            max_duration: None,
        }
    }
}

impl BmmConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.trunk_channels[0],
            self.trunk_channels[1],
            self.boundary_channels,
            self.samples,
            self.proposal_channels[0],
            self.proposal_channels[1],
            self.proposal_channels[2],
        ];
        if all.contains(&0) || self.max_duration == Some(0) {
            return Err(Error::Config("boundary-matching widths must be positive".into()));
        }
        Ok(())
    }

    pub fn duration_for(&self, t: usize) -> Result<usize> {
        match self.max_duration {
            None => Ok(t),
            Some(d) if d <= t => Ok(d),
            Some(d) => Err(Error::Config(format!("max_duration {d} exceeds video length {t}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Bmm {
    pub config: BmmConfig,
    pub input_dim: usize,
    pub trunk: [Conv; 2],
    pub boundary: [Conv; 2],
    pub sample_conv: Conv,
    pub proposal: [Conv; 3],
}

/// Graph handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct BmmVars {
    /// `[T]`
    pub start: Var,
    /// `[T]`
    pub end: Var,
    /// `[D, T]`, zero on invalid cells.
    pub actionness: Var,
}

/// Probability maps of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct BmmOutput<T> {
    pub start: Vec<T>,
    pub end: Vec<T>,
    /// `[D, T]`; row `d - 1` holds duration `d`.
    pub actionness: Tensor<T>,
}

impl<T: Real> BmmOutput<T> {
    pub fn len(&self) -> usize {
        self.start.len()
    }

    pub fn is_empty(&self) -> bool {
        self.start.is_empty()
    }

    pub fn max_duration(&self) -> usize {
        self.actionness.shape()[0]
    }

    /// Score of the interval `[t, t + d]`, `1 <= d <= D`.
    pub fn actionness_at(&self, d: usize, t: usize) -> T {
        self.actionness.get(&[d - 1, t])
    }

    pub fn from_graph(g: &Graph<'_, T>, vars: &BmmVars) -> Self {
        BmmOutput {
            start: g.value(vars.start).data().to_vec(),
            end: g.value(vars.end).data().to_vec(),
            actionness: g.value(vars.actionness).clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.len();
        let d = self.max_duration();
        let in_unit = |v: T| v >= T::zero() && v <= T::one();
        if self.end.len() != t || self.actionness.shape() != [d, t] {
            return Err(Error::dim("bmm_output", "map shapes disagree"));
        }
        if !self.start.iter().chain(&self.end).chain(self.actionness.data()).all(|&v| in_unit(v)) {
            return Err(Error::Degenerate("probabilities outside [0, 1]".into()));
        }
        for dd in 1..=d {
            for tt in 0..t {
                if !is_valid_cell(dd, tt, t) && self.actionness_at(dd, tt) != T::zero() {
                    return Err(Error::Degenerate(format!("invalid cell ({dd}, {tt}) is not masked")));
                }
            }
        }
        Ok(())
    }
}

pub fn is_valid_cell(d: usize, t: usize, len: usize) -> bool {
    t + d <= len
}

/// `[D, T]` mask with ones on valid cells.
pub fn validity_mask<T: Real>(d: usize, t: usize) -> Tensor<T> {
    let data = (1..=d)
        .flat_map(|dd| (0..t).map(move |tt| if is_valid_cell(dd, tt, t) { T::one() } else { T::zero() }))
        .collect();
    Tensor::new(vec![d, t], data).expect("shape")
}

/// Position of sample `k` of `n` inside `[t, t + d]`.
pub fn sample_position(t: usize, d: usize, k: usize, n: usize) -> f64 {
    if n == 1 {
        return t as f64 + d as f64 / 2.0;
    }
    t as f64 + d as f64 * k as f64 / (n - 1) as f64
}

/// Linear-interpolation taps of the matching layer over a `len`-column input,
/// ordered as `[n_s, D, T]`. Positions past the last column use the last
/// column; invalid cells have zero taps.
pub fn matching_taps<T: Real>(len: usize, max_d: usize, n_s: usize) -> Vec<Taps<T>> {
    let zero = [(0, T::zero()), (0, T::zero())];
    let mut taps = vec![zero; n_s * max_d * len];
    let last = (len - 1) as f64;
    for k in 0..n_s {
        for d in 1..=max_d {
            for t in 0..len {
                if !is_valid_cell(d, t, len) {
                    continue;
                }
                let p = sample_position(t, d, k, n_s).clamp(0.0, last);
                let i0 = p.floor() as usize;
                let frac = p - i0 as f64;
                let i1 = (i0 + 1).min(len - 1);
                taps[(k * max_d + d - 1) * len + t] = [(i0, T::lit(1.0 - frac)), (i1, T::lit(frac))];
            }
        }
    }
    taps
}

/// Samples `x: [C, T]` into `[C, n_s, D, T]`.
pub fn matching_layer<T: Real>(g: &mut Graph<'_, T>, x: Var, max_d: usize, n_s: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 2 || s[1] == 0 {
        return Err(Error::dim("matching_layer", format!("input {s:?}")));
    }
    let len = s[1];
    if max_d == 0 || max_d > len {
        return Err(Error::dim("matching_layer", format!("duration {max_d} for length {len}")));
    }
    let taps = Arc::new(matching_taps(len, max_d, n_s));
    g.resample(x, taps, &[n_s, max_d, len])
}

impl Bmm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, input_dim: usize, config: BmmConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let [c1, c2] = config.trunk_channels;
        let [p0, p1, p2] = config.proposal_channels;
        let n_s = config.samples;
        let k3 = ConvSpec::conv1d(3, 1);
        let trunk = [
            Conv::new(store, "bmm.trunk0", input_dim, c1, k3.clone(), rng),
            Conv::new(store, "bmm.trunk1", c1, c2, k3.clone(), rng),
        ];
        let boundary = [
            Conv::new(store, "bmm.boundary0", c2, config.boundary_channels, k3.clone(), rng),
            Conv::new(store, "bmm.boundary1", config.boundary_channels, 2, k3, rng),
        ];
        let sample_conv = Conv::new(
            store,
            "bmm.sample_conv",
            c2,
            p0,
            ConvSpec::conv3d([n_s, 1, 1], [n_s, 1, 1], [0, 0, 0]),
            rng,
        );
        let proposal = [
            Conv::new(store, "bmm.proposal0", p0, p1, ConvSpec::conv2d([1, 1], [0, 0]), rng),
            Conv::new(store, "bmm.proposal1", p1, p2, ConvSpec::conv2d([3, 3], [1, 1]), rng),
            Conv::new(store, "bmm.proposal2", p2, 1, ConvSpec::conv2d([1, 1], [0, 0]), rng),
        ];
        Ok(Bmm {
            config,
            input_dim,
            trunk,
            boundary,
            sample_conv,
            proposal,
        })
    }

    /// `x: [d_f, T]` to the trunk output `[C, T]`.
    pub fn semantic<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 2 || s[0] != self.input_dim || s[1] == 0 {
            return Err(Error::dim(
                "semantic_model",
                format!("input {s:?}, expected [{}, T >= 1]", self.input_dim),
            ));
        }
        let h = self.trunk[0].forward(g, x)?;
        let h = g.relu(h)?;
        let h = self.trunk[1].forward(g, h)?;
        g.relu(h)
    }

    /// Start and end probabilities, each `[T]`.
    pub fn temporal_heads<T: Real>(&self, g: &mut Graph<'_, T>, trunk: Var) -> Result<(Var, Var)> {
        let len = g.shape(trunk)[1];
        let h = self.boundary[0].forward(g, trunk)?;
        let h = g.relu(h)?;
        let h = self.boundary[1].forward(g, h)?;
        let p = g.sigmoid(h)?;
        let s = g.gather_rows(p, &[0])?;
        let e = g.gather_rows(p, &[1])?;
        Ok((g.reshape(s, &[len])?, g.reshape(e, &[len])?))
    }

    /// Masked actionness map `[D, T]` from the matching-layer output `[C, n_s, D, T]`.
    pub fn proposal_head<T: Real>(&self, g: &mut Graph<'_, T>, sampled: Var) -> Result<Var> {
        let s = g.shape(sampled).to_vec();
        let (max_d, len) = (s[2], s[3]);
        let h = self.sample_conv.forward(g, sampled)?;
        let h = g.relu(h)?;
        let h = g.reshape(h, &[self.config.proposal_channels[0], max_d, len])?;
        let h = self.proposal[0].forward(g, h)?;
        let h = g.relu(h)?;
        let h = self.proposal[1].forward(g, h)?;
        let h = g.relu(h)?;
        let h = self.proposal[2].forward(g, h)?;
        let p = g.sigmoid(h)?;
        let p = g.reshape(p, &[max_d, len])?;
        g.mul_const(p, &validity_mask(max_d, len))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<BmmVars> {
        let trunk = self.semantic(g, x)?;
        let len = g.shape(trunk)[1];
        let max_d = self.config.duration_for(len)?;
        let (start, end) = self.temporal_heads(g, trunk)?;
        let sampled = matching_layer(g, trunk, max_d, self.config.samples)?;
        let actionness = self.proposal_head(g, sampled)?;
        Ok(BmmVars { start, end, actionness })
    }
}
