//! Adaptive attention over a variable set of entity rows.
//!
//! Entities and the environment are embedded by two MLPs into a shared
//! width; each entity is scored by the L2 norm of its embedding plus the
//! environment embedding; the scores are normalized with a softmax and every
//! entity whose weight reaches `1/M` is kept. The kept *original* rows are
//! fused by a self-attention encoder and mean-pooled into one vector.
//!
//! The selection mask is a constant during backward: gradients reach the
//! kept rows and the encoder, never the scoring MLPs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Encoder, Graph, Mlp, ParamId, ParamStore, Tensor, Var};

/// How entity rows are reduced to a single vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    /// Adaptive selection followed by self-attention and mean pooling.
    #[default]
    Adaptive,
    /// Self-attention over all rows and mean pooling, no selection.
    Soft,
    /// Adaptive selection followed by plain mean pooling.
    Hard,
}

/// What an entity's raw score is the norm of.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// `‖f̂_i + f̂^e‖`
    #[default]
    WithEnvironment,
    /// `‖f̂_i‖`
    EntityOnly,
}

#[derive(Clone, Debug)]
pub struct Aam {
    pub env_mlp: Mlp,
    pub entity_mlp: Mlp,
    pub encoder: Encoder,
    /// Returned when the entity set is empty.
    pub default: ParamId,
    pub env_dim: usize,
    pub entity_dim: usize,
    pub hidden: usize,
    pub kind: AttentionKind,
    pub score_mode: ScoreMode,
}

/// Result of one forward pass.
#[derive(Clone, Debug)]
pub struct AamOutput<T> {
    /// `[entity_dim]`
    pub value: Var,
    /// Normalized scores, empty when no scoring was done.
    pub weights: Vec<T>,
    /// Indices of the rows that were fused.
    pub selected: Vec<usize>,
    pub used_default: bool,
}

impl Aam {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        env_dim: usize,
        entity_dim: usize,
        hidden: usize,
        kind: AttentionKind,
        score_mode: ScoreMode,
        rng: &mut impl Rng,
    ) -> Self {
        let env_mlp = Mlp::new(store, &format!("{name}.env_mlp"), env_dim, hidden, rng);
        let entity_mlp = Mlp::new(store, &format!("{name}.entity_mlp"), entity_dim, hidden, rng);
        let encoder = Encoder::new(store, &format!("{name}.encoder"), entity_dim, entity_dim, rng);
        let bound = 1.0 / (entity_dim as f64).sqrt();
        let default = store.add_uniform(format!("{name}.default"), &[entity_dim], bound, rng);
        Aam {
            env_mlp,
            entity_mlp,
            encoder,
            default,
            env_dim,
            entity_dim,
            hidden,
            kind,
            score_mode,
        }
    }

    /// Embeds `env: [d_e]` and `entities: [M, d]` into the shared width.
    /// With `M = 0` the entity embedding is `None`.
    pub fn embed<T: Real>(&self, g: &mut Graph<'_, T>, env: Var, entities: Var) -> Result<(Var, Option<Var>)> {
        self.check(g, env, entities)?;
        let env_hat = self.env_mlp.forward(g, env)?;
        if g.shape(entities)[0] == 0 {
            return Ok((env_hat, None));
        }
        let ent_hat = self.entity_mlp.forward(g, entities)?;
        Ok((env_hat, Some(ent_hat)))
    }

    fn check<T: Real>(&self, g: &Graph<'_, T>, env: Var, entities: Var) -> Result<()> {
        let (es, xs) = (g.shape(env), g.shape(entities));
        if es != [self.env_dim] || xs.len() != 2 || xs[1] != self.entity_dim {
            return Err(Error::dim(
                "aam",
                format!(
                    "environment {es:?} and entities {xs:?}, expected [{}] and [M, {}]",
                    self.env_dim, self.entity_dim
                ),
            ));
        }
        Ok(())
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, env: Var, entities: Var) -> Result<AamOutput<T>> {
        self.check(g, env, entities)?;
        let m = g.shape(entities)[0];
        if m == 0 {
            return Ok(AamOutput {
                value: g.param(self.default),
                weights: Vec::new(),
                selected: Vec::new(),
                used_default: true,
            });
        }
        if self.kind == AttentionKind::Soft {
            let value = fuse(g, &self.encoder, entities)?;
            return Ok(AamOutput {
                value,
                weights: Vec::new(),
                selected: (0..m).collect(),
                used_default: false,
            });
        }
        let (env_hat, ent_hat) = self.embed(g, env, entities)?;
        let ent_hat = ent_hat.expect("m > 0");
        let h = attention_scores(g, env_hat, ent_hat, self.score_mode)?;
        let h_norm = g.softmax(h, 0)?;
        let weights = g.value(h_norm).data().to_vec();
        let selected = adaptive_select(&weights);
        let rows = g.gather_rows(entities, &selected)?;
        let value = match self.kind {
            AttentionKind::Hard => g.mean(rows, 0)?,
            _ => fuse(g, &self.encoder, rows)?,
        };
        Ok(AamOutput {
            value,
            weights,
            selected,
            used_default: false,
        })
    }

    /// Sets both MLPs to identity maps (requires `hidden == env_dim == entity_dim`).
    pub fn set_identity_mlps<T: Real>(&self, store: &mut ParamStore<T>) {
        for mlp in [&self.env_mlp, &self.entity_mlp] {
            mlp.hidden.set_identity(store);
            mlp.output.set_identity(store);
        }
    }
}

/// Raw scores `h: [M]` from `env_hat: [d_h]` and `ent_hat: [M, d_h]`.
pub fn attention_scores<T: Real>(g: &mut Graph<'_, T>, env_hat: Var, ent_hat: Var, mode: ScoreMode) -> Result<Var> {
    let s = g.shape(ent_hat);
    if s.len() != 2 || s[0] == 0 {
        return Err(Error::EmptySet { op: "attention_scores" });
    }
    let joint = match mode {
        ScoreMode::WithEnvironment => g.add_row(ent_hat, env_hat)?,
        ScoreMode::EntityOnly => ent_hat,
    };
    g.l2_norm(joint, 1)
}

/// Softmax of raw scores with max subtraction.
pub fn normalize_scores<T: Real>(h: &[T]) -> Vec<T> {
    if h.is_empty() {
        return Vec::new();
    }
    let mx = h.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = h.iter().map(|&x| (x - mx).exp()).collect();
    let z: T = e.iter().copied().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Indices `i` with `weights[i] >= 1/M`, in ascending order.
pub fn adaptive_select<T: Real>(weights: &[T]) -> Vec<usize> {
    let tau = T::one() / T::lit(weights.len() as f64);
    let out: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] >= tau).collect();
    if out.is_empty() {
        // rounding can leave the largest weight a hair under 1/M
        let best = (0..weights.len())
            .max_by(|&a, &b| weights[a].partial_cmp(&weights[b]).expect("finite").then(b.cmp(&a)));
        return best.into_iter().collect();
    }
    out
}

/// Self-attention encoding of `rows: [n, d]` followed by a mean over rows.
pub fn fuse<T: Real>(g: &mut Graph<'_, T>, encoder: &Encoder, rows: Var) -> Result<Var> {
    let enc = encoder.forward(g, rows)?;
    g.mean(enc, 0)
}

/// Entity rows as a graph constant `[M, d]`; `M` may be zero.
pub fn entity_input<T: Real>(g: &mut Graph<'_, T>, dim: usize, data: &[f32]) -> Result<Var> {
    let vals = data.iter().map(|&v| T::lit(v as f64)).collect();
    g.constant(Tensor::new(vec![data.len() / dim.max(1), dim], vals)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(kind: AttentionKind, d: usize) -> (ParamStore<f64>, Aam) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let aam = Aam::new(&mut store, "aam", d, d, d, kind, ScoreMode::WithEnvironment, &mut rng);
        (store, aam)
    }

    #[test]
    fn score_examples() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::with_params(&store);
        let e = g.constant(Tensor::vector(vec![2.0, 2.0])).unwrap();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![-2.0, -2.0]]).unwrap()).unwrap();
        let h = attention_scores(&mut g, e, x, ScoreMode::WithEnvironment).unwrap();
        assert_eq!(g.value(h).data(), &[5.0, 0.0]);
        let h1 = attention_scores(&mut g, e, x, ScoreMode::EntityOnly).unwrap();
        assert!((g.value(h1).data()[0] - 5f64.sqrt()).abs() < 1e-12);
        let empty = g.constant(Tensor::zeros(&[0, 2])).unwrap();
        assert!(matches!(
            attention_scores(&mut g, e, empty, ScoreMode::WithEnvironment),
            Err(Error::EmptySet { .. })
        ));
    }

    #[test]
    fn normalization_examples() {
        assert!(normalize_scores(&[1.3f64; 5]).iter().all(|&v| (v - 0.2).abs() < 1e-12));
        assert_eq!(normalize_scores(&[4.0f64]), vec![1.0]);
        let h = normalize_scores(&[0.0, 3f64.ln()]);
        assert!((h[0] - 0.25).abs() < 1e-12 && (h[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn selection_examples() {
        assert_eq!(adaptive_select(&[0.4, 0.3, 0.2, 0.1]), vec![0, 1]);
        assert_eq!(adaptive_select(&normalize_scores(&[0.7f64; 6])), (0..6).collect::<Vec<_>>());
        assert_eq!(adaptive_select(&[0.97, 0.01, 0.01, 0.01]), vec![0]);
        assert_eq!(adaptive_select(&[1.0f32]), vec![0]);
    }

    #[test]
    fn empty_set_uses_default() {
        let (store, aam) = model(AttentionKind::Adaptive, 3);
        let mut g = Graph::with_params(&store);
        let e = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        let x = entity_input(&mut g, 3, &[]).unwrap();
        let out = aam.forward(&mut g, e, x).unwrap();
        assert!(out.used_default);
        assert_eq!(g.value(out.value), store.value(aam.default));
        let (env_hat, ent) = aam.embed(&mut g, e, x).unwrap();
        assert!(ent.is_none());
        assert_eq!(g.shape(env_hat), &[3]);
    }

    #[test]
    fn identity_mlps_pass_through() {
        let (mut store, aam) = model(AttentionKind::Adaptive, 2);
        aam.set_identity_mlps(&mut store);
        let mut g = Graph::with_params(&store);
        let e = g.constant(Tensor::vector(vec![1.0, 0.5])).unwrap();
        let x = g.constant(Tensor::from_rows(&[vec![0.25, 2.0]]).unwrap()).unwrap();
        let (eh, xh) = aam.embed(&mut g, e, x).unwrap();
        assert_eq!(g.value(eh).data(), &[1.0, 0.5]);
        assert_eq!(g.value(xh.unwrap()).data(), &[0.25, 2.0]);
    }

    #[test]
    fn singleton_equals_fused_row() {
        let (store, aam) = model(AttentionKind::Adaptive, 4);
        let mut g = Graph::with_params(&store);
        let e = g.constant(Tensor::vector(vec![0.1, -0.2, 0.3, 0.4])).unwrap();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0, -1.0, 0.5]]).unwrap()).unwrap();
        let out = aam.forward(&mut g, e, x).unwrap();
        assert_eq!(out.selected, vec![0]);
        let direct = fuse(&mut g, &aam.encoder, x).unwrap();
        assert_eq!(g.value(out.value), g.value(direct));
    }

    #[test]
    fn variants_differ_in_what_they_fuse() {
        let rows = vec![vec![3.0, 0.0], vec![0.0, 0.1], vec![0.1, 0.0]];
        let (mut store, hard) = model(AttentionKind::Hard, 2);
        hard.set_identity_mlps(&mut store);
        let mut g = Graph::with_params(&store);
        let e = g.constant(Tensor::vector(vec![0.0, 0.0])).unwrap();
        let x = g.constant(Tensor::from_rows(&rows).unwrap()).unwrap();
        let out = hard.forward(&mut g, e, x).unwrap();
        assert_eq!(out.selected, vec![0]);
        assert_eq!(g.value(out.value).data(), &[3.0, 0.0]);

        let (store, soft) = model(AttentionKind::Soft, 2);
        let mut g = Graph::with_params(&store);
        let e = g.constant(Tensor::vector(vec![0.0, 0.0])).unwrap();
        let x = g.constant(Tensor::from_rows(&rows).unwrap()).unwrap();
        let out = soft.forward(&mut g, e, x).unwrap();
        assert_eq!(out.selected, vec![0, 1, 2]);
        assert!(out.weights.is_empty());
    }
}
