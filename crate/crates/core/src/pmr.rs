//! Per-snippet multi-modal representation.
//!
//! Three beholders produce one vector each: the environment vector itself,
//! an adaptive-attention summary of the actor rows and one of the object
//! rows. Each is projected to the fused width `d_f`, the three are stacked,
//! encoded with self-attention and mean-pooled into the snippet's feature.
//! A video becomes a `[d_f, T]` matrix, one column per snippet.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aam::{entity_input, Aam, AttentionKind, ScoreMode};
use crate::data::{SnippetBundle, VideoFeatureSequence};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Encoder, Graph, Linear, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PmrConfig {
    pub env_dim: usize,
    pub actor_dim: usize,
    pub object_dim: usize,
    /// Width of the fused per-snippet feature.
    pub fused_dim: usize,
    /// Shared embedding width of the attention scoring MLPs.
    pub hidden_dim: usize,
    pub use_actors: bool,
    pub use_environment: bool,
    pub use_objects: bool,
    pub attention: AttentionKind,
    pub score_mode: ScoreMode,
}

impl Default for PmrConfig {
    fn default() -> Self {
        PmrConfig {
            env_dim: 2048,
            actor_dim: 2048,
            object_dim: 512,
            fused_dim: 128,
            hidden_dim: 128,
            use_actors: true,
            use_environment: true,
            use_objects: true,
            attention: AttentionKind::Adaptive,
            score_mode: ScoreMode::WithEnvironment,
        }
    }
}

/// The seven beholder/attention combinations of the ablation grid.
pub const ABLATIONS: [(&str, bool, bool, bool, AttentionKind); 7] = [
    ("exp1", true, false, false, AttentionKind::Soft),
    ("exp2", false, true, false, AttentionKind::Soft),
    ("exp3", false, false, true, AttentionKind::Soft),
    ("exp4", true, true, false, AttentionKind::Soft),
    ("exp5", true, true, true, AttentionKind::Soft),
    ("exp6", true, true, false, AttentionKind::Adaptive),
    ("exp7", true, true, true, AttentionKind::Adaptive),
];

impl PmrConfig {
    /// Applies a named ablation (`exp1` .. `exp7`) to the beholder switches.
    pub fn with_ablation(mut self, name: &str) -> Result<Self> {
        let &(_, a, e, o, kind) = ABLATIONS
            .iter()
            .find(|x| x.0 == name)
            .ok_or_else(|| Error::Config(format!("unknown ablation {name:?}; expected exp1..exp7")))?;
        self.use_actors = a;
        self.use_environment = e;
        self.use_objects = o;
        self.attention = kind;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.env_dim, self.actor_dim, self.object_dim, self.fused_dim, self.hidden_dim];
        if dims.contains(&0) {
            return Err(Error::Config("representation widths must be positive".into()));
        }
        if !(self.use_actors || self.use_environment || self.use_objects) {
            return Err(Error::Config("at least one beholder must be enabled".into()));
        }
        Ok(())
    }

    /// Adaptive attention scores entities against the environment; without
    /// the environment beholder it degrades to soft attention.
    pub fn effective_attention(&self) -> AttentionKind {
        match self.attention {
            AttentionKind::Adaptive | AttentionKind::Hard if !self.use_environment => AttentionKind::Soft,
            k => k,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Pmr {
    pub config: PmrConfig,
    pub actors: Aam,
    pub objects: Aam,
    pub env_proj: Linear,
    pub actor_proj: Linear,
    pub object_proj: Linear,
    pub aoe: Encoder,
}

/// What the attention beholders picked for one snippet.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SnippetTrace {
    pub actors_selected: Vec<usize>,
    pub objects_selected: Vec<usize>,
    pub actors_default: bool,
    pub objects_default: bool,
}

impl Pmr {
    pub fn new<T: Real>(store: &mut ParamStore<T>, config: PmrConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let kind = c.effective_attention();
        if kind != c.attention {
            log::warn!("environment beholder disabled: using soft attention for actors and objects");
        }
        let actors = Aam::new(store, "pmr.actors", c.env_dim, c.actor_dim, c.hidden_dim, kind, c.score_mode, rng);
        let objects = Aam::new(store, "pmr.objects", c.env_dim, c.object_dim, c.hidden_dim, kind, c.score_mode, rng);
        let env_proj = Linear::new(store, "pmr.env_proj", c.env_dim, c.fused_dim, rng);
        let actor_proj = Linear::new(store, "pmr.actor_proj", c.actor_dim, c.fused_dim, rng);
        let object_proj = Linear::new(store, "pmr.object_proj", c.object_dim, c.fused_dim, rng);
        let aoe = Encoder::new(store, "pmr.aoe", c.fused_dim, c.fused_dim, rng);
        Ok(Pmr {
            config,
            actors,
            objects,
            env_proj,
            actor_proj,
            object_proj,
            aoe,
        })
    }

    pub fn check_video(&self, video: &VideoFeatureSequence) -> Result<()> {
        let c = &self.config;
        if (video.env_dim, video.actor_dim, video.object_dim) != (c.env_dim, c.actor_dim, c.object_dim) {
            return Err(Error::dim(
                "pmr",
                format!(
                    "{}: features are ({}, {}, {}) wide, model expects ({}, {}, {})",
                    video.video_id,
                    video.env_dim,
                    video.actor_dim,
                    video.object_dim,
                    c.env_dim,
                    c.actor_dim,
                    c.object_dim
                ),
            ));
        }
        Ok(())
    }

    /// Snippet feature `[d_f]` from graph inputs `env: [d_e]`, `actors: [M_a, d_a]`, `objects: [K, d_o]`.
    pub fn snippet_forward_vars<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        env: Var,
        actors: Var,
        objects: Var,
    ) -> Result<(Var, SnippetTrace)> {
        let c = &self.config;
        let zero = |g: &mut Graph<'_, T>| g.constant(Tensor::zeros(&[c.fused_dim]));
        let mut trace = SnippetTrace::default();
        let f_a = if c.use_actors {
            let out = self.actors.forward(g, env, actors)?;
            trace.actors_selected = out.selected;
            trace.actors_default = out.used_default;
            self.actor_proj.forward(g, out.value)?
        } else {
            zero(g)?
        };
        let f_o = if c.use_objects {
            let out = self.objects.forward(g, env, objects)?;
            trace.objects_selected = out.selected;
            trace.objects_default = out.used_default;
            self.object_proj.forward(g, out.value)?
        } else {
            zero(g)?
        };
        let f_e = if c.use_environment {
            self.env_proj.forward(g, env)?
        } else {
            zero(g)?
        };
        Ok((aoe_interaction(g, &self.aoe, f_a, f_o, f_e)?, trace))
    }

    pub fn snippet_forward<T: Real>(&self, g: &mut Graph<'_, T>, s: &SnippetBundle) -> Result<(Var, SnippetTrace)> {
        let env = g.constant(Tensor::vector(s.env.iter().map(|&v| T::lit(v as f64)).collect()))?;
        let actors = entity_input(g, self.config.actor_dim, &s.actors.data)?;
        let objects = entity_input(g, self.config.object_dim, &s.objects.data)?;
        self.snippet_forward_vars(g, env, actors, objects)
    }

    /// The `[d_f, T]` feature matrix of a video.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, video: &VideoFeatureSequence) -> Result<(Var, Vec<SnippetTrace>)> {
        self.check_video(video)?;
        if video.is_empty() {
            return Err(Error::EmptySet { op: "pmr_forward" });
        }
        let mut cols = Vec::with_capacity(video.len());
        let mut traces = Vec::with_capacity(video.len());
        for s in &video.snippets {
            let (f, tr) = self.snippet_forward(g, s)?;
            cols.push(f);
            traces.push(tr);
        }
        let rows = g.stack(&cols)?;
        Ok((g.transpose(rows)?, traces))
    }
}

/// Stacks `[f_a, f_o, f_e]`, encodes the three rows and mean-pools them.
pub fn aoe_interaction<T: Real>(g: &mut Graph<'_, T>, encoder: &Encoder, f_a: Var, f_o: Var, f_e: Var) -> Result<Var> {
    let stacked = g.stack(&[f_a, f_o, f_e])?;
    let enc = encoder.forward(g, stacked)?;
    g.mean(enc, 0)
}

/// Mean over the spatial axes of a `[C, spatial..]` feature map.
pub fn environment_feature<T: Real>(map: &Tensor<T>) -> Result<Vec<T>> {
    let s = map.shape();
    if s.is_empty() || map.is_empty() {
        return Err(Error::EmptySet { op: "environment_feature" });
    }
    let c = s[0];
    let per = map.len() / c;
    let n = T::lit(per as f64);
    Ok(map.data().chunks(per).map(|ch| ch.iter().copied().sum::<T>() / n).collect())
}
