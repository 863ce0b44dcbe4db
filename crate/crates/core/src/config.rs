//! Run configuration: one TOML file drives every hyper-parameter.
//!
//! ```toml
//! seed = 7
//! [model.pmr]
//! fused_dim = 32
//! [model.bmm]
//! trunk_channels = [32, 32]
//! [train]
//! epochs = 30
//! lambda = 10.0
//! [post]
//! preset = "anet-tapg-snms"
//! ```
//!
//! Missing keys take their defaults; unknown keys are an error.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::inference::PostConfig;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    /// Frames per snippet.
    pub snippet_len: usize,
    /// Object rows kept per snippet by vocabulary selection.
    pub objects_k: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub post: PostConfig,
    pub eval: EvalConfig,
    pub synth: SynthSpec,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            snippet_len: 16,
            objects_k: 20,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            post: PostConfig::default(),
            eval: EvalConfig::default(),
            synth: SynthSpec::default(),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Config::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.snippet_len == 0 || self.objects_k == 0 {
            return Err(Error::Config("snippet_len and objects_k must be positive".into()));
        }
        self.model.pmr.validate()?;
        self.model.bmm.validate()?;
        self.train.validate()?;
        self.post.resolved()?;
        self.eval.validate()?;
        Ok(())
    }

    /// Small widths that train in seconds on one core, with synthetic data
    /// whose feature widths match the model.
    pub fn desk() -> Self {
        let mut c = Config::default();
        c.model.pmr.env_dim = 16;
        c.model.pmr.actor_dim = 16;
        c.model.pmr.object_dim = 16;
        c.model.pmr.fused_dim = 32;
        c.model.pmr.hidden_dim = 16;
        c.model.bmm.trunk_channels = [32, 32];
        c.model.bmm.boundary_channels = 32;
        c.model.bmm.samples = 8;
        c.model.bmm.proposal_channels = [32, 16, 16];
        c.synth.env_dim = 16;
        c.synth.actor_dim = 16;
        c.synth.object_dim = 16;
        c.synth.snippet_len = c.snippet_len;
        c.train.lr = Some(1e-3);
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = Config::default();
        assert_eq!(c.snippet_len, 16);
        assert_eq!(c.objects_k, 20);
        assert_eq!(c.train.lambda, 10.0);
        assert_eq!(c.model.bmm.max_duration, None);
        assert_eq!(c.train.adam().lr, 1e-4);
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = Config::desk();
        assert_eq!(Config::from_toml(&c.to_toml()).unwrap(), c);
        let partial = "seed = 9\n[train]\nepochs = 3\nprofile = \"thumos\"\n";
        let p = Config::from_toml(partial).unwrap();
        assert_eq!((p.seed, p.train.epochs), (9, 3));
        assert_eq!(p.train.adam().lr, 1e-3);
    }

    #[test]
    fn bad_files_are_rejected() {
        assert!(Config::from_toml("[train]\nepochz = 3\n").is_err());
        assert!(Config::from_toml("[post]\npreset = \"fast\"\n").is_err());
        assert!(Config::from_toml("[post.suppression]\nkind = \"soft\"\ntheta1 = 0.5\ntheta2 = 0.0\nsigma = 0.0\n").is_err());
        let ok = Config::from_toml("[post.suppression]\nkind = \"hard\"\nthreshold = 0.5\n").unwrap();
        assert!(ok.post.suppression.is_some());
    }
}
