//! The full network: per-snippet representation followed by boundary matching.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bmm::{Bmm, BmmConfig, BmmOutput, BmmVars};
use crate::data::VideoFeatureSequence;
use crate::error::Result;
use crate::pmr::{Pmr, PmrConfig, SnippetTrace};
use crate::real::Real;
use crate::tensor::checkpoint::{self, Record};
use crate::tensor::{Graph, ParamStore};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub pmr: PmrConfig,
    pub bmm: BmmConfig,
}

#[derive(Clone, Debug)]
pub struct AoeNet<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub pmr: Pmr,
    pub bmm: Bmm,
}

impl<T: Real> AoeNet<T> {
    /// A freshly initialized network; the same seed gives the same weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let pmr = Pmr::new(&mut store, config.pmr.clone(), &mut rng)?;
        let bmm = Bmm::new(&mut store, config.pmr.fused_dim, config.bmm.clone(), &mut rng)?;
        Ok(AoeNet { config, store, pmr, bmm })
    }

    pub fn forward<'a>(&self, g: &mut Graph<'a, T>, video: &VideoFeatureSequence) -> Result<(BmmVars, Vec<SnippetTrace>)> {
        let (features, traces) = self.pmr.forward(g, video)?;
        Ok((self.bmm.forward(g, features)?, traces))
    }

    pub fn predict(&self, video: &VideoFeatureSequence) -> Result<BmmOutput<T>> {
        let mut g = Graph::with_params(&self.store);
        let (vars, _) = self.forward(&mut g, video)?;
        Ok(BmmOutput::from_graph(&g, &vars))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write(path, &self.store.to_records())
    }

    /// Loads weights from `records`, ignoring records that are not parameters.
    pub fn load_records(&mut self, records: &[Record]) -> Result<()> {
        self.store.load_records(records)
    }

    pub fn load(config: ModelConfig, path: &Path) -> Result<Self> {
        let mut net = AoeNet::new(config, 0)?;
        net.load_records(&checkpoint::read(path)?)?;
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthSpec};

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            pmr: PmrConfig {
                env_dim: 4,
                actor_dim: 4,
                object_dim: 4,
                fused_dim: 6,
                hidden_dim: 5,
                ..PmrConfig::default()
            },
            bmm: BmmConfig {
                trunk_channels: [6, 5],
                boundary_channels: 4,
                samples: 3,
                proposal_channels: [6, 4, 4],
                max_duration: None,
            },
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions() {
        let spec = SynthSpec {
            n_videos: 1,
            t_min: 8,
            t_max: 8,
            env_dim: 4,
            actor_dim: 4,
            object_dim: 4,
            action_len_min: 2,
            action_len_max: 3,
            ..SynthSpec::default()
        };
        let (_, feats) = synth_generate(1, &spec).unwrap();
        let net = AoeNet::<f32>::new(tiny_config(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        net.save(&p).unwrap();
        let back = AoeNet::<f32>::load(tiny_config(), &p).unwrap();
        assert_eq!(net.predict(&feats[0]).unwrap(), back.predict(&feats[0]).unwrap());
        let other = AoeNet::<f32>::new(tiny_config(), 6).unwrap();
        assert_ne!(net.predict(&feats[0]).unwrap(), other.predict(&feats[0]).unwrap());
    }
}
