//! Run configuration: one TOML file drives every stage.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::{GuidanceConfig, NoiseSchedule, Prediction, TrainConfig};
use crate::encoding::{frame_dim, sketch_dim, traj_dim};
use crate::gridworld::{GenerationParams, WorldConfig};
use crate::instr::{Lexicon, LexiconSpec};
use crate::invdyn::{ExecutorConfig, InvDynConfig};
use crate::nn::DenoiserShape;
use crate::util::digest_json;
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: 1e-4,
            beta_end: 0.2,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        Ok(NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub embed: usize,
    pub time_features: usize,
    pub time_embed: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub prediction: Prediction,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            embed: 64,
            time_features: 32,
            time_embed: 32,
            hidden: 256,
            hidden_layers: 3,
            prediction: Prediction::Clean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Episodes per (model, split) cell of the generalization study.
    pub episodes_per_cell: usize,
    pub multimodal_episodes: usize,
    pub execution_episodes: usize,
    pub oracle_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes_per_cell: 100,
            multimodal_episodes: 100,
            execution_episodes: 200,
            oracle_samples: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeedConfig {
    pub master: u64,
}

impl Default for SeedConfig {
    fn default() -> Self {
        Self { master: 20240607 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub seeds: SeedConfig,
    /// Optional lexicon file; the inline `lexicon` table is used otherwise.
    pub lexicon_path: Option<String>,
    pub lexicon: LexiconSpec,
    pub world: WorldConfig,
    pub data: GenerationParams,
    pub schedule: ScheduleConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub guidance: GuidanceConfig,
    pub invdyn: InvDynConfig,
    pub executor: ExecutorConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg: RunConfig = toml::from_str(&text)?;
        if let Some(lp) = &cfg.lexicon_path {
            let lp = path.parent().unwrap_or(Path::new(".")).join(lp);
            cfg.lexicon = toml::from_str(&std::fs::read_to_string(lp)?)?;
            cfg.lexicon_path = None;
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn lexicon(&self) -> Result<Lexicon> {
        Ok(Lexicon::new(&self.lexicon)?)
    }

    /// Digest of everything.
    pub fn digest(&self) -> String {
        digest_json(self)
    }

    /// Digest a dataset is produced under.
    pub fn data_digest(&self) -> String {
        digest_json(&(&self.world, &self.data))
    }

    /// Digest of what fixes the meaning of denoiser parameters.
    pub fn model_digest(&self) -> String {
        digest_json(&(&self.lexicon, &self.world, &self.schedule, &self.network))
    }

    pub fn invdyn_digest(&self) -> String {
        digest_json(&(&self.world, &self.invdyn.hidden, &self.invdyn.layers))
    }

    pub fn denoiser_shape(&self, lex: &Lexicon) -> DenoiserShape {
        let n = &self.network;
        DenoiserShape {
            vocab: lex.vocabulary().len(),
            embed: n.embed,
            time_features: n.time_features,
            time_embed: n.time_embed,
            hidden: n.hidden,
            hidden_layers: n.hidden_layers,
            traj_dim: traj_dim(&self.world),
            frame_dim: frame_dim(&self.world),
            sketch_dim: sketch_dim(&self.world),
            steps: self.schedule.steps,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_preserves_digest() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg: RunConfig = toml::from_str("[seeds]\nmaster = 3\n").unwrap();
        assert_eq!(cfg.seeds.master, 3);
        assert_eq!(cfg.world, WorldConfig::default());
    }

    #[test]
    fn digests_track_their_sections() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.guidance.w = 2.0;
        assert_eq!(a.model_digest(), b.model_digest());
        assert_ne!(a.digest(), b.digest());
        b.network.hidden = 8;
        assert_ne!(a.model_digest(), b.model_digest());
        assert_eq!(a.data_digest(), b.data_digest());
    }

    #[test]
    fn data_digest_matches_generated_header() {
        let mut cfg = RunConfig::default();
        cfg.data.n_per_task = 1;
        cfg.data.n_eval_per_task = 1;
        let lex = cfg.lexicon().unwrap();
        let ds = crate::gridworld::generate_dataset(&cfg.world, &lex, &cfg.data).unwrap();
        assert_eq!(ds.header.config_digest, cfg.data_digest());
    }
}
