//! End-to-end stages shared by the command line and the acceptance suite.
//! Every generator is derived from the configured master seed.

use crate::checkpoint::{Checkpoint, CheckpointMeta, ModelKind};
use crate::config::RunConfig;
use crate::diffusion::{train_items, Trainer};
use crate::gridworld::{generate_dataset, Dataset};
use crate::instr::Lexicon;
use crate::invdyn::train_invdyn;
use crate::nn::Denoiser;
use crate::util::{derive_seed, rng_for};
use crate::{Error, Result};

/// Seed streams under the master seed.
pub mod stream {
    pub const DATA: u64 = 1;
    pub const DENOISER: u64 = 2;
    pub const INVDYN: u64 = 3;
    pub const EVAL: u64 = 4;
}

/// The config with every derived seed filled in from the master seed.
pub fn effective(cfg: &RunConfig) -> RunConfig {
    let mut cfg = cfg.clone();
    // TOML integers are signed 64-bit
    let data = derive_seed(cfg.seeds.master, &[stream::DATA]) & i64::MAX as u64;
    cfg.data.seed = data;
    cfg.world.seed = data;
    cfg
}

pub fn eval_seed(cfg: &RunConfig, study: u64) -> u64 {
    derive_seed(cfg.seeds.master, &[stream::EVAL, study])
}

pub fn generate(cfg: &RunConfig, lex: &Lexicon) -> Result<Dataset> {
    generate_dataset(&cfg.world, lex, &cfg.data)
}

/// Hard error unless `ds` was generated under `cfg`.
pub fn check_dataset(cfg: &RunConfig, ds: &Dataset) -> Result<()> {
    let expected = cfg.data_digest();
    if ds.header.config_digest != expected {
        return Err(Error::ConfigMismatch {
            what: "dataset".into(),
            expected,
            found: ds.header.config_digest.clone(),
        });
    }
    Ok(())
}

/// Train a denoiser from scratch, or continue from `resume`, until
/// `stop_at` (default `cfg.train.steps`) optimizer steps have been taken.
pub fn train_denoiser(
    cfg: &RunConfig,
    lex: &Lexicon,
    ds: &Dataset,
    pooled: bool,
    resume: Option<&Checkpoint>,
    stop_at: Option<usize>,
    log: impl FnMut(usize, f32),
) -> Result<Checkpoint> {
    check_dataset(cfg, ds)?;
    let items = train_items(ds, lex, pooled)?;
    let sched = cfg.schedule.build()?;
    let prediction = cfg.network.prediction;
    let mut trainer = match resume {
        None => {
            let mut rng = rng_for(cfg.seeds.master, &[stream::DENOISER, pooled as u64]);
            let net = Denoiser::new(cfg.denoiser_shape(lex), &mut rng);
            Trainer::new(net, prediction, sched, cfg.train.lr, rng)
        }
        Some(ck) => {
            ck.check(ModelKind::Denoiser, lex.version_hash(), &cfg.model_digest())?;
            if ck.meta.pooled != pooled {
                return Err(Error::ConfigMismatch {
                    what: "resumed checkpoint pooling".into(),
                    expected: pooled.to_string(),
                    found: ck.meta.pooled.to_string(),
                });
            }
            let mut net = Denoiser::new(cfg.denoiser_shape(lex), &mut rng_for(0, &[]));
            ck.restore_params(&mut net)?;
            let opt = ck
                .restore_optimizer()
                .ok_or_else(|| Error::Format("checkpoint has no optimizer state".into()))?;
            let rng = ck
                .rng
                .clone()
                .ok_or_else(|| Error::Format("checkpoint has no generator state".into()))?;
            Trainer::from_parts(net, prediction, opt, sched, rng)
        }
    };
    trainer.fit_until(&items, &cfg.train, stop_at.unwrap_or(cfg.train.steps), 500, log)?;
    let meta = CheckpointMeta {
        kind: ModelKind::Denoiser,
        lexicon_hash: lex.version_hash().to_string(),
        config_digest: cfg.model_digest(),
        pooled,
        prediction,
        train_steps: trainer.opt.step,
    };
    Ok(Checkpoint::capture(meta, &trainer.net, Some(&trainer.opt), Some(&trainer.rng)))
}

pub fn train_inverse_dynamics(
    cfg: &RunConfig,
    lex: &Lexicon,
    ds: &Dataset,
    log: impl FnMut(usize, f32),
) -> Result<Checkpoint> {
    check_dataset(cfg, ds)?;
    let mut rng = rng_for(cfg.seeds.master, &[stream::INVDYN]);
    let model = train_invdyn(ds, &cfg.invdyn, &mut rng, log)?;
    let meta = CheckpointMeta {
        kind: ModelKind::InvDyn,
        lexicon_hash: lex.version_hash().to_string(),
        config_digest: cfg.invdyn_digest(),
        pooled: false,
        prediction: cfg.network.prediction,
        train_steps: cfg.invdyn.steps as u64,
    };
    Ok(Checkpoint::capture(meta, &model, None, Some(&rng)))
}
