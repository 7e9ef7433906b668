//! Versioned binary checkpoints.
//!
//! Layout, all integers little endian:
//!
//! ```text
//! magic "CWCKPT\0\0" | u32 schema | u32 meta length | meta (JSON)
//! u32 tensor count | per tensor: u16 name length, name, u8 rank, u32 dims
//! f32 parameters, row major, in table order
//! u8 optimizer flag [f32 lr beta1 beta2 eps | u64 step | f32 m | f32 v]
//! u8 rng flag [32 byte seed | u64 stream | u128 word position]
//! ```

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::diffusion::Prediction;
use crate::instr::Lexicon;
use crate::invdyn::InvDynModel;
use crate::nn::{Adam, Denoiser, ParamSet};
use crate::util::rng_for;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CWCKPT\0\0";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Denoiser,
    InvDyn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: ModelKind,
    pub lexicon_hash: String,
    /// Digest of the config sections that fix what the parameters mean.
    pub config_digest: String,
    /// All tokens pooled into one primitive (monolithic baseline).
    pub pooled: bool,
    pub prediction: Prediction,
    pub train_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorEntry {
    pub name: String,
    pub dims: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub table: Vec<TensorEntry>,
    pub params: Vec<Vec<f32>>,
    pub optimizer: Option<OptimizerState>,
    pub rng: Option<ChaCha8Rng>,
}

fn table_of<P: ParamSet<f32>>(model: &P) -> Vec<TensorEntry> {
    let mut table = Vec::new();
    model.visit(&mut |name, dims, _| {
        table.push(TensorEntry {
            name: name.to_string(),
            dims: dims.to_vec(),
        })
    });
    table
}

impl Checkpoint {
    pub fn capture<P: ParamSet<f32>>(
        meta: CheckpointMeta,
        model: &P,
        opt: Option<&Adam<f32>>,
        rng: Option<&ChaCha8Rng>,
    ) -> Self {
        Self {
            meta,
            table: table_of(model),
            params: model.flatten(),
            optimizer: opt.map(|o| OptimizerState {
                lr: o.lr,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                step: o.step,
                m: o.m.clone(),
                v: o.v.clone(),
            }),
            rng: rng.cloned(),
        }
    }

    /// Hard error unless the checkpoint was produced for this kind of model,
    /// this lexicon and this config digest.
    pub fn check(&self, kind: ModelKind, lexicon_hash: &str, digest: &str) -> Result<()> {
        if self.meta.kind != kind {
            return Err(Error::ConfigMismatch {
                what: "checkpoint kind".into(),
                expected: format!("{kind:?}"),
                found: format!("{:?}", self.meta.kind),
            });
        }
        if self.meta.lexicon_hash != lexicon_hash {
            return Err(Error::ConfigMismatch {
                what: "checkpoint lexicon".into(),
                expected: lexicon_hash.into(),
                found: self.meta.lexicon_hash.clone(),
            });
        }
        if self.meta.config_digest != digest {
            return Err(Error::ConfigMismatch {
                what: "checkpoint".into(),
                expected: digest.into(),
                found: self.meta.config_digest.clone(),
            });
        }
        Ok(())
    }

    /// Copy parameters into `model`, whose tensor table must match exactly.
    pub fn restore_params<P: ParamSet<f32>>(&self, model: &mut P) -> Result<()> {
        let table = table_of(model);
        if table != self.table {
            return Err(Error::Format("checkpoint tensor table does not match the model".into()));
        }
        let mut k = 0;
        model.visit_mut(&mut |_, _, dst| {
            dst.copy_from_slice(&self.params[k]);
            k += 1;
        });
        Ok(())
    }

    pub fn restore_optimizer(&self) -> Option<Adam<f32>> {
        self.optimizer.as_ref().map(|o| Adam {
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            step: o.step,
            m: o.m.clone(),
            v: o.v.clone(),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&SCHEMA_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.table.len() as u32).to_le_bytes());
        for t in &self.table {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.dims.len() as u8);
            for &d in &t.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        let put = |out: &mut Vec<u8>, xs: &[Vec<f32>]| {
            for x in xs.iter().flatten() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        };
        put(&mut out, &self.params);
        match &self.optimizer {
            None => out.push(0),
            Some(o) => {
                out.push(1);
                for x in [o.lr, o.beta1, o.beta2, o.eps] {
                    out.extend_from_slice(&x.to_le_bytes());
                }
                out.extend_from_slice(&o.step.to_le_bytes());
                put(&mut out, &o.m);
                put(&mut out, &o.v);
            }
        }
        match &self.rng {
            None => out.push(0),
            Some(r) => {
                out.push(1);
                out.extend_from_slice(&r.get_seed());
                out.extend_from_slice(&r.get_stream().to_le_bytes());
                out.extend_from_slice(&r.get_word_pos().to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "checkpoint schema version {version}, expected {SCHEMA_VERSION}"
            )));
        }
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
        let n = r.u32()? as usize;
        let mut table = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let len = u16::from_le_bytes(r.array()?) as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = r.take(1)?[0] as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            table.push(TensorEntry { name, dims });
        }
        let sizes: Vec<usize> = table.iter().map(|t| t.dims.iter().product()).collect();
        let params = r.tensors(&sizes)?;
        let optimizer = match r.take(1)?[0] {
            0 => None,
            _ => {
                let lr = r.f32()?;
                let beta1 = r.f32()?;
                let beta2 = r.f32()?;
                let eps = r.f32()?;
                let step = u64::from_le_bytes(r.array()?);
                let m = r.tensors(&sizes)?;
                let v = r.tensors(&sizes)?;
                Some(OptimizerState {
                    lr,
                    beta1,
                    beta2,
                    eps,
                    step,
                    m,
                    v,
                })
            }
        };
        let rng = match r.take(1)?[0] {
            0 => None,
            _ => {
                use rand::SeedableRng;
                let seed: [u8; 32] = r.array()?;
                let stream = u64::from_le_bytes(r.array()?);
                let word_pos = u128::from_le_bytes(r.array()?);
                let mut rng = ChaCha8Rng::from_seed(seed);
                rng.set_stream(stream);
                rng.set_word_pos(word_pos);
                Some(rng)
            }
        };
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            meta,
            table,
            params,
            optimizer,
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    fn tensors(&mut self, sizes: &[usize]) -> Result<Vec<Vec<f32>>> {
        sizes
            .iter()
            .map(|&n| {
                let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
                Ok(raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect())
            })
            .collect()
    }
}

/// Load a denoiser checkpoint produced under `cfg`.
pub fn load_denoiser(path: &Path, cfg: &RunConfig, lex: &Lexicon) -> Result<(Denoiser<f32>, Checkpoint)> {
    let ck = Checkpoint::load(path)?;
    ck.check(ModelKind::Denoiser, lex.version_hash(), &cfg.model_digest())?;
    let mut net = Denoiser::new(cfg.denoiser_shape(lex), &mut rng_for(0, &[]));
    ck.restore_params(&mut net)?;
    Ok((net, ck))
}

/// Load an inverse-dynamics checkpoint produced under `cfg`.
pub fn load_invdyn(path: &Path, cfg: &RunConfig, lex: &Lexicon) -> Result<InvDynModel> {
    let ck = Checkpoint::load(path)?;
    ck.check(ModelKind::InvDyn, lex.version_hash(), &cfg.invdyn_digest())?;
    let mut model = InvDynModel::new(&cfg.world, &cfg.invdyn, &mut rng_for(0, &[]));
    ck.restore_params(&mut model)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::DenoiserShape;
    use rand::{Rng, SeedableRng};

    fn tiny() -> Denoiser<f32> {
        let shape = DenoiserShape {
            vocab: 5,
            embed: 3,
            time_features: 4,
            time_embed: 3,
            hidden: 6,
            hidden_layers: 1,
            traj_dim: 8,
            frame_dim: 4,
            sketch_dim: 2,
            steps: 10,
        };
        Denoiser::new(shape, &mut ChaCha8Rng::seed_from_u64(1))
    }

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            kind: ModelKind::Denoiser,
            lexicon_hash: "lex".into(),
            config_digest: "cfg".into(),
            pooled: false,
            prediction: Prediction::Clean,
            train_steps: 3,
        }
    }

    #[test]
    fn round_trip_restores_everything() {
        let net = tiny();
        let mut opt = Adam::new(&net, 0.01);
        opt.step = 7;
        opt.m[0][0] = 0.5;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let _: u64 = rng.random();
        let ck = Checkpoint::capture(meta(), &net, Some(&opt), Some(&rng));
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);

        let mut other = Denoiser::new(net.shape, &mut ChaCha8Rng::seed_from_u64(2));
        back.restore_params(&mut other).unwrap();
        assert_eq!(other, net);
        let opt2 = back.restore_optimizer().unwrap();
        assert_eq!((opt2.step, opt2.m.clone()), (opt.step, opt.m.clone()));
        let mut r2 = back.rng.unwrap();
        assert_eq!(r2.random::<u64>(), rng.random::<u64>());
    }

    #[test]
    fn mismatches_are_hard_errors() {
        let ck = Checkpoint::capture(meta(), &tiny(), None, None);
        assert!(ck.check(ModelKind::Denoiser, "lex", "cfg").is_ok());
        for (kind, lex, cfg) in [
            (ModelKind::InvDyn, "lex", "cfg"),
            (ModelKind::Denoiser, "other", "cfg"),
            (ModelKind::Denoiser, "lex", "other"),
        ] {
            assert!(matches!(ck.check(kind, lex, cfg), Err(Error::ConfigMismatch { .. })));
        }
    }

    #[test]
    fn rejects_damaged_files() {
        let bytes = Checkpoint::capture(meta(), &tiny(), None, None).to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
        let mut future = bytes;
        future[8] = 99;
        assert!(Checkpoint::from_bytes(&future).is_err());
    }

    #[test]
    fn table_mismatch_is_rejected() {
        let ck = Checkpoint::capture(meta(), &tiny(), None, None);
        let mut shape = tiny().shape;
        shape.hidden = 7;
        let mut other = Denoiser::new(shape, &mut ChaCha8Rng::seed_from_u64(2));
        assert!(ck.restore_params(&mut other).is_err());
    }
}
