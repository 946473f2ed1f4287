//! Binary checkpoints.
//!
//! ```text
//! "MALTCKPT"                       8 bytes
//! version                          u32 LE
//! meta length, meta JSON (UTF-8)   u64 LE + bytes
//! record count                     u64 LE
//! per record:
//!   name length, name              u32 LE + bytes
//!   rank                           u32 LE
//!   extents                        rank × u64 LE
//!   payload                        Π extents × f64 LE
//! ```
//!
//! Records are written in the order they were added. Loading rejects a wrong
//! magic or version, trailing bytes, and any record cut short.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{LatentCodec, LatentNorm};
use crate::diffusion::{AdamW, Trainer};
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::model::{MaltModel, ModelConfig};
use crate::numerics::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"MALTCKPT";
pub const VERSION: u32 = 1;

const OPT_M: &str = "opt.m.";
const OPT_V: &str = "opt.v.";
const NORM_MEAN: &str = "codec.norm.mean";
const NORM_STD: &str = "codec.norm.std";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Codec,
    Model,
    Samples,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: CheckpointKind,
    /// Training steps completed.
    pub step: u64,
    /// Optimizer updates applied (differs from `step` only for codec runs).
    pub opt_step: u64,
    pub config: RunConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
}

fn integrity(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(integrity(format!(
                "truncated checkpoint: {what} needs {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| integrity(format!("{what} overflows")))
    }
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta) -> Self {
        Self {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_string(&self.meta)?;
        let payload: usize = self.tensors.iter().map(|(n, t)| n.len() + 8 * (t.rank() + t.len()) + 8).sum();
        let mut out = Vec::with_capacity(28 + meta.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8, "magic").ok() != Some(&MAGIC[..]) {
            return Err(integrity("not a checkpoint: bad magic (expected \"MALTCKPT\")"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(integrity(format!(
                "unsupported checkpoint version {version} (this build reads version {VERSION})"
            )));
        }
        let meta_len = r.len("meta length")?;
        let meta_text = std::str::from_utf8(r.take(meta_len, "meta")?)
            .map_err(|_| integrity("checkpoint meta is not UTF-8"))?;
        let meta: CheckpointMeta = serde_json::from_str(meta_text)?;
        let count = r.len("record count")?;
        let mut tensors = Vec::new();
        for i in 0..count {
            let name_len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| integrity(format!("record {i} name is not UTF-8")))?
                .to_string();
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(r.len("extent")?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| integrity(format!("record `{name}` is impossibly large")))?;
            let bytes = r.take(n, "payload")?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != buf.len() {
            return Err(integrity(format!("{} trailing bytes after the last record", buf.len() - r.pos)));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    fn store_with(&self, keep: impl Fn(&str) -> bool) -> Result<ParamStore> {
        let mut ps = ParamStore::new();
        for (name, t) in &self.tensors {
            if keep(name) {
                ps.add(name.clone(), t.clone())?;
            }
        }
        Ok(ps)
    }

    fn expect_kind(&self, kinds: &[CheckpointKind]) -> Result<()> {
        if !kinds.contains(&self.meta.kind) {
            return Err(Error::Config(format!(
                "expected a {kinds:?} checkpoint, found {:?}",
                self.meta.kind
            )));
        }
        Ok(())
    }
}

fn push_codec(ck: &mut Checkpoint, codec: &LatentCodec) {
    for (_, name, t) in codec.params().iter() {
        ck.push(name, t.clone());
    }
    ck.push(NORM_MEAN, codec.norm().mean.clone());
    ck.push(NORM_STD, codec.norm().std.clone());
}

fn is_codec_param(name: &str) -> bool {
    name.starts_with("codec.") && name != NORM_MEAN && name != NORM_STD
}

pub fn codec_checkpoint(config: &RunConfig, codec: &LatentCodec, steps: u64) -> Checkpoint {
    let mut ck = Checkpoint::new(CheckpointMeta {
        kind: CheckpointKind::Codec,
        step: steps,
        opt_step: steps,
        config: config.clone(),
    });
    push_codec(&mut ck, codec);
    ck
}

/// Trainer parameters, optimizer moments and the codec they were trained on.
pub fn model_checkpoint(config: &RunConfig, trainer: &Trainer, codec: &LatentCodec) -> Checkpoint {
    let mut ck = Checkpoint::new(CheckpointMeta {
        kind: CheckpointKind::Model,
        step: trainer.step as u64,
        opt_step: trainer.opt.steps_taken(),
        config: config.clone(),
    });
    let params = trainer.model.params();
    for (_, name, t) in params.iter() {
        ck.push(name, t.clone());
    }
    let (m, v) = trainer.opt.moments();
    for ((_, name, _), t) in params.iter().zip(m) {
        ck.push(format!("{OPT_M}{name}"), t.clone());
    }
    for ((_, name, _), t) in params.iter().zip(v) {
        ck.push(format!("{OPT_V}{name}"), t.clone());
    }
    push_codec(&mut ck, codec);
    ck
}

pub fn samples_checkpoint(config: &RunConfig, latents: &[Tensor]) -> Checkpoint {
    let mut ck = Checkpoint::new(CheckpointMeta {
        kind: CheckpointKind::Samples,
        step: 0,
        opt_step: 0,
        config: config.clone(),
    });
    for (i, z) in latents.iter().enumerate() {
        ck.push(format!("sample.{i}"), z.clone());
    }
    ck
}

pub fn restore_codec(ck: &Checkpoint) -> Result<LatentCodec> {
    ck.expect_kind(&[CheckpointKind::Codec, CheckpointKind::Model])?;
    let mut codec = LatentCodec::from_params(ck.meta.config.codec.clone(), ck.store_with(is_codec_param)?)?;
    let (mean, std) = match (ck.get(NORM_MEAN), ck.get(NORM_STD)) {
        (Some(m), Some(s)) => (m.clone(), s.clone()),
        _ => return Err(integrity("checkpoint has no latent normalization")),
    };
    codec.set_norm(LatentNorm { mean, std })?;
    Ok(codec)
}

fn check_model_config(ck: &Checkpoint, expected: &ModelConfig) -> Result<()> {
    ck.expect_kind(&[CheckpointKind::Model])?;
    if &ck.meta.config.model != expected {
        return Err(Error::Config(format!(
            "checkpoint model config {:?} does not match the requested {:?}",
            ck.meta.config.model, expected
        )));
    }
    Ok(())
}

fn is_model_param(name: &str) -> bool {
    !name.starts_with("codec.") && !name.starts_with(OPT_M) && !name.starts_with(OPT_V)
}

/// Rebuilds the model; the stored configuration must equal `expected`.
pub fn restore_model(ck: &Checkpoint, expected: &ModelConfig) -> Result<MaltModel> {
    check_model_config(ck, expected)?;
    MaltModel::from_params(expected.clone(), ck.store_with(is_model_param)?)
}

/// Rebuilds a trainer positioned right after the saved step. `config` must
/// agree with the checkpoint on the model architecture.
pub fn restore_trainer(ck: &Checkpoint, config: &RunConfig) -> Result<Trainer> {
    check_model_config(ck, &config.model)?;
    let model = restore_model(ck, &config.model)?;
    let mut m = Vec::new();
    let mut v = Vec::new();
    for (_, name, _) in model.params().iter() {
        let get = |prefix: &str| {
            ck.get(&format!("{prefix}{name}"))
                .cloned()
                .ok_or_else(|| integrity(format!("missing optimizer state for `{name}`")))
        };
        m.push(get(OPT_M)?);
        v.push(get(OPT_V)?);
    }
    let mut trainer = Trainer::new(model, config.effective().train)?;
    let mut opt = AdamW::new(trainer.config.optimizer.clone(), trainer.model.params());
    opt.restore(ck.meta.opt_step, m, v)?;
    trainer.opt = opt;
    trainer.step = ck.meta.step as usize;
    Ok(trainer)
}
