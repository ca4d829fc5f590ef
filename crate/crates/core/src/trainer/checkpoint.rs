//! Binary checkpoint: `"DCQC"`, version `u32`, config JSON (`u32` length +
//! bytes), block count `u32`, named `f64` arrays, trailing CRC32 of every
//! preceding byte. All integers little-endian.
//!
//! Array block: name length `u16`, name bytes, rank `u8`, each dim `u32`,
//! then the payload.

use std::fs;
use std::path::Path;

use super::{HeadState, OptimizerState, Trainer};
use crate::baseline::FcHead;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::queue::{ClassQueue, EmaGenerator};

const MAGIC: &[u8; 4] = b"DCQC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub arrays: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Integrity(format!("missing array {name:?}")))
    }

    fn group(&self, prefix: &str) -> Vec<Tensor> {
        let p = format!("{prefix}/");
        self.arrays
            .iter()
            .filter(|(n, _)| n.starts_with(&p))
            .map(|(_, t)| t.clone())
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let cfg = serde_json::to_vec(&self.config)?;
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, t) in &self.arrays {
            let nb = name.as_bytes();
            let name_len = u16::try_from(nb.len())
                .map_err(|_| Error::contract(format!("array name too long: {name}")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(nb);
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::Integrity("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(Error::Integrity("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let cfg_len = r.u32()? as usize;
        let config: RunConfig = serde_json::from_slice(r.take(cfg_len)?)?;
        let n = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(n);
        for _ in 0..n {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Integrity("array name is not utf-8".into()))?;
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let len: usize = shape.iter().product();
            let payload = r.take(len * 8)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != body.len() {
            return Err(Error::Integrity("trailing bytes after arrays".into()));
        }
        Ok(Self { config, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Integrity("unexpected end of checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn vector(values: impl IntoIterator<Item = f64>) -> Tensor {
    let data: Vec<f64> = values.into_iter().collect();
    Tensor::new(vec![data.len()], data).expect("rank-1")
}

fn named(prefix: &str, tensors: &[&Tensor]) -> Vec<(String, Tensor)> {
    tensors
        .iter()
        .enumerate()
        .map(|(i, t)| (format!("{prefix}/{i:03}"), (*t).clone()))
        .collect()
}

impl Trainer {
    /// Snapshot of all state needed to continue bit-exactly.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut arrays = vec![(
            "counters".to_string(),
            vector([self.epoch as f64, self.step as f64, self.sampler.counter as f64]),
        )];
        arrays.extend(named("extractor", &self.extractor.tensors()));
        arrays.extend(named(
            "extractor_velocity",
            &self.velocity.velocity.iter().collect::<Vec<_>>(),
        ));
        match &self.head {
            HeadState::Queue { generator, queue } => {
                arrays.extend(named("generator", &generator.shadow().tensors()));
                arrays.push(("queue/weights".into(), queue.weights().clone()));
                arrays.push((
                    "queue/labels".into(),
                    vector(queue.labels().iter().map(|&l| l as f64)),
                ));
                arrays.push(("queue/cursor".into(), vector([queue.cursor() as f64])));
            }
            HeadState::Fc { head, velocity, .. } => {
                arrays.push(("head/weight".into(), head.weight.clone()));
                arrays.push(("head/velocity".into(), velocity.velocity[0].clone()));
            }
        }
        Checkpoint {
            config: self.config.clone(),
            arrays,
        }
    }

    /// Rebuilds a trainer from a checkpoint. Nothing is returned unless
    /// every array loads.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Trainer::from_config(&ckpt.config)?;
        let counters = ckpt.get("counters")?.data();
        if counters.len() != 3 {
            return Err(Error::Integrity("counters array must hold 3 values".into()));
        }
        t.epoch = counters[0] as usize;
        t.step = counters[1] as u64;
        t.sampler.counter = counters[2] as u64;
        t.extractor.load_tensors(ckpt.group("extractor"))?;
        let vel = ckpt.group("extractor_velocity");
        let mut fresh = OptimizerState::zeros_like(t.extractor.tensors());
        load_state(&mut fresh, vel)?;
        t.velocity = fresh;
        match &mut t.head {
            HeadState::Queue { generator, queue } => {
                let mut shadow = t.extractor.clone();
                shadow.load_tensors(ckpt.group("generator"))?;
                *generator = EmaGenerator::from_parts(shadow, generator.alpha())?;
                let labels = ckpt.get("queue/labels")?.data().iter().map(|&v| v as i64).collect();
                let cursor = ckpt.get("queue/cursor")?.data()[0] as usize;
                let restored = ClassQueue::from_parts(ckpt.get("queue/weights")?.clone(), labels, cursor)?;
                if restored.capacity() != queue.capacity() || restored.dim() != queue.dim() {
                    return Err(Error::Integrity("queue shape differs from config".into()));
                }
                *queue = restored;
            }
            HeadState::Fc { head, velocity, .. } => {
                let w = ckpt.get("head/weight")?.clone();
                if w.shape() != head.weight.shape() {
                    return Err(Error::Integrity("head shape differs from config".into()));
                }
                *head = FcHead { weight: w };
                load_state(velocity, vec![ckpt.get("head/velocity")?.clone()])?;
            }
        }
        Ok(t)
    }
}

fn load_state(state: &mut OptimizerState, tensors: Vec<Tensor>) -> Result<()> {
    if tensors.len() != state.velocity.len() {
        return Err(Error::Integrity("optimizer buffer count differs".into()));
    }
    for (dst, src) in state.velocity.iter_mut().zip(tensors) {
        if dst.shape() != src.shape() {
            return Err(Error::Integrity("optimizer buffer shape differs".into()));
        }
        *dst = src;
    }
    Ok(())
}
