//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "KBAN" | version u32
//! enc_layers dec_layers dim heads appearance_dim sc_hidden (u64 each)
//! knowledge_augmentation u8 | layer_norm u8 | init_seed u64
//! V u64 | O u64 | per class: count u64, verb ids u64...
//! tensor count u64 | per tensor: name len u32, name, rank u32, extents u64..., f64 payload
//! velocity flag u8 | per parameter (if set): f64 payload
//! iteration u64 | seed u64
//! crc32 of everything above, u32
//! ```
//!
//! Tensors include the two knowledge-base embedding tables under `kb.*` names.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kb::KnowledgeBase;
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"KBAN";
pub const VERSION: u32 = 1;

const KB_OBJECT: &str = "kb.object_embed";
const KB_VERB: &str = "kb.verb_embed";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    /// Completed training steps.
    pub iteration: u64,
    /// Seed of the training scene order.
    pub seed: u64,
    pub velocity: Option<Vec<Vec<f64>>>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn tensor(&mut self, name: &str, t: &Tensor) {
        self.u32(name.len() as u32);
        self.0.extend_from_slice(name.as_bytes());
        self.u32(t.rank() as u32);
        for &e in t.shape() {
            self.usize(e);
        }
        self.f64s(t.data());
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
            .ok_or_else(|| Error::Checkpoint(format!("unexpected end of data at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("size overflows usize".into()))
    }
    fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::Checkpoint(format!("invalid flag byte {b}"))),
        }
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("payload too large".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.usize()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} extents overflow")))?;
        let data = self.f64s(n)?;
        let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        Ok((name, t))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.model;
        let c = &m.config;
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        for v in [c.enc_layers, c.dec_layers, c.dim, c.heads, c.appearance_dim, c.sc_hidden] {
            w.usize(v);
        }
        w.u8(u8::from(c.knowledge_augmentation));
        w.u8(u8::from(c.layer_norm));
        w.u64(c.init_seed);
        w.usize(m.kb.num_verbs);
        w.usize(m.kb.num_object_classes);
        for verbs in m.kb.cooccur() {
            w.usize(verbs.len());
            for &v in verbs {
                w.usize(v);
            }
        }
        w.usize(m.params.len() + 2);
        w.tensor(KB_OBJECT, &m.kb.object_embed);
        w.tensor(KB_VERB, &m.kb.verb_embed);
        for (name, t) in m.params.iter() {
            w.tensor(name, t);
        }
        match &self.velocity {
            Some(vel) => {
                w.u8(1);
                for v in vel {
                    w.f64s(v);
                }
            }
            None => w.u8(0),
        }
        w.u64(self.iteration);
        w.u64(self.seed);
        let crc = crc32fast::hash(&w.0);
        w.u32(crc);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = r.usize()?;
        }
        let config = ModelConfig {
            enc_layers: dims[0],
            dec_layers: dims[1],
            dim: dims[2],
            heads: dims[3],
            appearance_dim: dims[4],
            sc_hidden: dims[5],
            knowledge_augmentation: r.bool()?,
            layer_norm: r.bool()?,
            init_seed: r.u64()?,
        };
        let num_verbs = r.usize()?;
        let num_classes = r.usize()?;
        if num_classes > body.len() {
            return Err(Error::Checkpoint(format!("implausible class count {num_classes}")));
        }
        let mut cooccur = Vec::with_capacity(num_classes);
        for _ in 0..num_classes {
            let n = r.usize()?;
            if n > num_verbs {
                return Err(Error::Checkpoint(format!("class lists {n} verbs of {num_verbs}")));
            }
            cooccur.push((0..n).map(|_| r.usize()).collect::<Result<Vec<_>>>()?);
        }
        let kb = KnowledgeBase::new(num_verbs, num_classes, cooccur)?;
        let mut model = Model::new(config, kb)?;
        let count = r.usize()?;
        if count != model.params.len() + 2 {
            return Err(Error::Checkpoint(format!(
                "{count} tensors stored, architecture has {}",
                model.params.len() + 2
            )));
        }
        for _ in 0..count {
            let (name, t) = r.tensor()?;
            let target = match name.as_str() {
                KB_OBJECT => Some(&mut model.kb.object_embed),
                KB_VERB => Some(&mut model.kb.verb_embed),
                _ => None,
            };
            match target {
                Some(slot) if slot.shape() == t.shape() => *slot = t,
                Some(slot) => {
                    return Err(Error::Checkpoint(format!(
                        "{name} has shape {:?}, expected {:?}",
                        t.shape(),
                        slot.shape()
                    )))
                }
                None => model
                    .params
                    .assign(&name, t)
                    .map_err(|e| Error::Checkpoint(e.to_string()))?,
            }
        }
        let velocity = if r.bool()? {
            Some(
                model
                    .params
                    .ids()
                    .map(|id| r.f64s(model.params.get(id).len()))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let iteration = r.u64()?;
        let seed = r.u64()?;
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Self {
            model,
            iteration,
            seed,
            velocity,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Fails unless the stored architecture and vocabulary sizes match `expected`.
    pub fn check_compatible(&self, expected: &ModelConfig, num_verbs: usize, num_object_classes: usize) -> Result<()> {
        let c = &self.model.config;
        let same_arch = (c.enc_layers, c.dec_layers, c.dim, c.heads, c.appearance_dim, c.sc_hidden)
            == (
                expected.enc_layers,
                expected.dec_layers,
                expected.dim,
                expected.heads,
                expected.appearance_dim,
                expected.sc_hidden,
            );
        if !same_arch || c.knowledge_augmentation != expected.knowledge_augmentation || c.layer_norm != expected.layer_norm {
            return Err(Error::Checkpoint(format!(
                "checkpoint hyperparameters {c:?} differ from configured {expected:?}"
            )));
        }
        if self.model.kb.num_verbs != num_verbs || self.model.kb.num_object_classes != num_object_classes {
            return Err(Error::Checkpoint(format!(
                "checkpoint has V={}, O={}; data has V={num_verbs}, O={num_object_classes}",
                self.model.kb.num_verbs, self.model.kb.num_object_classes
            )));
        }
        Ok(())
    }
}
