//! Full model state: frozen towers with adapters, projection heads and the
//! per-category modality means kept for pseudo-feature replay.
//!
//! Checkpoints use a small binary container:
//!
//! ```text
//! magic    4 bytes  "SALN"
//! version  u32 LE   currently 1
//! blocks   repeated until end of file:
//!   name_len  u32 LE
//!   name      name_len bytes, UTF-8
//!   ndim      u32 LE
//!   dims      ndim x u64 LE
//!   values    prod(dims) x f64 LE
//! ```
//!
//! Category means are stored as blocks named `means.text.<c>` and
//! `means.video.<c>` with shape `[d]`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::diffmath::Tensor;
use crate::encoders::{
    EncoderConfig, Param, Parameterized, ProjectionHeads, TextEncoderState, VideoEncoderState,
};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SALN";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: EncoderConfig,
    pub text: TextEncoderState,
    pub video: VideoEncoderState,
    pub heads: ProjectionHeads,
    /// Normalized text category means, keyed by category.
    pub text_means: BTreeMap<usize, Vec<f64>>,
    /// Normalized video category means, keyed by category.
    pub video_means: BTreeMap<usize, Vec<f64>>,
}

/// Immutable copy of a model taken at a task boundary.
pub type Snapshot = Arc<ModelState>;

impl ModelState {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            text: TextEncoderState::new(&config, seed)?,
            video: VideoEncoderState::new(&config, seed)?,
            heads: ProjectionHeads::new(&config, seed),
            config,
            text_means: BTreeMap::new(),
            video_means: BTreeMap::new(),
        })
    }

    pub fn snapshot(&self) -> Snapshot {
        Arc::new(self.clone())
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.text.params();
        v.extend(self.video.params());
        v.extend(self.heads.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.text.params_mut();
        v.extend(self.video.params_mut());
        v.extend(self.heads.params_mut());
        v
    }

    pub fn trainable_count(&self) -> usize {
        self.params()
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// SHA-256 over names, shapes and value bits of the frozen tensors.
    pub fn frozen_checksum(&self) -> String {
        checksum(self.params().into_iter().filter(|p| !p.trainable))
    }

    /// SHA-256 over every tensor and stored category mean.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(checksum(self.params().into_iter()).as_bytes());
        for (tag, means) in [("text", &self.text_means), ("video", &self.video_means)] {
            for (c, m) in means {
                h.update(tag.as_bytes());
                h.update((*c as u64).to_le_bytes());
                for v in m {
                    h.update(v.to_bits().to_le_bytes());
                }
            }
        }
        hex(&h.finalize())
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for p in self.params() {
            write_block(&mut w, &p.name, &p.value)?;
        }
        for (tag, means) in [("text", &self.text_means), ("video", &self.video_means)] {
            for (c, m) in means {
                write_block(&mut w, &format!("means.{tag}.{c}"), &Tensor::vector(m.clone()))?;
            }
        }
        Ok(())
    }

    /// Loads tensors into a model built from `config`. Every parameter of
    /// that architecture must be present with a matching shape.
    pub fn read_checkpoint<R: Read>(config: EncoderConfig, mut r: R) -> Result<Self> {
        let blocks = read_blocks(&mut r)?;
        let mut model = Self::new(config, 0)?;
        let mut index: BTreeMap<String, Tensor> = blocks.into_iter().collect();
        for p in model.params_mut() {
            let t = index
                .remove(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing block {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "block {} has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t;
        }
        for (name, t) in index {
            let parts: Vec<&str> = name.split('.').collect();
            match parts.as_slice() {
                ["means", tag, c] => {
                    let c: usize = c
                        .parse()
                        .map_err(|_| Error::Checkpoint(format!("bad category in {name}")))?;
                    let v = t.into_data();
                    match *tag {
                        "text" => model.text_means.insert(c, v),
                        "video" => model.video_means.insert(c, v),
                        _ => return Err(Error::Checkpoint(format!("unknown block {name}"))),
                    };
                }
                _ => return Err(Error::Checkpoint(format!("unknown block {name}"))),
            }
        }
        Ok(model)
    }
}

fn checksum<'a>(params: impl Iterator<Item = &'a Param>) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update((p.name.len() as u64).to_le_bytes());
        h.update(p.name.as_bytes());
        for d in p.value.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_block<W: Write>(w: &mut W, name: &str, t: &Tensor) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for d in t.shape() {
        w.write_all(&(*d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint(format!("truncated {what}")))
}

/// Reads every named block of a checkpoint stream.
pub fn read_blocks<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    read_exact_or(r, &mut magic, "header")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut u32b = [0u8; 4];
    read_exact_or(r, &mut u32b, "header")?;
    let version = u32::from_le_bytes(u32b);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut blocks = Vec::new();
    loop {
        match r.read(&mut u32b[..1])? {
            0 => break,
            _ => read_exact_or(r, &mut u32b[1..], "block header")?,
        }
        let name_len = u32::from_le_bytes(u32b) as usize;
        let mut name = vec![0u8; name_len];
        read_exact_or(r, &mut name, "block name")?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("non UTF-8 name".into()))?;
        read_exact_or(r, &mut u32b, "block rank")?;
        let ndim = u32::from_le_bytes(u32b) as usize;
        let mut shape = Vec::with_capacity(ndim);
        let mut u64b = [0u8; 8];
        for _ in 0..ndim {
            read_exact_or(r, &mut u64b, "block shape")?;
            shape.push(u64::from_le_bytes(u64b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            read_exact_or(r, &mut u64b, "block values")?;
            data.push(f64::from_le_bytes(u64b));
        }
        blocks.push((name, Tensor::new(shape, data)?));
    }
    Ok(blocks)
}
