//! Sectioned binary checkpoint container; the byte layout is described in
//! `docs/checkpoint-format.md`.
//!
//! Every number is little-endian. Sections the reader does not know are
//! skipped, so a checkpoint with optional sections still loads as a plain
//! model.

use std::collections::{BTreeMap, BTreeSet};

use lfr_core::fisher::FisherDiag;
use lfr_core::model::{Model, ModelConfig};
use lfr_core::region::{RegionMethod, RegionProvenance, UpdateRegion};
use lfr_core::tasks::{World, BOS, EOS, PAD, UNK};
use lfr_core::tensor::{AdamState, ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MAGIC: &[u8; 8] = b"LFRCKPT\0";
pub const VERSION: u32 = 1;
const CHECKSUM_KIND: &[u8; 4] = b"SUM!";

const CONF: &[u8; 4] = b"CONF";
const VOCB: &[u8; 4] = b"VOCB";
const PARM: &[u8; 4] = b"PARM";
const FISH: &[u8; 4] = b"FISH";
const REGN: &[u8; 4] = b"REGN";
const ADAM: &[u8; 4] = b"ADAM";

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checksum mismatch: file is corrupt")]
    Checksum,
    #[error("truncated checkpoint at byte {0}")]
    Truncated(usize),
    #[error("malformed section `{kind}`: {detail}")]
    Malformed { kind: String, detail: String },
    #[error("missing required section `{0}`")]
    MissingSection(&'static str),
}

type Result<T> = std::result::Result<T, CheckpointError>;

fn malformed(kind: &[u8; 4], detail: impl ToString) -> CheckpointError {
    CheckpointError::Malformed {
        kind: String::from_utf8_lossy(kind).into_owned(),
        detail: detail.to_string(),
    }
}

/// Special tokens and the language-id tokens the model's vocabulary covers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabTable {
    pub specials: BTreeMap<String, u32>,
    /// Language name -> language-id token.
    pub languages: BTreeMap<String, u32>,
    pub size: usize,
}

impl VocabTable {
    pub fn specials_only(size: usize) -> Self {
        let specials = [("pad", PAD), ("bos", BOS), ("eos", EOS), ("unk", UNK)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        Self {
            specials,
            languages: BTreeMap::new(),
            size,
        }
    }

    /// Languages of `world` whose tokens all fit into `size`.
    pub fn for_world(world: &World, size: usize) -> Self {
        let mut t = Self::specials_only(size);
        for l in &world.languages {
            let fits = (l.lang_token as usize) < size && l.mapping.iter().all(|&m| (m as usize) < size);
            if fits {
                t.languages.insert(l.name.clone(), l.lang_token);
            }
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ConfSection {
    config: ModelConfig,
    frozen: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FisherMeta {
    sample_count: usize,
    source_data_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RegionMeta {
    method: RegionMethod,
    provenance: RegionProvenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: VocabTable,
    pub fisher: Option<FisherDiag>,
    /// Update regions by tag.
    pub regions: BTreeMap<String, UpdateRegion>,
    pub optimizer: Option<AdamState>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn name(&mut self, s: &str) {
        self.u16(s.len() as u16);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn json<T: Serialize>(&mut self, v: &T) {
        let bytes = serde_json::to_vec(v).expect("checkpoint metadata serializes");
        self.u32(bytes.len() as u32);
        self.0.extend_from_slice(&bytes);
    }
    fn tensors(&mut self, items: Vec<(&String, Vec<usize>, &[f64])>) {
        self.u32(items.len() as u32);
        for (name, shape, data) in items {
            self.name(name);
            self.u8(shape.len() as u8);
            for &d in &shape {
                self.u64(d as u64);
            }
            for &x in data {
                self.0.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    fn tensor_map(&mut self, m: &BTreeMap<String, Tensor>) {
        self.tensors(m.iter().map(|(n, t)| (n, t.shape().to_vec(), t.data())).collect());
    }
    fn section(&mut self, kind: &[u8; 4], tag: &str, payload: Vec<u8>) {
        self.0.extend_from_slice(kind);
        self.name(tag);
        self.u64(payload.len() as u64);
        self.0.extend_from_slice(&payload);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], base: usize) -> Self {
        Self { buf, pos: 0, base }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(CheckpointError::Truncated(self.base + self.buf.len()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn name(&mut self, kind: &[u8; 4]) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| malformed(kind, e))
    }
    fn json<T: for<'de> Deserialize<'de>>(&mut self, kind: &[u8; 4]) -> Result<T> {
        let n = self.u32()? as usize;
        serde_json::from_slice(self.take(n)?).map_err(|e| malformed(kind, e))
    }
    fn tensor_map(&mut self, kind: &[u8; 4]) -> Result<BTreeMap<String, Tensor>> {
        let count = self.u32()?;
        let mut out = BTreeMap::new();
        for _ in 0..count {
            let name = self.name(kind)?;
            let ndim = self.u8()? as usize;
            let shape: Vec<usize> = (0..ndim).map(|_| self.u64().map(|d| d as usize)).collect::<Result<_>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| malformed(kind, "tensor size overflows"))?;
            let bytes = self.take(n.checked_mul(8).ok_or_else(|| malformed(kind, "tensor size overflows"))?)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| malformed(kind, e))?;
            if out.insert(name.clone(), t).is_some() {
                return Err(malformed(kind, format!("duplicate tensor `{name}`")));
            }
        }
        Ok(out)
    }
    fn done(&self, kind: &[u8; 4]) -> Result<()> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(malformed(kind, "trailing bytes"))
        }
    }
}

impl Checkpoint {
    pub fn plain(model: Model, vocab: VocabTable) -> Self {
        Self {
            model,
            vocab,
            fisher: None,
            regions: BTreeMap::new(),
            optimizer: None,
        }
    }

    /// The same checkpoint without optional sections.
    pub fn model_only(&self) -> Self {
        Self::plain(self.model.clone(), self.vocab.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        let mut sections: Vec<(&[u8; 4], String, Vec<u8>)> = Vec::new();
        let mut p = Writer(Vec::new());
        p.json(&ConfSection {
            config: self.model.config.clone(),
            frozen: self.model.frozen.clone(),
        });
        sections.push((CONF, String::new(), p.0));
        let mut p = Writer(Vec::new());
        p.json(&self.vocab);
        sections.push((VOCB, String::new(), p.0));
        let mut p = Writer(Vec::new());
        p.tensors(self.model.params.iter().map(|(n, t)| (n, t.shape().to_vec(), t.data())).collect());
        sections.push((PARM, String::new(), p.0));
        if let Some(f) = &self.fisher {
            let mut p = Writer(Vec::new());
            p.json(&FisherMeta {
                sample_count: f.sample_count,
                source_data_id: f.source_data_id.clone(),
            });
            p.tensor_map(&f.values);
            sections.push((FISH, String::new(), p.0));
        }
        for (tag, r) in &self.regions {
            let mut p = Writer(Vec::new());
            p.json(&RegionMeta {
                method: r.method,
                provenance: r.provenance.clone(),
            });
            p.tensor_map(&r.lower);
            p.tensor_map(&r.upper);
            sections.push((REGN, tag.clone(), p.0));
        }
        if let Some(s) = &self.optimizer {
            let mut p = Writer(Vec::new());
            p.u64(s.step);
            for m in [&s.m, &s.v] {
                p.tensors(m.iter().map(|(n, v)| (n, vec![v.len()], v.as_slice())).collect());
            }
            sections.push((ADAM, String::new(), p.0));
        }
        w.u32(sections.len() as u32);
        for (kind, tag, payload) in sections {
            w.section(kind, &tag, payload);
        }
        let digest = Sha256::digest(&w.0);
        w.0.extend_from_slice(CHECKSUM_KIND);
        w.0.extend_from_slice(&digest);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < 8 + 4 + 4 + 36 {
            return Err(CheckpointError::Truncated(bytes.len()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 36);
        if &trailer[..4] != CHECKSUM_KIND || Sha256::digest(body).as_slice() != &trailer[4..] {
            return Err(CheckpointError::Checksum);
        }
        let mut r = Reader::new(body, 0);
        r.take(8)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let count = r.u32()?;
        let mut conf: Option<ConfSection> = None;
        let mut vocab: Option<VocabTable> = None;
        let mut params: Option<BTreeMap<String, Tensor>> = None;
        let mut fisher = None;
        let mut regions = BTreeMap::new();
        let mut optimizer = None;
        for _ in 0..count {
            let kind: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
            let tag = r.name(&kind)?;
            let len = r.u64()? as usize;
            let start = r.pos;
            let mut s = Reader::new(r.take(len)?, start);
            match &kind {
                CONF => conf = Some(s.json(CONF)?),
                VOCB => vocab = Some(s.json(VOCB)?),
                PARM => params = Some(s.tensor_map(PARM)?),
                FISH => {
                    let meta: FisherMeta = s.json(FISH)?;
                    fisher = Some(FisherDiag {
                        values: s.tensor_map(FISH)?,
                        sample_count: meta.sample_count,
                        source_data_id: meta.source_data_id,
                    });
                }
                REGN => {
                    let meta: RegionMeta = s.json(REGN)?;
                    let region = UpdateRegion {
                        lower: s.tensor_map(REGN)?,
                        upper: s.tensor_map(REGN)?,
                        method: meta.method,
                        provenance: meta.provenance,
                    };
                    if regions.insert(tag.clone(), region).is_some() {
                        return Err(malformed(REGN, format!("duplicate tag `{tag}`")));
                    }
                }
                ADAM => {
                    let step = s.u64()?;
                    let flat = |m: BTreeMap<String, Tensor>| m.into_iter().map(|(k, t)| (k, t.into_data())).collect();
                    let m = flat(s.tensor_map(ADAM)?);
                    let v = flat(s.tensor_map(ADAM)?);
                    optimizer = Some(AdamState { step, m, v });
                }
                // unknown optional section
                _ => continue,
            }
            s.done(&kind)?;
        }
        r.done(b"BODY")?;
        let conf = conf.ok_or(CheckpointError::MissingSection("CONF"))?;
        let tensors = params.ok_or(CheckpointError::MissingSection("PARM"))?;
        let mut store = ParamStore::new();
        for (n, t) in tensors {
            store.insert(n, t);
        }
        let reference = Model::new(conf.config.clone(), 0).map_err(|e| malformed(CONF, e))?;
        store
            .check_same_layout(&reference.params, "checkpoint")
            .map_err(|e| malformed(PARM, e))?;
        let model = Model {
            config: conf.config,
            params: store,
            frozen: conf.frozen,
        };
        model.validate_frozen().map_err(|e| malformed(CONF, e))?;
        Ok(Self {
            vocab: vocab.ok_or(CheckpointError::MissingSection("VOCB"))?,
            model,
            fisher,
            regions,
            optimizer,
        })
    }

    /// SHA-256 of the serialized checkpoint, hex encoded.
    pub fn checksum(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}
