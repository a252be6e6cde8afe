//! Versioned binary container for trained weights and training state.
//!
//! Layout (little-endian): 8-byte magic, `u32` version, length-prefixed kind
//! string, length-prefixed JSON config echo, `u32` entry count, then entries
//! of `(name, dtype, rank, dims, data)`. Entries keep insertion order, so equal
//! state always serializes to equal bytes.

use std::fs;
use std::path::Path;

use viewformer_core::codebook::{Codebook, CodebookConfig};
use viewformer_core::model::{Model, ModelConfig};
use viewformer_core::optim::AdamState;
use viewformer_core::params::ParamSet;
use viewformer_core::rng::seeded;
use viewformer_core::tensor::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"VFCKPT\0\0";
pub const VERSION: u32 = 1;
pub const KIND_CODEBOOK: &str = "codebook";
pub const KIND_TRANSFORMER: &str = "transformer";

#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    F32(Tensor<f32>),
    U64(Vec<u64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: String,
    pub entries: Vec<(String, Entry)>,
}

impl Checkpoint {
    pub fn new(kind: &str, config: String) -> Self {
        Checkpoint {
            kind: kind.into(),
            config,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, entry: Entry) {
        self.entries.push((name.into(), entry));
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut b, &self.kind);
        put_str(&mut b, &self.config);
        b.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in &self.entries {
            put_str(&mut b, name);
            match entry {
                Entry::F32(t) => {
                    b.push(0);
                    put_dims(&mut b, t.shape());
                    for v in t.data() {
                        b.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Entry::U64(v) => {
                    b.push(1);
                    put_dims(&mut b, &[v.len()]);
                    for x in v {
                        b.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
        b
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { path, bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::format(path, "not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let kind = r.string()?;
        let config = r.string()?;
        let count = r.u32()?;
        let mut entries = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name = r.string()?;
            let dtype = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = dims.iter().product();
            let entry = match dtype {
                0 => {
                    let raw = r.take(len * 4)?;
                    let data = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Entry::F32(Tensor::new(&dims, data)?)
                }
                1 => {
                    let raw = r.take(len * 8)?;
                    Entry::U64(
                        raw.chunks_exact(8)
                            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                }
                other => return Err(Error::format(path, format!("entry {name}: unknown dtype {other}"))),
            };
            entries.push((name, entry));
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after last entry"));
        }
        Ok(Checkpoint { kind, config, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(Error::io(dir))?;
        }
        fs::write(path, self.to_bytes()).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(Error::io(path))?;
        Self::from_bytes(path, &bytes)
    }

    fn tensor(&self, path: &Path, name: &str, shape: &[usize]) -> Result<Tensor<f32>> {
        match self.get(name) {
            Some(Entry::F32(t)) if t.shape() == shape => Ok(t.clone()),
            Some(Entry::F32(t)) => Err(Error::format(
                path,
                format!("{name}: shape {:?}, expected {shape:?}", t.shape()),
            )),
            _ => Err(Error::format(path, format!("missing tensor {name}"))),
        }
    }

    fn words(&self, path: &Path, name: &str, len: usize) -> Result<Vec<u64>> {
        match self.get(name) {
            Some(Entry::U64(v)) if v.len() == len => Ok(v.clone()),
            _ => Err(Error::format(path, format!("missing or malformed entry {name}"))),
        }
    }

    fn expect_kind(&self, path: &Path, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::format(
                path,
                format!("expected a {kind} checkpoint, found {}", self.kind),
            ));
        }
        Ok(())
    }
}

/// Trained codebook plus what is needed to resume its training.
#[derive(Clone, Debug, PartialEq)]
pub struct CodebookState {
    pub codebook: Codebook<f32>,
    pub adam: AdamState<f32>,
    pub step: u64,
}

impl CodebookState {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let config = serde_json::to_string(&self.codebook.config).expect("config serializes");
        let mut ck = Checkpoint::new(KIND_CODEBOOK, config);
        ck.push("train.step", Entry::U64(vec![self.step]));
        push_params(&mut ck, &self.codebook.params, &self.adam);
        let e = &self.codebook.embedding;
        ck.push("ema.weights", Entry::F32(e.weights.clone()));
        ck.push("ema.embed_sum", Entry::F32(e.embed_sum.clone()));
        ck.push(
            "ema.cluster_size",
            Entry::F32(Tensor::new(&[e.cluster_size.len()], e.cluster_size.clone()).unwrap()),
        );
        ck.push("ema.unused_steps", Entry::U64(e.unused_steps.clone()));
        ck.push("ema.initialized", Entry::U64(vec![u64::from(e.initialized)]));
        ck
    }

    pub fn from_checkpoint(path: &Path, ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(path, KIND_CODEBOOK)?;
        let config: CodebookConfig =
            serde_json::from_str(&ck.config).map_err(|e| Error::format(path, e.to_string()))?;
        let mut codebook = Codebook::new(config, &mut seeded(0))?;
        let adam = read_params(path, ck, &mut codebook.params)?;
        let (n_lat, d_lat) = (codebook.config.n_lat, codebook.config.d_lat);
        let e = &mut codebook.embedding;
        e.weights = ck.tensor(path, "ema.weights", &[n_lat, d_lat])?;
        e.embed_sum = ck.tensor(path, "ema.embed_sum", &[n_lat, d_lat])?;
        e.cluster_size = ck.tensor(path, "ema.cluster_size", &[n_lat])?.into_data();
        e.unused_steps = ck.words(path, "ema.unused_steps", n_lat)?;
        e.initialized = ck.words(path, "ema.initialized", 1)?[0] != 0;
        Ok(CodebookState {
            codebook,
            adam,
            step: ck.words(path, "train.step", 1)?[0],
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(path, &Checkpoint::load(path)?)
    }
}

/// Trained transformer plus what is needed to resume its training.
#[derive(Clone, Debug)]
pub struct TransformerState {
    pub model: Model<f32>,
    pub adam: AdamState<f32>,
    pub step: u64,
}

impl TransformerState {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let config = serde_json::to_string(&self.model.config).expect("config serializes");
        let mut ck = Checkpoint::new(KIND_TRANSFORMER, config);
        ck.push("train.step", Entry::U64(vec![self.step]));
        push_params(&mut ck, &self.model.params, &self.adam);
        ck
    }

    pub fn from_checkpoint(path: &Path, ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(path, KIND_TRANSFORMER)?;
        let config: ModelConfig = serde_json::from_str(&ck.config).map_err(|e| Error::format(path, e.to_string()))?;
        let mut model = Model::new(config, &mut seeded(0))?;
        let adam = read_params(path, ck, &mut model.params)?;
        Ok(TransformerState {
            model,
            adam,
            step: ck.words(path, "train.step", 1)?[0],
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(path, &Checkpoint::load(path)?)
    }
}

fn push_params(ck: &mut Checkpoint, params: &ParamSet<f32>, adam: &AdamState<f32>) {
    ck.push("adam.timestep", Entry::U64(vec![adam.timestep, adam.skipped]));
    for (i, (name, t)) in params.iter().enumerate() {
        ck.push(format!("param.{name}"), Entry::F32(t.clone()));
        ck.push(format!("adam.m.{name}"), Entry::F32(adam.first[i].clone()));
        ck.push(format!("adam.v.{name}"), Entry::F32(adam.second[i].clone()));
    }
}

fn read_params(path: &Path, ck: &Checkpoint, params: &mut ParamSet<f32>) -> Result<AdamState<f32>> {
    let mut adam = AdamState::new(params);
    let t = ck.words(path, "adam.timestep", 2)?;
    adam.timestep = t[0];
    adam.skipped = t[1];
    let ids: Vec<_> = params.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let name = params.name(id).to_string();
        let shape = params.get(id).shape().to_vec();
        *params.get_mut(id) = ck.tensor(path, &format!("param.{name}"), &shape)?;
        adam.first[i] = ck.tensor(path, &format!("adam.m.{name}"), &shape)?;
        adam.second[i] = ck.tensor(path, &format!("adam.v.{name}"), &shape)?;
    }
    Ok(adam)
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    b.extend_from_slice(&(s.len() as u32).to_le_bytes());
    b.extend_from_slice(s.as_bytes());
}

fn put_dims(b: &mut Vec<u8>, dims: &[usize]) {
    b.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        b.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let slice = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::format(self.path, "truncated checkpoint"))?;
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(self.path, "invalid UTF-8 in checkpoint"))
    }
}
