//! Single-file checkpoints with named tensor sections.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "LCKP" | u32 version | u32 meta_len | meta JSON
//! u32 n_sections
//! n_sections × { u16 name_len | name | u8 dtype | u8 ndim | ndim × u64 shape
//!                | u64 offset | u64 length }
//! data region (section offsets are relative to its start)
//! 32-byte SHA-256 of every preceding byte
//! ```
//!
//! dtype codes: 0 = f64, 1 = bf16, 2 = u8, 3 = u64. A `<file>.sha256`
//! sidecar repeats the trailer digest in hex.

use std::fs;
use std::path::{Path, PathBuf};

use half::bf16;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fsutil::{create_dir, write_atomic};
use crate::model::{Layout, ModelConfig, ParameterSet};
use crate::trainer::{OptimizerState, TrainProgress};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LCKP";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
pub const CHECKPOINT_EXT: &str = "lckp";
const DIGEST_BYTES: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrecisionTag {
    #[default]
    Full,
    /// Weights stored as bf16; reloads are lossy.
    Half,
}

/// Training state at a chunk boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Chunk boundary number: how many chunks have been trained.
    pub index: u32,
    pub step: u64,
    pub model: ModelConfig,
    pub params: ParameterSet,
    pub optimizer: Option<OptimizerState>,
    pub rng_state: Vec<u8>,
    pub precision_tag: PrecisionTag,
    pub manifest_checksum: String,
    pub schema_version: u32,
    pub progress: TrainProgress,
}

impl Checkpoint {
    /// Warning to surface when this checkpoint feeds a full-precision run.
    pub fn precision_warning(&self) -> Option<String> {
        (self.precision_tag == PrecisionTag::Half).then(|| {
            format!(
                "WARNING: checkpoint {} holds bf16 weights; values were rounded on save and \
                 results will not match the full-precision run",
                self.index
            )
        })
    }

    /// Fails unless the stored architecture equals `cfg`.
    pub fn check_model(&self, cfg: &ModelConfig) -> Result<()> {
        if &self.model != cfg {
            return Err(Error::Invalid(format!(
                "checkpoint {} was written for a different model configuration",
                self.index
            )));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Meta {
    schema_version: u32,
    index: u32,
    step: u64,
    precision_tag: PrecisionTag,
    manifest_checksum: String,
    model: ModelConfig,
    progress: TrainProgress,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dtype {
    F64 = 0,
    Bf16 = 1,
    U8 = 2,
    U64 = 3,
}

impl Dtype {
    fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => Dtype::F64,
            1 => Dtype::Bf16,
            2 => Dtype::U8,
            3 => Dtype::U64,
            _ => return Err(Error::Format(format!("unknown dtype code {code}"))),
        })
    }

    fn width(self) -> usize {
        match self {
            Dtype::F64 | Dtype::U64 => 8,
            Dtype::Bf16 => 2,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Debug, Clone)]
struct Section {
    name: String,
    dtype: Dtype,
    shape: Vec<u64>,
    offset: u64,
    length: u64,
}

pub fn checkpoint_file_name(index: u32) -> String {
    format!("ckpt_{index:05}.{CHECKPOINT_EXT}")
}

pub fn checkpoint_path(dir: &Path, index: u32) -> PathBuf {
    dir.join(checkpoint_file_name(index))
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".sha256");
    path.with_file_name(name)
}

/// Parses `ckpt_NNNNN.lckp`; temp files and anything else yield `None`.
pub fn parse_checkpoint_name(name: &str) -> Option<u32> {
    let digits = name.strip_prefix("ckpt_")?.strip_suffix(".lckp")?;
    if digits.len() != 5 || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

/// Completed checkpoints in `dir`, ordered by index.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<(u32, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if let Some(i) = parse_checkpoint_name(&entry.file_name().to_string_lossy()) {
            out.push((i, entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

struct Writer {
    sections: Vec<Section>,
    data: Vec<u8>,
}

impl Writer {
    fn push(&mut self, name: String, dtype: Dtype, shape: Vec<u64>, bytes: Vec<u8>) {
        self.sections.push(Section {
            name,
            dtype,
            shape,
            offset: self.data.len() as u64,
            length: bytes.len() as u64,
        });
        self.data.extend(bytes);
    }

    fn push_f64(&mut self, name: String, shape: Vec<u64>, values: &[f64]) {
        self.push(name, Dtype::F64, shape, values.iter().flat_map(|v| v.to_le_bytes()).collect());
    }
}

/// Serialized checkpoint bytes, trailer included.
pub fn encode_checkpoint(c: &Checkpoint) -> Result<Vec<u8>> {
    let meta = Meta {
        schema_version: c.schema_version,
        index: c.index,
        step: c.step,
        precision_tag: c.precision_tag,
        manifest_checksum: c.manifest_checksum.clone(),
        model: c.model.clone(),
        progress: c.progress.clone(),
    };
    let meta = serde_json::to_vec(&meta).map_err(|e| Error::Format(e.to_string()))?;
    let mut w = Writer {
        sections: Vec::new(),
        data: Vec::new(),
    };
    for t in &c.params.layout.tensors {
        let shape: Vec<u64> = t.shape.iter().map(|&d| d as u64).collect();
        let values = &c.params.data[t.range()];
        match c.precision_tag {
            PrecisionTag::Full => w.push_f64(format!("params/{}", t.name), shape, values),
            PrecisionTag::Half => w.push(
                format!("params/{}", t.name),
                Dtype::Bf16,
                shape,
                values.iter().flat_map(|&v| bf16::from_f64(v).to_le_bytes()).collect(),
            ),
        }
    }
    if let Some(opt) = &c.optimizer {
        if opt.m.len() != c.params.len() || opt.v.len() != c.params.len() {
            return Err(Error::Invalid("optimizer moments do not match parameters".into()));
        }
        for (kind, moments) in [("m", &opt.m), ("v", &opt.v)] {
            for t in &c.params.layout.tensors {
                let shape = t.shape.iter().map(|&d| d as u64).collect();
                w.push_f64(format!("optim/{kind}/{}", t.name), shape, &moments[t.range()]);
            }
        }
        w.push("optim/t".into(), Dtype::U64, vec![1], opt.t.to_le_bytes().to_vec());
    }
    w.push(
        "rng".into(),
        Dtype::U8,
        vec![c.rng_state.len() as u64],
        c.rng_state.clone(),
    );

    let mut out = Vec::with_capacity(w.data.len() + 4096);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(w.sections.len() as u32).to_le_bytes());
    for s in &w.sections {
        out.extend_from_slice(&(s.name.len() as u16).to_le_bytes());
        out.extend_from_slice(s.name.as_bytes());
        out.push(s.dtype as u8);
        out.push(s.shape.len() as u8);
        for d in &s.shape {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&s.offset.to_le_bytes());
        out.extend_from_slice(&s.length.to_le_bytes());
    }
    out.extend_from_slice(&w.data);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Writes `ckpt_<index>.lckp` and its sidecar into `dir` atomically.
pub fn save_checkpoint(c: &Checkpoint, dir: &Path) -> Result<PathBuf> {
    let bytes = encode_checkpoint(c)?;
    let path = checkpoint_path(dir, c.index);
    let digest = hex::encode(&bytes[bytes.len() - DIGEST_BYTES..]);
    create_dir(dir)?;
    write_atomic(&path, &bytes)?;
    let sidecar = format!("{digest}  {}\n", checkpoint_file_name(c.index));
    write_atomic(&sidecar_path(&path), sidecar.as_bytes())?;
    Ok(path)
}

/// Hex digest recorded in the checkpoint trailer.
pub fn checkpoint_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < DIGEST_BYTES {
        return Err(integrity(path, "file shorter than its trailer"));
    }
    Ok(hex::encode(&bytes[bytes.len() - DIGEST_BYTES..]))
}

fn integrity(path: &Path, detail: impl Into<String>) -> Error {
    Error::Integrity {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint header truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parsed but unvalidated contents.
struct Decoded {
    meta: Meta,
    sections: Vec<Section>,
    data_start: usize,
    body_end: usize,
}

fn decode(path: &Path, bytes: &[u8]) -> Result<Decoded> {
    if bytes.len() < 4 + DIGEST_BYTES || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("{} is not a checkpoint", path.display())));
    }
    let body_end = bytes.len() - DIGEST_BYTES;
    if Sha256::digest(&bytes[..body_end]).as_slice() != &bytes[body_end..] {
        return Err(integrity(path, "content hash mismatch"));
    }
    let sidecar = sidecar_path(path);
    if let Ok(text) = fs::read_to_string(&sidecar) {
        let recorded = text.split_whitespace().next().unwrap_or("");
        if recorded != hex::encode(&bytes[body_end..]) {
            return Err(integrity(path, "sidecar hash disagrees with file"));
        }
    }
    let mut cur = Cursor {
        bytes: &bytes[..body_end],
        pos: 4,
    };
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = cur.u32()? as usize;
    let meta: Meta = serde_json::from_slice(cur.take(meta_len)?)
        .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
    if meta.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint schema version {}",
            meta.schema_version
        )));
    }
    let n = cur.u32()? as usize;
    let mut sections = Vec::with_capacity(n);
    for _ in 0..n {
        let len = cur.u16()? as usize;
        let name = String::from_utf8(cur.take(len)?.to_vec())
            .map_err(|_| Error::Format("section name is not UTF-8".into()))?;
        let dtype = Dtype::from_code(cur.u8()?)?;
        let ndim = cur.u8()? as usize;
        let shape = (0..ndim).map(|_| cur.u64()).collect::<Result<Vec<_>>>()?;
        sections.push(Section {
            name,
            dtype,
            shape,
            offset: cur.u64()?,
            length: cur.u64()?,
        });
    }
    let data_start = cur.pos;
    for s in &sections {
        let elems: u64 = s.shape.iter().product();
        let fits = s
            .offset
            .checked_add(s.length)
            .is_some_and(|end| data_start as u64 + end <= body_end as u64);
        if !fits || elems * s.dtype.width() as u64 != s.length {
            return Err(Error::Format(format!("section {} has inconsistent bounds", s.name)));
        }
    }
    Ok(Decoded {
        meta,
        sections,
        data_start,
        body_end,
    })
}

impl Decoded {
    fn find(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    fn bytes<'a>(&self, all: &'a [u8], s: &Section) -> &'a [u8] {
        let start = self.data_start + s.offset as usize;
        debug_assert!(start + s.length as usize <= self.body_end);
        &all[start..start + s.length as usize]
    }

    fn f64s(&self, all: &[u8], name: &str, shape: &[usize], out: &mut [f64]) -> Result<()> {
        let s = self
            .find(name)
            .ok_or_else(|| Error::Format(format!("section {name} missing")))?;
        if s.shape.iter().map(|&d| d as usize).ne(shape.iter().copied()) {
            return Err(Error::Format(format!(
                "section {name} has shape {:?}, model expects {shape:?}",
                s.shape
            )));
        }
        let raw = self.bytes(all, s);
        match s.dtype {
            Dtype::F64 => {
                for (o, b) in out.iter_mut().zip(raw.chunks_exact(8)) {
                    *o = f64::from_le_bytes(b.try_into().unwrap());
                }
            }
            Dtype::Bf16 => {
                for (o, b) in out.iter_mut().zip(raw.chunks_exact(2)) {
                    *o = bf16::from_le_bytes(b.try_into().unwrap()).to_f64();
                }
            }
            _ => return Err(Error::Format(format!("section {name} is not floating point"))),
        }
        Ok(())
    }
}

fn read_checkpoint(path: &Path, require_optimizer: bool) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let d = decode(path, &bytes)?;
    let model = d.meta.model.clone();
    model.validate()?;
    let mut params = ParameterSet::zeros(&model);
    let layout = Layout::new(&model);
    for t in &layout.tensors {
        d.f64s(&bytes, &format!("params/{}", t.name), &t.shape, &mut params.data[t.range()])?;
    }
    let optimizer = match d.find("optim/t") {
        None if require_optimizer => {
            return Err(Error::MissingOptimizerState {
                path: path.to_path_buf(),
            })
        }
        None => None,
        Some(ts) => {
            let mut st = OptimizerState::new(params.len());
            for t in &layout.tensors {
                d.f64s(&bytes, &format!("optim/m/{}", t.name), &t.shape, &mut st.m[t.range()])?;
                d.f64s(&bytes, &format!("optim/v/{}", t.name), &t.shape, &mut st.v[t.range()])?;
            }
            if ts.dtype != Dtype::U64 || ts.length != 8 {
                return Err(Error::Format("optim/t must be one u64".into()));
            }
            st.t = u64::from_le_bytes(d.bytes(&bytes, ts).try_into().unwrap());
            Some(st)
        }
    };
    let rng = d
        .find("rng")
        .filter(|s| s.dtype == Dtype::U8)
        .ok_or_else(|| Error::Format("rng section missing".into()))?;
    let rng_state = d.bytes(&bytes, rng).to_vec();
    let meta = d.meta;
    Ok(Checkpoint {
        index: meta.index,
        step: meta.step,
        model,
        params,
        optimizer,
        rng_state,
        precision_tag: meta.precision_tag,
        manifest_checksum: meta.manifest_checksum,
        schema_version: meta.schema_version,
        progress: meta.progress,
    })
}

/// Strict load for resuming: the optimizer moments must be present.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(path, true)
}

/// Strict load that also checks the stored architecture against `cfg`.
pub fn load_checkpoint_for(path: &Path, cfg: &ModelConfig) -> Result<Checkpoint> {
    let c = load_checkpoint(path)?;
    c.check_model(cfg)?;
    Ok(c)
}

/// Lenient load for evaluation; optimizer sections may be absent.
pub fn load_weights(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(path, false)
}
