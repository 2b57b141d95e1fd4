//! On-disk formats: network files, `FDS1` datasets, checkpoint directories,
//! CSV tables and run manifests.
//!
//! Every real number is stored as a 32-bit value. Loading widens it to the
//! in-memory scalar exactly, so anything that was already representable in
//! 32 bits survives a save/load cycle bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::diffcore::Tensor;
use crate::funcae::{AeConfig, AeError, AutoencoderParams, EmbeddingStats};
use crate::genlab::{FunctionalDataset, Splits};
use crate::netrep::{ActivationKind, MlpSpec, NetError};
use crate::scalar::Scalar;

pub const SPEC_FORMAT: &str = "funcspace-mlp";
pub const SPEC_VERSION: u32 = 1;
pub const FDS_MAGIC: &[u8; 4] = b"FDS1";
pub const FDS_HEADER_LEN: usize = 28;
pub const CHECKPOINT_FORMAT: &str = "funcspace-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_MANIFEST: &str = "manifest.json";
pub const CHECKPOINT_TENSORS: &str = "tensors.bin";
pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    Magic { expected: String, found: String },
    #[error("unsupported {what} version: expected {expected}, found {found}")]
    Version { what: &'static str, expected: u32, found: u32 },
    #[error("truncated data at byte {offset}: needed {needed} more bytes, {available} left")]
    Truncated { offset: usize, needed: usize, available: usize },
    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Ae(#[from] AeError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PersistError + '_ {
    move |source| PersistError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn to_f32<S: Scalar>(v: S) -> f32 {
    v.to_f64_lossy() as f32
}

fn from_f32<S: Scalar>(v: f32) -> S {
    S::lit(v as f64)
}

/// Writes `bytes` next to `path` and renames it into place, so readers never
/// see a half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PersistError> {
    let tmp = path.with_extension(match path.extension() {
        Some(e) => format!("{}.partial", e.to_string_lossy()),
        None => "partial".into(),
    });
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, PersistError> {
    fs::read(path).map_err(io_err(path))
}

// ---------------------------------------------------------------- networks

/// Text form of one network.
///
/// `hidden_sizes` counts active slots per layer and must agree with `masks`;
/// `weights[k]` is layer `k` flattened row-major over its slot layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecFile {
    pub format: String,
    pub version: u32,
    pub activation: ActivationKind,
    pub input_dim: usize,
    pub hidden_sizes: Vec<usize>,
    pub output_dim: usize,
    pub n_max: usize,
    pub masks: Vec<Vec<f32>>,
    pub weights: Vec<Vec<f32>>,
}

impl SpecFile {
    pub fn from_spec<S: Scalar>(spec: &MlpSpec<S>) -> Self {
        Self {
            format: SPEC_FORMAT.into(),
            version: SPEC_VERSION,
            activation: spec.activation(),
            input_dim: spec.input_dim(),
            hidden_sizes: spec.hidden_sizes(),
            output_dim: spec.output_dim(),
            n_max: spec.n_max(),
            masks: spec.masks().iter().map(|m| m.iter().map(|&v| to_f32(v)).collect()).collect(),
            weights: spec.weights().iter().map(|w| w.data().iter().map(|&v| to_f32(v)).collect()).collect(),
        }
    }

    pub fn to_spec<S: Scalar>(&self) -> Result<MlpSpec<S>, PersistError> {
        if self.format != SPEC_FORMAT {
            return Err(PersistError::Magic {
                expected: SPEC_FORMAT.into(),
                found: self.format.clone(),
            });
        }
        if self.version != SPEC_VERSION {
            return Err(PersistError::Version {
                what: "network file",
                expected: SPEC_VERSION,
                found: self.version,
            });
        }
        let depth = self.masks.len();
        if self.weights.len() != depth + 1 {
            return Err(PersistError::Format {
                what: "network file",
                msg: format!("{} weight arrays for {depth} hidden layers", self.weights.len()),
            });
        }
        let masks: Vec<Vec<S>> = self.masks.iter().map(|m| m.iter().map(|&v| from_f32(v)).collect()).collect();
        let mut weights = Vec::with_capacity(depth + 1);
        for (k, w) in self.weights.iter().enumerate() {
            let shape = crate::netrep::layer_shape(k, depth, self.input_dim, self.output_dim, self.n_max);
            if w.len() != shape[0] * shape[1] {
                return Err(PersistError::Format {
                    what: "network file",
                    msg: format!("layer {k} has {} weights, expected {}x{}", w.len(), shape[0], shape[1]),
                });
            }
            weights.push(Tensor::from_shape_vec(&shape, w.iter().map(|&v| from_f32(v)).collect()));
        }
        let spec = MlpSpec::new(self.activation, self.input_dim, self.output_dim, self.n_max, masks, weights)?;
        if spec.hidden_sizes() != self.hidden_sizes {
            return Err(PersistError::Format {
                what: "network file",
                msg: format!("hidden_sizes {:?} disagree with masks {:?}", self.hidden_sizes, spec.hidden_sizes()),
            });
        }
        Ok(spec)
    }
}

pub fn spec_to_json<S: Scalar>(spec: &MlpSpec<S>) -> String {
    let mut s = serde_json::to_string_pretty(&SpecFile::from_spec(spec)).expect("network file serialises");
    s.push('\n');
    s
}

pub fn spec_from_json<S: Scalar>(text: &str) -> Result<MlpSpec<S>, PersistError> {
    serde_json::from_str::<SpecFile>(text)?.to_spec()
}

pub fn save_spec<S: Scalar>(path: &Path, spec: &MlpSpec<S>) -> Result<(), PersistError> {
    write_atomic(path, spec_to_json(spec).as_bytes())
}

pub fn load_spec<S: Scalar>(path: &Path) -> Result<MlpSpec<S>, PersistError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    spec_from_json(&text)
}

// ---------------------------------------------------------------- datasets

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PersistError> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(PersistError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, PersistError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, PersistError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn u32_of(v: usize, what: &'static str) -> Result<u32, PersistError> {
    u32::try_from(v).map_err(|_| PersistError::Format {
        what: "FDS1 dataset",
        msg: format!("{what} {v} does not fit in 32 bits"),
    })
}

/// `FDS1` bytes of `data`. A dataset without splits is written with all
/// three split counts zero.
pub fn encode_fds<S: Scalar>(data: &FunctionalDataset<S>) -> Result<Vec<u8>, PersistError> {
    let (n, i, o) = (data.len(), data.input_dim(), data.output_dim());
    let s = data.splits.unwrap_or(Splits { train: 0, val: 0, test: 0 });
    let mut out = Vec::with_capacity(FDS_HEADER_LEN + n * (i + o) * 4);
    out.extend_from_slice(FDS_MAGIC);
    for (v, what) in [(n, "row count"), (i, "input dim"), (o, "output dim"), (s.train, "train"), (s.val, "val"), (s.test, "test")] {
        out.extend_from_slice(&u32_of(v, what)?.to_le_bytes());
    }
    for r in 0..n {
        for &v in &data.inputs.data()[r * i..(r + 1) * i] {
            out.extend_from_slice(&to_f32(v).to_le_bytes());
        }
        for &v in &data.outputs.data()[r * o..(r + 1) * o] {
            out.extend_from_slice(&to_f32(v).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_fds<S: Scalar>(bytes: &[u8]) -> Result<FunctionalDataset<S>, PersistError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != FDS_MAGIC {
        if &magic[..3] == b"FDS" && magic[3].is_ascii_digit() {
            return Err(PersistError::Version {
                what: "FDS dataset",
                expected: 1,
                found: (magic[3] - b'0') as u32,
            });
        }
        return Err(PersistError::Magic {
            expected: "FDS1".into(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let mut h = [0usize; 6];
    for v in &mut h {
        *v = r.u32()? as usize;
    }
    let [n, i, o, train, val, test] = h;
    let splits = match (train, val, test) {
        (0, 0, 0) => None,
        _ if train + val + test == n => Some(Splits { train, val, test }),
        _ => {
            return Err(PersistError::Format {
                what: "FDS1 dataset",
                msg: format!("splits {train}/{val}/{test} do not add up to {n} rows"),
            })
        }
    };
    let mut xs = Vec::with_capacity(n * i);
    let mut ys = Vec::with_capacity(n * o);
    for _ in 0..n {
        for _ in 0..i {
            xs.push(from_f32(r.f32()?));
        }
        for _ in 0..o {
            ys.push(from_f32(r.f32()?));
        }
    }
    if r.pos != bytes.len() {
        return Err(PersistError::Format {
            what: "FDS1 dataset",
            msg: format!("{} trailing bytes after offset {}", bytes.len() - r.pos, r.pos),
        });
    }
    FunctionalDataset::new(Tensor::from_shape_vec(&[n, i], xs), Tensor::from_shape_vec(&[n, o], ys), splits).map_err(|e| {
        PersistError::Format {
            what: "FDS1 dataset",
            msg: e.to_string(),
        }
    })
}

pub fn save_dataset<S: Scalar>(path: &Path, data: &FunctionalDataset<S>) -> Result<(), PersistError> {
    write_atomic(path, &encode_fds(data)?)
}

pub fn load_dataset<S: Scalar>(path: &Path) -> Result<FunctionalDataset<S>, PersistError> {
    decode_fds(&read_file(path)?)
}

// ------------------------------------------------------------- checkpoints

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the tensor file.
    pub offset: usize,
    /// Length in bytes.
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub activation: ActivationKind,
    pub d_z: usize,
    pub l_max: usize,
    pub n_max: usize,
    pub config: AeConfig,
    pub tensors: Vec<TensorEntry>,
    pub stats: Option<EmbeddingStats>,
}

/// Writes `manifest.json` and `tensors.bin` into `dir`, creating it if needed.
pub fn save_checkpoint<S: Scalar>(dir: &Path, params: &AutoencoderParams<S>) -> Result<(), PersistError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut blob = Vec::with_capacity(params.param_count() * 4);
    let mut entries = Vec::with_capacity(params.tensors.len());
    for (t, info) in params.tensors.iter().zip(&params.layout.infos) {
        let offset = blob.len();
        for &v in t.data() {
            blob.extend_from_slice(&to_f32(v).to_le_bytes());
        }
        entries.push(TensorEntry {
            name: info.name.clone(),
            shape: info.shape.clone(),
            offset,
            bytes: blob.len() - offset,
        });
    }
    let c = &params.config;
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        activation: c.activation,
        d_z: c.d_z,
        l_max: c.l_max,
        n_max: c.n_max,
        config: c.clone(),
        tensors: entries,
        stats: params.stats.clone(),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    // tensors first: a manifest on disk always describes a complete blob
    write_atomic(&dir.join(CHECKPOINT_TENSORS), &blob)?;
    write_atomic(&dir.join(CHECKPOINT_MANIFEST), text.as_bytes())
}

pub fn load_checkpoint<S: Scalar>(dir: &Path) -> Result<AutoencoderParams<S>, PersistError> {
    let mpath = dir.join(CHECKPOINT_MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let m: CheckpointManifest = serde_json::from_str(&text)?;
    if m.format != CHECKPOINT_FORMAT {
        return Err(PersistError::Magic {
            expected: CHECKPOINT_FORMAT.into(),
            found: m.format,
        });
    }
    if m.version != CHECKPOINT_VERSION {
        return Err(PersistError::Version {
            what: "checkpoint",
            expected: CHECKPOINT_VERSION,
            found: m.version,
        });
    }
    let c = &m.config;
    if (c.activation, c.d_z, c.l_max, c.n_max) != (m.activation, m.d_z, m.l_max, m.n_max) {
        return Err(PersistError::Format {
            what: "checkpoint",
            msg: "summary fields disagree with the embedded config".into(),
        });
    }
    let blob = read_file(&dir.join(CHECKPOINT_TENSORS))?;
    let mut tensors = Vec::with_capacity(m.tensors.len());
    for e in &m.tensors {
        let numel: usize = e.shape.iter().product();
        if e.bytes != numel * 4 {
            return Err(PersistError::Format {
                what: "checkpoint",
                msg: format!("{} spans {} bytes, shape {:?} needs {}", e.name, e.bytes, e.shape, numel * 4),
            });
        }
        let mut r = Reader {
            bytes: &blob[..blob.len().min(e.offset + e.bytes)],
            pos: e.offset.min(blob.len()),
        };
        if e.offset > blob.len() {
            return Err(PersistError::Truncated {
                offset: blob.len(),
                needed: e.offset + e.bytes - blob.len(),
                available: 0,
            });
        }
        let data = (0..numel).map(|_| r.f32().map(from_f32)).collect::<Result<Vec<S>, _>>()?;
        tensors.push(Tensor::from_shape_vec(&e.shape, data));
    }
    let params = AutoencoderParams::from_parts(m.config.clone(), tensors, m.stats)?;
    for (e, info) in m.tensors.iter().zip(&params.layout.infos) {
        if e.name != info.name {
            return Err(PersistError::Format {
                what: "checkpoint",
                msg: format!("tensor {} found where {} was expected", e.name, info.name),
            });
        }
    }
    Ok(params)
}

// ------------------------------------------------------------------ tables

/// Comma-separated table with a header row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

fn csv_err(e: csv::Error) -> PersistError {
    PersistError::Format {
        what: "table",
        msg: e.to_string(),
    }
}

impl Table {
    pub fn to_csv(&self) -> Result<String, PersistError> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(&self.header).map_err(csv_err)?;
        for row in &self.rows {
            w.write_record(row).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| PersistError::Format {
            what: "table",
            msg: e.to_string(),
        })?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn parse(text: &str) -> Result<Self, PersistError> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers().map_err(csv_err)?.iter().map(String::from).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|rec| rec.iter().map(String::from).collect()))
            .collect::<Result<_, _>>()
            .map_err(csv_err)?;
        Ok(Self { header, rows })
    }
}

pub fn save_table(path: &Path, table: &Table) -> Result<(), PersistError> {
    write_atomic(path, table.to_csv()?.as_bytes())
}

pub fn load_table(path: &Path) -> Result<Table, PersistError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Table::parse(&text)
}

// --------------------------------------------------------------- manifests

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String, PersistError> {
    Ok(sha256_hex(&read_file(path)?))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self, PersistError> {
        let bytes = read_file(path)?;
        Ok(Self {
            path: path.to_string_lossy().into_owned(),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        })
    }
}

/// Record of one command run: what went in, what came out, and how long it took.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    /// Wall-clock seconds per named phase.
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Self {
            tool: "funcspace".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<(), PersistError> {
        self.inputs.push(FileDigest::of(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<(), PersistError> {
        self.outputs.push(FileDigest::of(path)?);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), PersistError> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, PersistError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Ok(serde_json::from_str(&text)?)
    }
}
