//! Look-up table compiled from a trained network.
//!
//! The grid is uniform in feature space and split into shards along the
//! first (distance) axis. Each shard holds, for every node in lexicographic
//! order, six parameters as `f32` and one feasibility byte. A plain-text
//! manifest lists the grid, the shards, their sizes and SHA-256 hashes.
//! Queries round to the nearest node and read one record; they never run
//! the network or the key-rate model.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use ndarray::Array2;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{denormalize, normalize, DatasetError, SampleRanges};
use crate::keyrate::{key_rate, DeviceConstants, ExperimentParams, ProtocolParams};
use crate::mlp::{repair, MlpError, MlpModel};

pub const MAGIC: &[u8; 4] = b"QLUT";
pub const FORMAT_VERSION: u32 = 1;
pub const RECORD_BYTES: usize = 6 * 4 + 1;
pub const MANIFEST_NAME: &str = "lut.manifest";
pub const AXIS_NAMES: [&str; 4] = ["e1", "e2", "e3", "e4"];
/// Header: magic, version, 4 axes of (min, max, count), shard axis, shard
/// range, model fingerprint, node count.
pub const HEADER_BYTES: usize = 4 + 4 + 4 * (8 + 8 + 4) + 4 + 4 + 4 + 32 + 8;

#[derive(Debug, Error)]
pub enum LutError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("model maps {inputs} inputs to {outputs} outputs, expected 4 to 6")]
    ModelShape { inputs: usize, outputs: usize },
    #[error("shard {0} is missing: {1}")]
    MissingShard(usize, PathBuf),
    #[error("fingerprint mismatch in {0}")]
    FingerprintMismatch(PathBuf),
    #[error("invalid shard {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] MlpError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl Axis {
    pub fn value(&self, index: usize) -> f64 {
        if index + 1 == self.count {
            return self.max;
        }
        self.min + (self.max - self.min) * index as f64 / (self.count - 1) as f64
    }

    /// Nearest node index, and whether `x` lay outside `[min, max]`.
    pub fn nearest(&self, x: f64) -> (usize, bool) {
        let span = self.max - self.min;
        let slack = 1e-9 * span;
        let outside = !(x >= self.min - slack && x <= self.max + slack);
        let t = ((x - self.min) / span * (self.count - 1) as f64).round();
        let index = if t.is_nan() || t <= 0.0 {
            0
        } else {
            (t as usize).min(self.count - 1)
        };
        (index, outside)
    }
}

/// Uniform grid over the four features.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub axes: [Axis; 4],
}

impl GridSpec {
    /// `points` nodes per axis spanning the feature image of `ranges`.
    pub fn from_ranges(ranges: &SampleRanges, points: usize) -> Self {
        let bounds = ranges.feature_bounds();
        Self {
            axes: bounds.map(|(min, max)| Axis {
                min,
                max,
                count: points,
            }),
        }
    }

    pub fn validate(&self) -> Result<(), LutError> {
        for (name, a) in AXIS_NAMES.iter().zip(&self.axes) {
            if a.count < 2 {
                return Err(LutError::InvalidGrid(format!(
                    "{name}: need at least 2 points"
                )));
            }
            if !(a.min.is_finite() && a.max.is_finite() && a.min < a.max) {
                return Err(LutError::InvalidGrid(format!(
                    "{name}: need finite min < max"
                )));
            }
            if a.count > u32::MAX as usize {
                return Err(LutError::InvalidGrid(format!("{name}: too many points")));
            }
        }
        Ok(())
    }

    pub fn node_count(&self) -> u64 {
        self.axes.iter().map(|a| a.count as u64).product()
    }

    /// Payload size of the whole table, headers excluded.
    pub fn payload_bytes(&self) -> u64 {
        self.node_count() * RECORD_BYTES as u64
    }

    /// Nodes in one slab of fixed first-axis index.
    pub fn slab_nodes(&self) -> usize {
        self.axes[1..].iter().map(|a| a.count).product()
    }

    pub fn node_features(&self, index: [usize; 4]) -> [f64; 4] {
        std::array::from_fn(|k| self.axes[k].value(index[k]))
    }

    /// Lexicographic position of a node.
    pub fn flat_index(&self, index: [usize; 4]) -> usize {
        index
            .iter()
            .zip(&self.axes)
            .fold(0, |acc, (&i, a)| acc * a.count + i)
    }

    pub fn unflatten(&self, mut flat: usize) -> [usize; 4] {
        let mut index = [0; 4];
        for k in (0..4).rev() {
            index[k] = flat % self.axes[k].count;
            flat /= self.axes[k].count;
        }
        index
    }
}

/// Which nodes get their predicted parameters checked against the key-rate
/// model while building.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeasibilityCheck {
    None,
    /// Every n-th node in lexicographic order, starting from the first.
    Every(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum NodeFlag {
    Unchecked = 0,
    Feasible = 1,
    Infeasible = 2,
}

impl NodeFlag {
    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Self::Unchecked),
            1 => Some(Self::Feasible),
            2 => Some(Self::Infeasible),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Unchecked => "unchecked",
            Self::Feasible => "feasible",
            Self::Infeasible => "infeasible",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShardEntry {
    pub file: String,
    /// Half-open range of first-axis indices.
    pub range: (usize, usize),
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub grid: GridSpec,
    pub model_sha256: String,
    pub constants: DeviceConstants,
    pub feasibility: FeasibilityCheck,
    pub shards: Vec<ShardEntry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "format = qlut/{FORMAT_VERSION}");
        let _ = writeln!(out, "model_sha256 = {}", self.model_sha256);
        for (name, a) in AXIS_NAMES.iter().zip(&self.grid.axes) {
            let _ = writeln!(out, "grid.{name} = {:e} {:e} {}", a.min, a.max, a.count);
        }
        let _ = writeln!(out, "nodes = {}", self.grid.node_count());
        let c = &self.constants;
        let _ = writeln!(
            out,
            "constants = {:e} {:e} {:e} {:e}",
            c.eta_d, c.alpha_db_km, c.f_e, c.epsilon
        );
        let check = match self.feasibility {
            FeasibilityCheck::None => "none".to_string(),
            FeasibilityCheck::Every(n) => format!("every {n}"),
        };
        let _ = writeln!(out, "feasibility = {check}");
        let _ = writeln!(out, "shard_axis = 0");
        let _ = writeln!(out, "shards = {}", self.shards.len());
        for (i, s) in self.shards.iter().enumerate() {
            let _ = writeln!(out, "shard.{i}.file = {}", s.file);
            let _ = writeln!(out, "shard.{i}.range = {} {}", s.range.0, s.range.1);
            let _ = writeln!(out, "shard.{i}.bytes = {}", s.bytes);
            let _ = writeln!(out, "shard.{i}.sha256 = {}", s.sha256);
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, LutError> {
        let bad = |msg: String| LutError::Manifest(msg);
        let map: BTreeMap<&str, &str> = text
            .lines()
            .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
            .map(|l| {
                l.split_once('=')
                    .map(|(k, v)| (k.trim(), v.trim()))
                    .ok_or_else(|| bad(format!("not a key = value line: {l}")))
            })
            .collect::<Result<_, _>>()?;
        let get = |k: &str| {
            map.get(k)
                .copied()
                .ok_or_else(|| bad(format!("missing key {k}")))
        };
        let words = |k: &str| get(k).map(|v| v.split_whitespace().collect::<Vec<_>>());
        let num = |s: &str, k: &str| {
            s.parse::<f64>()
                .map_err(|_| bad(format!("bad number in {k}")))
        };
        let int = |s: &str, k: &str| {
            s.parse::<usize>()
                .map_err(|_| bad(format!("bad integer in {k}")))
        };

        if get("format")? != format!("qlut/{FORMAT_VERSION}") {
            return Err(bad("unsupported format".into()));
        }
        let mut axes = [Axis {
            min: 0.0,
            max: 1.0,
            count: 2,
        }; 4];
        for (name, axis) in AXIS_NAMES.iter().zip(axes.iter_mut()) {
            let key = format!("grid.{name}");
            let w = words(&key)?;
            if w.len() != 3 {
                return Err(bad(format!("{key} needs min max count")));
            }
            *axis = Axis {
                min: num(w[0], &key)?,
                max: num(w[1], &key)?,
                count: int(w[2], &key)?,
            };
        }
        let grid = GridSpec { axes };
        grid.validate()?;
        let c = words("constants")?;
        if c.len() != 4 {
            return Err(bad("constants needs 4 values".into()));
        }
        let constants = DeviceConstants {
            eta_d: num(c[0], "constants")?,
            alpha_db_km: num(c[1], "constants")?,
            f_e: num(c[2], "constants")?,
            epsilon: num(c[3], "constants")?,
        };
        let feasibility = match words("feasibility")?.as_slice() {
            ["none"] => FeasibilityCheck::None,
            ["every", n] => FeasibilityCheck::Every(int(n, "feasibility")?),
            _ => return Err(bad("bad feasibility".into())),
        };
        let count = int(get("shards")?, "shards")?;
        let mut shards = Vec::with_capacity(count);
        let mut next = 0;
        for i in 0..count {
            let range = words(&format!("shard.{i}.range"))?;
            if range.len() != 2 {
                return Err(bad(format!("shard.{i}.range needs start end")));
            }
            let entry = ShardEntry {
                file: get(&format!("shard.{i}.file"))?.to_string(),
                range: (int(range[0], "range")?, int(range[1], "range")?),
                bytes: int(get(&format!("shard.{i}.bytes"))?, "bytes")? as u64,
                sha256: get(&format!("shard.{i}.sha256"))?.to_string(),
            };
            if entry.range.0 != next || entry.range.1 <= entry.range.0 {
                return Err(bad(format!("shard.{i} range is not contiguous")));
            }
            next = entry.range.1;
            shards.push(entry);
        }
        if next != grid.axes[0].count {
            return Err(bad("shards do not cover the first axis".into()));
        }
        Ok(Self {
            grid,
            model_sha256: get("model_sha256")?.to_string(),
            constants,
            feasibility,
            shards,
        })
    }
}

/// Split `count` first-axis indices into `shards` contiguous ranges whose
/// sizes differ by at most one.
pub fn shard_ranges(count: usize, shards: usize) -> Vec<(usize, usize)> {
    let shards = shards.clamp(1, count);
    let (base, extra) = (count / shards, count % shards);
    let mut start = 0;
    (0..shards)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = (start, start + len);
            start += len;
            r
        })
        .collect()
}

pub struct BuildOptions {
    pub shards: usize,
    pub feasibility: FeasibilityCheck,
    pub constants: DeviceConstants,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            shards: 1,
            feasibility: FeasibilityCheck::Every(1),
            constants: DeviceConstants::default(),
        }
    }
}

fn encode_header(grid: &GridSpec, range: (usize, usize), fingerprint: &[u8; 32]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_BYTES);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for a in &grid.axes {
        buf.extend_from_slice(&a.min.to_le_bytes());
        buf.extend_from_slice(&a.max.to_le_bytes());
        buf.extend_from_slice(&(a.count as u32).to_le_bytes());
    }
    buf.extend_from_slice(&0u32.to_le_bytes());
    buf.extend_from_slice(&(range.0 as u32).to_le_bytes());
    buf.extend_from_slice(&(range.1 as u32).to_le_bytes());
    buf.extend_from_slice(fingerprint);
    let nodes = ((range.1 - range.0) * grid.slab_nodes()) as u64;
    buf.extend_from_slice(&nodes.to_le_bytes());
    debug_assert_eq!(buf.len(), HEADER_BYTES);
    buf
}

/// Parameters stored for one node: the repaired prediction rounded to f32.
pub fn node_record(raw: &[f64]) -> [f32; 6] {
    let p = repair(&raw.try_into().expect("six outputs"));
    p.to_array().map(|v| v as f32)
}

fn build_shard(
    model: &MlpModel,
    grid: &GridSpec,
    range: (usize, usize),
    options: &BuildOptions,
    fingerprint: &[u8; 32],
) -> Vec<u8> {
    let slab = grid.slab_nodes();
    let nodes = (range.1 - range.0) * slab;
    let first = range.0 * slab;
    let mut buf = encode_header(grid, range, fingerprint);
    buf.reserve(nodes * RECORD_BYTES);
    let features = Array2::from_shape_fn((nodes, 4), |(i, k)| {
        grid.axes[k].value(grid.unflatten(first + i)[k])
    });
    let raw = model
        .forward_batch(features.view())
        .expect("checked input width");
    for (i, out) in raw.outer_iter().enumerate() {
        let record = node_record(out.as_slice().expect("contiguous"));
        for v in record {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let flat = first + i;
        let flag = match options.feasibility {
            FeasibilityCheck::Every(n) if n > 0 && flat.is_multiple_of(n) => {
                let f: [f64; 4] = std::array::from_fn(|k| features[[i, k]]);
                let e = denormalize(&f, &options.constants);
                let p = ProtocolParams::from_array(record.map(f64::from));
                match key_rate(&e, &p) {
                    Ok(r) if r > 0.0 => NodeFlag::Feasible,
                    _ => NodeFlag::Infeasible,
                }
            }
            _ => NodeFlag::Unchecked,
        };
        buf.push(flag as u8);
    }
    buf
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Evaluate the model at every grid node and write the shards and manifest
/// into `dir`.
pub fn build_lut(
    model: &MlpModel,
    grid: &GridSpec,
    dir: &Path,
    options: &BuildOptions,
) -> Result<Manifest, LutError> {
    grid.validate()?;
    if model.input_dim() != 4 || model.output_dim() != 6 {
        return Err(LutError::ModelShape {
            inputs: model.input_dim(),
            outputs: model.output_dim(),
        });
    }
    if let FeasibilityCheck::Every(0) = options.feasibility {
        return Err(LutError::InvalidGrid(
            "feasibility stride must be >= 1".into(),
        ));
    }
    fs::create_dir_all(dir)?;
    let fingerprint = model.fingerprint();
    let ranges = shard_ranges(grid.axes[0].count, options.shards);
    let width = ranges.len().to_string().len().max(4);
    let shards: Vec<ShardEntry> = ranges
        .par_iter()
        .enumerate()
        .map(|(i, &range)| {
            let bytes = build_shard(model, grid, range, options, &fingerprint);
            let file = format!("shard_{i:0width$}.qlut");
            fs::write(dir.join(&file), &bytes)?;
            Ok(ShardEntry {
                file,
                range,
                bytes: bytes.len() as u64,
                sha256: sha256_hex(&bytes),
            })
        })
        .collect::<Result<_, LutError>>()?;
    let manifest = Manifest {
        grid: *grid,
        model_sha256: hex::encode(fingerprint),
        constants: options.constants,
        feasibility: options.feasibility,
        shards,
    };
    fs::write(dir.join(MANIFEST_NAME), manifest.to_text())?;
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LutAnswer {
    pub params: ProtocolParams,
    pub flag: NodeFlag,
    /// Set when some feature lay outside the grid and was clamped.
    pub out_of_range: bool,
    pub node: [usize; 4],
}

struct Shard {
    bytes: Vec<u8>,
}

/// Read-only view of a built table. Shards are loaded on first use.
pub struct Lut {
    dir: PathBuf,
    manifest: Manifest,
    shards: Vec<OnceLock<Arc<Shard>>>,
}

impl Lut {
    /// Open the table whose manifest is `path`, or which lives in directory `path`.
    pub fn open(path: &Path) -> Result<Self, LutError> {
        let manifest_path = if path.is_dir() {
            path.join(MANIFEST_NAME)
        } else {
            path.to_path_buf()
        };
        let text = fs::read_to_string(&manifest_path)?;
        let manifest = Manifest::parse(&text)?;
        let dir = manifest_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        let shards = manifest.shards.iter().map(|_| OnceLock::new()).collect();
        Ok(Self {
            dir,
            manifest,
            shards,
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    /// Number of shards currently resident.
    pub fn loaded_shards(&self) -> usize {
        self.shards.iter().filter(|s| s.get().is_some()).count()
    }

    fn shard(&self, i: usize) -> Result<Arc<Shard>, LutError> {
        if let Some(s) = self.shards[i].get() {
            return Ok(s.clone());
        }
        let entry = &self.manifest.shards[i];
        let path = self.dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => LutError::MissingShard(i, path.clone()),
            _ => LutError::Io(e),
        })?;
        let bad = |msg: &str| LutError::Format {
            path: path.clone(),
            msg: msg.into(),
        };
        if bytes.len() as u64 != entry.bytes || sha256_hex(&bytes) != entry.sha256 {
            return Err(LutError::FingerprintMismatch(path));
        }
        if bytes.len() < HEADER_BYTES || &bytes[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        let expected = encode_header(
            &self.manifest.grid,
            entry.range,
            &hex::decode(&self.manifest.model_sha256)
                .ok()
                .and_then(|v| <[u8; 32]>::try_from(v).ok())
                .ok_or_else(|| {
                    LutError::Manifest("model_sha256 is not a SHA-256 hex digest".into())
                })?,
        );
        if bytes[..HEADER_BYTES] != expected[..] {
            return Err(LutError::FingerprintMismatch(path));
        }
        let nodes = (entry.range.1 - entry.range.0) * self.manifest.grid.slab_nodes();
        if bytes.len() != HEADER_BYTES + nodes * RECORD_BYTES {
            return Err(bad("payload length does not match the grid"));
        }
        let shard = Arc::new(Shard { bytes });
        Ok(self.shards[i].get_or_init(|| shard).clone())
    }

    /// Record of the node nearest to `e`.
    pub fn query(&self, e: &ExperimentParams) -> Result<LutAnswer, LutError> {
        let f = normalize(e)?;
        let grid = &self.manifest.grid;
        let mut node = [0; 4];
        let mut out_of_range = false;
        for k in 0..4 {
            let (i, outside) = grid.axes[k].nearest(f[k]);
            node[k] = i;
            out_of_range |= outside;
        }
        let s = self
            .manifest
            .shards
            .iter()
            .position(|s| node[0] >= s.range.0 && node[0] < s.range.1)
            .expect("manifest covers the first axis");
        let shard = self.shard(s)?;
        let local = grid.flat_index(node) - self.manifest.shards[s].range.0 * grid.slab_nodes();
        let at = HEADER_BYTES + local * RECORD_BYTES;
        let rec = &shard.bytes[at..at + RECORD_BYTES];
        let values: [f64; 6] = std::array::from_fn(|j| {
            f64::from(f32::from_le_bytes(
                rec[4 * j..4 * j + 4].try_into().unwrap(),
            ))
        });
        let flag = NodeFlag::from_byte(rec[24]).ok_or_else(|| LutError::Format {
            path: self.dir.join(&self.manifest.shards[s].file),
            msg: format!("unknown flag {}", rec[24]),
        })?;
        Ok(LutAnswer {
            params: ProtocolParams::from_array(values),
            flag,
            out_of_range,
            node,
        })
    }
}

/// Open the table and answer one query.
pub fn query_lut(path: &Path, e: &ExperimentParams) -> Result<LutAnswer, LutError> {
    Lut::open(path)?.query(e)
}
