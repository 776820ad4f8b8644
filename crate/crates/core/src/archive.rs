//! Model archives: a JSON manifest plus a little-endian tensor blob, stored
//! side by side in one directory.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dan::{AlphaSelector, Architecture, ControllerMode, ControllerModule, DanNetwork, Task, TaskConv};
use crate::error::{io_at, DanError, Result};
use crate::nn::Head;
use crate::tensor::{FilterBank, Tensor};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "weights.danw";
pub const BLOB_MAGIC: [u8; 4] = *b"DANW";
pub const BLOB_VERSION: u32 = 1;
pub const FORMAT_VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerEntry {
    Controlled { mode: ControllerMode },
    Independent { frozen: bool },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskEntry {
    pub name: String,
    pub head: Vec<usize>,
    pub head_frozen: bool,
    /// Empty for the base task.
    pub layers: Vec<LayerEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub architecture: Architecture,
    pub base_frozen: bool,
    pub conv_frozen: Vec<bool>,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub tasks: Vec<TaskEntry>,
    pub alpha: AlphaSelector,
    /// Tensor names in blob order.
    pub tensors: Vec<String>,
}

impl Manifest {
    pub fn describe(net: &DanNetwork) -> Self {
        let tasks = net
            .tasks
            .iter()
            .map(|t| TaskEntry {
                name: t.name.clone(),
                head: t.head.widths(),
                head_frozen: t.head.frozen,
                layers: t
                    .convs
                    .iter()
                    .map(|c| match c {
                        TaskConv::Controlled(c) => LayerEntry::Controlled { mode: c.mode },
                        TaskConv::Independent(fb) => LayerEntry::Independent { frozen: fb.frozen },
                    })
                    .collect(),
            })
            .collect();
        let (bn_eps, bn_momentum) =
            net.bns.first().map_or((crate::nn::BN_EPS, crate::nn::BN_MOMENTUM), |b| (b.eps, b.momentum));
        Self {
            format_version: FORMAT_VERSION,
            architecture: net.arch.clone(),
            base_frozen: net.base_frozen,
            conv_frozen: net.convs.iter().map(|c| c.frozen).collect(),
            bn_eps,
            bn_momentum,
            tasks,
            alpha: net.alpha.clone(),
            tensors: net.keys().iter().map(ToString::to_string).collect(),
        }
    }

    /// A network with the manifest's structure and placeholder values.
    pub fn skeleton(&self) -> Result<DanNetwork> {
        if self.format_version != FORMAT_VERSION {
            return Err(DanError::VersionMismatch { expected: FORMAT_VERSION, found: self.format_version });
        }
        let base = self.tasks.first().ok_or_else(|| DanError::Manifest("no tasks".into()))?;
        if !base.layers.is_empty() {
            return Err(DanError::Manifest("base task lists conv layers".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut arch = self.architecture.clone();
        arch.head = base.head.clone();
        let mut net = DanNetwork::new(arch, &base.name, &mut rng)?;
        let n_conv = net.convs.len();
        if self.conv_frozen.len() != n_conv {
            return Err(DanError::Manifest(format!("{} frozen flags for {n_conv} conv layers", self.conv_frozen.len())));
        }
        for (c, &f) in net.convs.iter_mut().zip(&self.conv_frozen) {
            c.frozen = f;
        }
        net.tasks[0].head.frozen = base.head_frozen;
        let feature_len = net.arch.feature_len()?;
        for entry in &self.tasks[1..] {
            if entry.layers.len() != n_conv {
                return Err(DanError::Manifest(format!(
                    "task {:?} has {} conv bindings for {n_conv} conv layers",
                    entry.name,
                    entry.layers.len()
                )));
            }
            let convs = entry
                .layers
                .iter()
                .zip(&net.convs)
                .enumerate()
                .map(|(layer, (l, base))| match *l {
                    LayerEntry::Controlled { mode } => TaskConv::Controlled(ControllerModule {
                        w: Tensor::zeros(&[base.c_out(), base.c_out()]),
                        bias: Tensor::zeros(&[base.c_out()]),
                        mode,
                        layer,
                    }),
                    LayerEntry::Independent { frozen } => {
                        let mut fb = base.clone();
                        fb.frozen = frozen;
                        TaskConv::Independent(fb)
                    }
                })
                .collect();
            let mut head = Head::random(feature_len, &entry.head, &mut rng)?;
            head.frozen = entry.head_frozen;
            for bn in &mut net.bns {
                bn.add_task_from(0);
            }
            net.tasks.push(Task { name: entry.name.clone(), head, convs });
        }
        for bn in &mut net.bns {
            bn.eps = self.bn_eps;
            bn.momentum = self.bn_momentum;
        }
        if self.alpha.task_count() != net.tasks.len() {
            return Err(DanError::Manifest(format!(
                "alpha has {} entries for {} tasks",
                self.alpha.task_count(),
                net.tasks.len()
            )));
        }
        net.alpha = self.alpha.clone();
        net.base_frozen = self.base_frozen;
        Ok(net)
    }
}

/// Serializes named tensors in order.
pub fn encode_blob(tensors: &[(String, &Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.write_all(&BLOB_MAGIC)?;
    out.write_all(&BLOB_VERSION.to_le_bytes())?;
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| DanError::InvalidArgument(format!("name too long: {name}")))?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.push(DTYPE_F64);
        let ndim = u8::try_from(t.ndim()).map_err(|_| DanError::InvalidArgument(format!("{name}: too many dims")))?;
        out.push(ndim);
        for &d in t.dims() {
            let d = u32::try_from(d).map_err(|_| DanError::InvalidArgument(format!("{name}: dim too large")))?;
            out.write_all(&d.to_le_bytes())?;
        }
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(out)
}

pub fn decode_blob(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = cur.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != BLOB_MAGIC {
        return Err(DanError::BadMagic { expected: BLOB_MAGIC, found: magic });
    }
    let version = u32::from_le_bytes(cur.take(4, "version")?.try_into().expect("4 bytes"));
    if version != BLOB_VERSION {
        return Err(DanError::VersionMismatch { expected: BLOB_VERSION, found: version });
    }
    let mut out = Vec::new();
    while cur.pos < bytes.len() {
        let len = u16::from_le_bytes(cur.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
        let name = String::from_utf8(cur.take(len, "name")?.to_vec())
            .map_err(|_| DanError::Inconsistent("tensor name is not UTF-8".into()))?;
        let dtype = cur.take(1, &name)?[0];
        let ndim = cur.take(1, &name)?[0] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(u32::from_le_bytes(cur.take(4, &name)?.try_into().expect("4 bytes")) as usize);
        }
        let n: usize = dims.iter().product();
        let data: Vec<f64> = match dtype {
            DTYPE_F64 => cur.take(8 * n, &name)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect(),
            DTYPE_F32 => cur
                .take(4 * n, &name)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4")) as f64)
                .collect(),
            other => return Err(DanError::Inconsistent(format!("{name}: unknown dtype tag {other}"))),
        };
        out.push((name, Tensor::new(dims, data)?));
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(DanError::Truncated(format!("{what} at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

/// Writes `dir/manifest.json` and `dir/weights.danw`.
pub fn save_model(net: &DanNetwork, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = Manifest::describe(net);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| DanError::Manifest(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), json + "\n")?;
    let keys = net.keys();
    let named: Vec<(String, &Tensor)> =
        keys.iter().map(|k| (k.to_string(), net.tensor(*k).expect("listed key"))).collect();
    fs::write(dir.join(BLOB_FILE), encode_blob(&named)?)?;
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_at(&path))?;
    serde_json::from_str(&text).map_err(|e| DanError::Manifest(e.to_string()))
}

pub fn load_model(dir: &Path) -> Result<DanNetwork> {
    let manifest = load_manifest(dir)?;
    let mut net = manifest.skeleton()?;
    let blob_path = dir.join(BLOB_FILE);
    let blob = decode_blob(&fs::read(&blob_path).map_err(io_at(&blob_path))?)?;
    let mut by_name: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, t) in blob {
        if by_name.insert(name.clone(), t).is_some() {
            return Err(DanError::Inconsistent(format!("tensor {name} appears twice")));
        }
    }
    let keys = net.keys();
    let expected: Vec<String> = keys.iter().map(ToString::to_string).collect();
    if expected != manifest.tensors {
        return Err(DanError::Inconsistent("manifest tensor list does not match its architecture".into()));
    }
    for (key, name) in keys.iter().zip(&expected) {
        let t = by_name.remove(name).ok_or_else(|| DanError::Inconsistent(format!("blob lacks tensor {name}")))?;
        let slot = net.tensor_mut(*key).expect("listed key");
        if slot.dims() != t.dims() {
            return Err(DanError::Inconsistent(format!("{name}: blob dims {:?}, manifest implies {:?}", t.dims(), slot.dims())));
        }
        *slot = t;
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(DanError::Inconsistent(format!("blob has unexpected tensor {extra}")));
    }
    Ok(net)
}

/// A bank read straight from an archive, for least-squares targets.
pub fn load_filter_banks(dir: &Path) -> Result<Vec<FilterBank>> {
    let net = load_model(dir)?;
    Ok(net.convs)
}
