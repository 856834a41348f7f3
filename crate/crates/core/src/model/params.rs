//! Named parameter storage, initialisation and the on-disk checkpoint format.
//!
//! A checkpoint is a directory holding three files:
//! `model.toml` (the architecture), `manifest.txt` (one line per tensor:
//! name, shape, dtype, byte offset, role) and `params.bin` (all tensors as
//! little-endian `f32`, concatenated in manifest order).

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Version of the on-disk checkpoint layout.
pub const FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_FILES: [&str; 3] = [CONFIG, MANIFEST, BLOB];
const MANIFEST: &str = "manifest.txt";
const BLOB: &str = "params.bin";
const CONFIG: &str = "model.toml";
const MANIFEST_HEADER: &str = "# cmnet checkpoint v1: name\tshape\tdtype\toffset\trole";

/// Whether an entry is optimised or carried along as state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Trainable,
    /// Batch-norm running statistics.
    Buffer,
}

impl Role {
    fn as_str(self) -> &'static str {
        match self {
            Role::Trainable => "param",
            Role::Buffer => "buffer",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub tensor: Tensor,
    pub role: Role,
}

/// Ordered, uniquely named tensors. Insertion order is the serialisation
/// order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

/// Rounds to the nearest `f32`, so that values survive a checkpoint round
/// trip bit-exactly.
pub fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, role: Role) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Entry {
            name,
            tensor: tensor.map(round_f32),
            role,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].tensor)
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = &mut Entry> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Entry> {
        self.entries.iter().filter(|e| e.role == Role::Trainable)
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.trainable().map(|e| e.tensor.len()).sum()
    }

    /// Scalars held as running statistics.
    pub fn buffer_count(&self) -> usize {
        self.entries.iter().filter(|e| e.role == Role::Buffer).map(|e| e.tensor.len()).sum()
    }

    /// Trainable scalars per block; the block is the name up to the first dot.
    pub fn breakdown(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for e in self.trainable() {
            let block = e.name.split('.').next().unwrap_or(&e.name).to_string();
            *out.entry(block).or_insert(0) += e.tensor.len();
        }
        out
    }

    /// Re-rounds every entry to `f32` precision.
    pub fn round_to_f32(&mut self) {
        for e in &mut self.entries {
            for v in e.tensor.data_mut() {
                *v = round_f32(*v);
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.tensor.all_finite())
    }

    /// SHA-256 over names, shapes and values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            for &d in e.tensor.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in e.tensor.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// Same names, roles and shapes, in the same order.
    pub fn same_layout(&self, other: &ParameterStore) -> std::result::Result<(), String> {
        if self.entries.len() != other.entries.len() {
            return Err(format!("{} tensors vs {} expected", self.entries.len(), other.entries.len()));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name || a.role != b.role || a.tensor.shape() != b.tensor.shape() {
                return Err(format!(
                    "{} {:?} does not match expected {} {:?}",
                    a.name,
                    a.tensor.shape(),
                    b.name,
                    b.tensor.shape()
                ));
            }
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, cfg: &ModelConfig, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::from(MANIFEST_HEADER);
        manifest.push('\n');
        let mut blob = Vec::new();
        for e in &self.entries {
            let shape: Vec<String> = e.tensor.shape().iter().map(|d| d.to_string()).collect();
            let _ = writeln!(
                manifest,
                "{}\t{}\tf32\t{}\t{}",
                e.name,
                shape.join("x"),
                blob.len(),
                e.role.as_str()
            );
            for &v in e.tensor.data() {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let write = |name: &str, bytes: &[u8]| {
            let p = dir.join(name);
            fs::write(&p, bytes).map_err(|e| Error::io(p, e))
        };
        write(CONFIG, cfg.to_toml().as_bytes())?;
        write(MANIFEST, manifest.as_bytes())?;
        write(BLOB, &blob)
    }
}

/// Loads a checkpoint and validates its tensors against the architecture
/// stored alongside it.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(ModelConfig, ParameterStore)> {
    let dir = dir.as_ref();
    let cfg_path = dir.join(CONFIG);
    let text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let cfg = ModelConfig::from_toml(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", cfg_path.display())))?;
    let store = load_against(dir, &cfg)?;
    Ok((cfg, store))
}

/// Loads a checkpoint that must match `expected`.
pub fn load_checkpoint_for(dir: impl AsRef<Path>, expected: &ModelConfig) -> Result<ParameterStore> {
    let (cfg, store) = load_checkpoint(dir)?;
    if cfg.encoder_channels != expected.encoder_channels
        || cfg.decoder_channels != expected.decoder_channels
        || cfg.attention_dim != expected.attention_dim
        || cfg.toggles != expected.toggles
        || cfg.gru_hidden != expected.gru_hidden
    {
        return Err(Error::Checkpoint("checkpoint architecture differs from the requested configuration".into()));
    }
    Ok(store)
}

fn load_against(dir: &Path, cfg: &ModelConfig) -> Result<ParameterStore> {
    let man_path = dir.join(MANIFEST);
    let manifest = fs::read_to_string(&man_path).map_err(|e| Error::io(&man_path, e))?;
    let blob_path = dir.join(BLOB);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let bad = |m: String| Error::Checkpoint(format!("{}: {m}", man_path.display()));

    let mut store = ParameterStore::new();
    let mut expected_offset = 0usize;
    for (ln, line) in manifest.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let [name, shape, dtype, offset, role] = cols[..] else {
            return Err(bad(format!("line {} has {} columns", ln + 1, cols.len())));
        };
        if dtype != "f32" {
            return Err(bad(format!("unsupported dtype {dtype}")));
        }
        let shape: Vec<usize> = shape
            .split('x')
            .map(|d| d.parse().map_err(|_| bad(format!("bad shape on line {}", ln + 1))))
            .collect::<Result<_>>()?;
        let offset: usize = offset.parse().map_err(|_| bad(format!("bad offset on line {}", ln + 1)))?;
        if offset != expected_offset {
            return Err(bad(format!("{name}: offset {offset}, expected {expected_offset}")));
        }
        let n: usize = shape.iter().product();
        let bytes = blob
            .get(offset..offset + 4 * n)
            .ok_or_else(|| bad(format!("{name}: blob too short")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let role = match role {
            "param" => Role::Trainable,
            "buffer" => Role::Buffer,
            other => return Err(bad(format!("unknown role {other}"))),
        };
        store.insert(name, Tensor::new(&shape, data)?, role)?;
        expected_offset += 4 * n;
    }
    if expected_offset != blob.len() {
        return Err(bad(format!("blob has {} trailing bytes", blob.len() - expected_offset)));
    }
    let reference = super::init_parameters(cfg)?;
    store
        .same_layout(&reference)
        .map_err(|m| Error::Checkpoint(format!("layout mismatch: {m}")))?;
    Ok(store)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of arbitrary text, hex encoded.
pub fn sha256_hex(text: &str) -> String {
    hex(&Sha256::digest(text.as_bytes()))
}

/// Declares parameters with their initial values.
pub(crate) struct Init<'a> {
    pub store: &'a mut ParameterStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> Result<()> {
        let t = Tensor::uniform(shape, -bound, bound, self.rng);
        self.store.insert(name, t, Role::Trainable)
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> Result<()> {
        self.store.insert(name, Tensor::zeros(shape), Role::Trainable)
    }

    /// `[C_out, C_in, kT, kF]` kernel plus `[C_out]` bias.
    pub fn conv(&mut self, prefix: &str, c_out: usize, c_in: usize, k: (usize, usize)) -> Result<()> {
        let fan_in = c_in * k.0 * k.1;
        self.uniform(format!("{prefix}.w"), &[c_out, c_in, k.0, k.1], (6.0 / fan_in as f64).sqrt())?;
        self.zeros(format!("{prefix}.b"), &[c_out])
    }

    /// `[C_in, C_out, kT, kF]` kernel plus `[C_out]` bias.
    pub fn deconv(&mut self, prefix: &str, c_in: usize, c_out: usize, k: (usize, usize)) -> Result<()> {
        let fan_in = c_in * k.0 * k.1;
        self.uniform(format!("{prefix}.w"), &[c_in, c_out, k.0, k.1], (6.0 / fan_in as f64).sqrt())?;
        self.zeros(format!("{prefix}.b"), &[c_out])
    }

    /// `[in, out]` matrix plus `[out]` bias.
    pub fn linear(&mut self, prefix: &str, n_in: usize, n_out: usize) -> Result<()> {
        self.uniform(format!("{prefix}.w"), &[n_in, n_out], (6.0 / n_in as f64).sqrt())?;
        self.zeros(format!("{prefix}.b"), &[n_out])
    }

    pub fn batch_norm(&mut self, prefix: &str, c: usize) -> Result<()> {
        self.store.insert(format!("{prefix}.gamma"), Tensor::ones(&[c]), Role::Trainable)?;
        self.store.insert(format!("{prefix}.beta"), Tensor::zeros(&[c]), Role::Trainable)?;
        self.store.insert(format!("{prefix}.mean"), Tensor::zeros(&[c]), Role::Buffer)?;
        self.store.insert(format!("{prefix}.var"), Tensor::ones(&[c]), Role::Buffer)
    }

    pub fn prelu(&mut self, prefix: &str, c: usize) -> Result<()> {
        self.store.insert(format!("{prefix}.alpha"), Tensor::full(&[c], 0.25), Role::Trainable)
    }

    /// Input weights `[3H, I]`, recurrent weights `[3H, H]`, bias `[3H]`;
    /// gate order is update, reset, candidate.
    pub fn gru(&mut self, prefix: &str, input: usize, hidden: usize) -> Result<()> {
        let bound = 1.0 / (hidden as f64).sqrt();
        self.uniform(format!("{prefix}.w"), &[3 * hidden, input], bound)?;
        self.uniform(format!("{prefix}.u"), &[3 * hidden, hidden], bound)?;
        self.zeros(format!("{prefix}.b"), &[3 * hidden])
    }
}
