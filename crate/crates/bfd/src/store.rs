//! Archive directories: `manifest.json` plus raw little-endian `f32` files,
//! row-major with the last index fastest.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{Read, Seek, SeekFrom};
use std::path::{Component, Path, PathBuf};

use bfd_core::TokenLayout;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use bfd_core::synth::NamedTensor;

use crate::error::{BfdError, Result};

pub const FORMAT_VERSION: u64 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchiveKind {
    Model,
    Factors,
    Modes,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub file: String,
    pub byte_offset: u64,
}

impl TensorEntry {
    pub fn num_elements(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> u64 {
        self.num_elements() as u64 * 4
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveManifest {
    pub format_version: u64,
    pub model_name: String,
    pub num_layers: usize,
    pub num_heads: usize,
    pub embed_dim: usize,
    pub head_dim: usize,
    pub num_images: usize,
    pub num_patch_tokens: usize,
    pub num_special_tokens: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub tensor_entries: Vec<TensorEntry>,
    /// Absent means a model archive.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<ArchiveKind>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

pub fn activation_name(layer: usize) -> String {
    format!("activations/layer{layer}")
}

pub fn weight_name(layer: usize, head: usize, which: &str) -> String {
    format!("weights/layer{layer}/head{head}/{which}")
}

/// Tensors sharing their first two name segments share a file:
/// `weights/layer0/head1/wq` lives in `weights/layer0.bin`.
pub fn default_file_for(name: &str) -> String {
    let segments: Vec<&str> = name.split('/').collect();
    let stem = segments[..segments.len().min(2)].join("/");
    format!("{stem}.bin")
}

impl ArchiveManifest {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model_name: impl Into<String>,
        num_layers: usize,
        num_heads: usize,
        embed_dim: usize,
        head_dim: usize,
        num_images: usize,
        num_special_tokens: usize,
        grid_h: usize,
        grid_w: usize,
    ) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            model_name: model_name.into(),
            num_layers,
            num_heads,
            embed_dim,
            head_dim,
            num_images,
            num_patch_tokens: grid_h * grid_w,
            num_special_tokens,
            grid_h,
            grid_w,
            tensor_entries: Vec::new(),
            kind: None,
            metadata: BTreeMap::new(),
        }
    }

    pub fn kind(&self) -> ArchiveKind {
        self.kind.unwrap_or(ArchiveKind::Model)
    }

    pub fn num_tokens(&self) -> usize {
        self.num_special_tokens + self.num_patch_tokens
    }

    pub fn layout(&self) -> TokenLayout {
        TokenLayout::new(self.num_special_tokens, self.grid_h, self.grid_w)
    }

    pub fn entry(&self, name: &str) -> Option<&TensorEntry> {
        self.tensor_entries.iter().find(|e| e.name == name)
    }

    /// Replace the entries with a packed layout for `tensors`, in order,
    /// using [`default_file_for`].
    pub fn assign_entries(&mut self, tensors: &[NamedTensor]) {
        let mut offsets: BTreeMap<String, u64> = BTreeMap::new();
        self.tensor_entries = tensors
            .iter()
            .map(|t| {
                let file = default_file_for(&t.name);
                let offset = offsets.entry(file.clone()).or_insert(0);
                let entry = TensorEntry {
                    name: t.name.clone(),
                    dtype: "f32".into(),
                    shape: t.shape.clone(),
                    file,
                    byte_offset: *offset,
                };
                *offset += entry.byte_len();
                entry
            })
            .collect();
    }

    /// Check every manifest invariant that does not need the binary files.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(BfdError::UnknownVersion(self.format_version));
        }
        if self.grid_h * self.grid_w != self.num_patch_tokens {
            return Err(BfdError::Manifest(format!(
                "grid {}x{} does not hold {} patch tokens",
                self.grid_h, self.grid_w, self.num_patch_tokens
            )));
        }
        if self.grid_h == 0 || self.grid_w == 0 || self.embed_dim == 0 || self.num_images == 0 {
            return Err(BfdError::Manifest("grid, embed_dim and num_images must be positive".into()));
        }
        let mut names = HashSet::new();
        let mut ranges: BTreeMap<&str, Vec<(u64, u64, &str)>> = BTreeMap::new();
        for e in &self.tensor_entries {
            if !names.insert(e.name.as_str()) {
                return Err(BfdError::validation(&e.name, "declared more than once"));
            }
            if e.dtype != "f32" {
                return Err(BfdError::validation(&e.name, format!("dtype {:?} is not f32", e.dtype)));
            }
            let p = Path::new(&e.file);
            if e.file.is_empty() || p.components().any(|c| !matches!(c, Component::Normal(_))) {
                return Err(BfdError::validation(&e.name, format!("file {:?} is not a plain relative path", e.file)));
            }
            if e.byte_len() > 0 {
                ranges
                    .entry(e.file.as_str())
                    .or_default()
                    .push((e.byte_offset, e.byte_offset + e.byte_len(), e.name.as_str()));
            }
        }
        for spans in ranges.values_mut() {
            spans.sort_unstable();
            for pair in spans.windows(2) {
                if pair[1].0 < pair[0].1 {
                    return Err(BfdError::validation(pair[1].2, format!("overlaps tensor {}", pair[0].2)));
                }
            }
        }
        if self.kind() == ArchiveKind::Model {
            self.validate_model_tensors()?;
        }
        Ok(())
    }

    /// Layers with an activation tensor, ascending. An exporter may capture
    /// a subset of the model's layers.
    pub fn captured_layers(&self) -> Vec<usize> {
        let mut layers: Vec<usize> = self
            .tensor_entries
            .iter()
            .filter_map(|e| e.name.strip_prefix("activations/layer")?.parse().ok())
            .collect();
        layers.sort_unstable();
        layers.dedup();
        layers
    }

    fn validate_model_tensors(&self) -> Result<()> {
        let expect = |name: String, shape: Vec<usize>| -> Result<()> {
            match self.entry(&name) {
                None => Err(BfdError::validation(name, "required tensor is not declared")),
                Some(e) if e.shape != shape => Err(BfdError::validation(
                    name,
                    format!("shape {:?}, expected {:?}", e.shape, shape),
                )),
                Some(_) => Ok(()),
            }
        };
        if self.num_heads == 0 || self.head_dim == 0 || self.num_layers == 0 {
            return Err(BfdError::Manifest("num_layers, num_heads and head_dim must be positive".into()));
        }
        let layers = self.captured_layers();
        if layers.is_empty() {
            return Err(BfdError::validation(activation_name(0), "model archive declares no activation tensor"));
        }
        for layer in layers {
            if layer >= self.num_layers {
                return Err(BfdError::validation(
                    activation_name(layer),
                    format!("layer index beyond num_layers = {}", self.num_layers),
                ));
            }
            expect(activation_name(layer), vec![self.num_images, self.num_tokens(), self.embed_dim])?;
            for head in 0..self.num_heads {
                for which in ["wq", "wk"] {
                    expect(weight_name(layer, head, which), vec![self.embed_dim, self.head_dim])?;
                }
            }
        }
        Ok(())
    }
}

fn check_tensors(manifest: &ArchiveManifest, tensors: &[NamedTensor]) -> Result<()> {
    let by_name: HashMap<&str, &NamedTensor> = tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    for t in tensors {
        let Some(e) = manifest.entry(&t.name) else {
            return Err(BfdError::validation(&t.name, "tensor has no manifest entry"));
        };
        if e.shape != t.shape || t.data.len() != e.num_elements() {
            return Err(BfdError::validation(
                &t.name,
                format!(
                    "manifest declares shape {:?} ({} values) but tensor has shape {:?} with {} values",
                    e.shape,
                    e.num_elements(),
                    t.shape,
                    t.data.len()
                ),
            ));
        }
    }
    for e in &manifest.tensor_entries {
        if !by_name.contains_key(e.name.as_str()) {
            return Err(BfdError::validation(&e.name, "manifest entry has no tensor"));
        }
    }
    Ok(())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| BfdError::io(path, e))
}

/// Write `manifest.json` and the binary files into `dir`. The output bytes
/// depend only on the inputs.
pub fn write_archive(dir: &Path, manifest: &ArchiveManifest, tensors: &[NamedTensor]) -> Result<()> {
    manifest.validate()?;
    check_tensors(manifest, tensors)?;
    create_dir(dir)?;
    let by_name: HashMap<&str, &NamedTensor> = tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let mut files: BTreeMap<&str, Vec<&TensorEntry>> = BTreeMap::new();
    for e in &manifest.tensor_entries {
        files.entry(e.file.as_str()).or_default().push(e);
    }
    for (file, entries) in files {
        let size = entries.iter().map(|e| e.byte_offset + e.byte_len()).max().unwrap_or(0);
        let mut buf = vec![0u8; size as usize];
        for e in entries {
            let start = e.byte_offset as usize;
            for (i, v) in by_name[e.name.as_str()].data.iter().enumerate() {
                buf[start + 4 * i..start + 4 * i + 4].copy_from_slice(&v.to_le_bytes());
            }
        }
        let path = dir.join(file);
        if let Some(parent) = path.parent() {
            create_dir(parent)?;
        }
        fs::write(&path, &buf).map_err(|e| BfdError::io(&path, e))?;
    }
    let mut json = serde_json::to_string_pretty(manifest).map_err(|e| BfdError::Other(e.to_string()))?;
    json.push('\n');
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, json).map_err(|e| BfdError::io(&path, e))
}

/// An opened, validated archive. Tensors are read on request.
#[derive(Debug, Clone)]
pub struct Archive {
    root: PathBuf,
    manifest: ArchiveManifest,
    digest: String,
}

pub fn read_archive(path: &Path) -> Result<Archive> {
    Archive::open(path)
}

impl Archive {
    pub fn open(path: &Path) -> Result<Self> {
        let manifest_path = path.join(MANIFEST_FILE);
        if !manifest_path.is_file() {
            return Err(BfdError::MissingArchive(path.to_path_buf()));
        }
        let bytes = fs::read(&manifest_path).map_err(|e| BfdError::io(&manifest_path, e))?;
        let value: serde_json::Value =
            serde_json::from_slice(&bytes).map_err(|e| BfdError::Manifest(format!("manifest.json: {e}")))?;
        match value.get("format_version").and_then(|v| v.as_u64()) {
            Some(FORMAT_VERSION) => {}
            Some(v) => return Err(BfdError::UnknownVersion(v)),
            None => return Err(BfdError::Manifest("format_version missing or not an integer".into())),
        }
        let manifest: ArchiveManifest =
            serde_json::from_value(value).map_err(|e| BfdError::Manifest(format!("manifest.json: {e}")))?;
        manifest.validate()?;
        let mut sizes: HashMap<&str, u64> = HashMap::new();
        for e in &manifest.tensor_entries {
            let actual = match sizes.get(e.file.as_str()) {
                Some(&s) => s,
                None => {
                    let file = path.join(&e.file);
                    let meta = fs::metadata(&file).map_err(|err| {
                        if err.kind() == std::io::ErrorKind::NotFound {
                            BfdError::MissingFile {
                                path: file.clone(),
                                tensor: e.name.clone(),
                            }
                        } else {
                            BfdError::io(&file, err)
                        }
                    })?;
                    sizes.insert(e.file.as_str(), meta.len());
                    meta.len()
                }
            };
            let needed = e.byte_offset + e.byte_len();
            if actual < needed {
                return Err(BfdError::Truncated {
                    tensor: e.name.clone(),
                    file: e.file.clone(),
                    needed,
                    actual,
                });
            }
        }
        let digest = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
        Ok(Self {
            root: path.to_path_buf(),
            manifest,
            digest,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &ArchiveManifest {
        &self.manifest
    }

    /// SHA-256 of `manifest.json`, hex.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn contains(&self, name: &str) -> bool {
        self.manifest.entry(name).is_some()
    }

    /// Read one tensor without touching the others.
    pub fn read(&self, name: &str) -> Result<NamedTensor> {
        let e = self
            .manifest
            .entry(name)
            .ok_or_else(|| BfdError::NotFound(name.to_string()))?;
        let data = self.read_elements(name, 0, e.num_elements())?;
        Ok(NamedTensor {
            name: e.name.clone(),
            shape: e.shape.clone(),
            data,
        })
    }

    /// `count` consecutive values of a tensor starting at flat index `start`.
    pub fn read_elements(&self, name: &str, start: usize, count: usize) -> Result<Vec<f32>> {
        let e = self
            .manifest
            .entry(name)
            .ok_or_else(|| BfdError::NotFound(name.to_string()))?;
        if start + count > e.num_elements() {
            return Err(BfdError::validation(
                name,
                format!("range {start}..{} exceeds {} values", start + count, e.num_elements()),
            ));
        }
        let path = self.root.join(&e.file);
        let mut f = fs::File::open(&path).map_err(|err| BfdError::io(&path, err))?;
        f.seek(SeekFrom::Start(e.byte_offset + 4 * start as u64))
            .map_err(|err| BfdError::io(&path, err))?;
        let mut buf = vec![0u8; 4 * count];
        f.read_exact(&mut buf).map_err(|err| {
            if err.kind() == std::io::ErrorKind::UnexpectedEof {
                BfdError::Truncated {
                    tensor: e.name.clone(),
                    file: e.file.clone(),
                    needed: e.byte_offset + e.byte_len(),
                    actual: fs::metadata(&path).map(|m| m.len()).unwrap_or(0),
                }
            } else {
                BfdError::io(&path, err)
            }
        })?;
        Ok(buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    /// Read and check the shape in one step.
    pub fn read_shaped(&self, name: &str, shape: &[usize]) -> Result<NamedTensor> {
        let t = self.read(name)?;
        if t.shape != shape {
            return Err(BfdError::validation(name, format!("shape {:?}, expected {:?}", t.shape, shape)));
        }
        Ok(t)
    }
}
