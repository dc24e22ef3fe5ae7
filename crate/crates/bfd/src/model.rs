//! Conversions between archives and core types, and the factor/mode caches.

use std::path::{Path, PathBuf};

use bfd_core::synth::{generate, SynthConfig};
use bfd_core::{decompose_head, ActivationBlock, FactorSet, Matrix, ModeBasis, TokenSubset};
use serde_json::json;

use crate::error::{BfdError, Result};
use crate::store::{
    activation_name, weight_name, write_archive, Archive, ArchiveKind, ArchiveManifest, NamedTensor,
};

pub fn load_block(archive: &Archive, layer: usize) -> Result<ActivationBlock> {
    let m = archive.manifest();
    check_layer(m, layer)?;
    let name = activation_name(layer);
    let t = archive.read_shaped(&name, &[m.num_images, m.num_tokens(), m.embed_dim])?;
    ActivationBlock::from_f32(layer, m.num_images, m.embed_dim, m.layout(), &t.data)
        .map_err(|e| BfdError::validation(name, e.to_string()))
}

pub fn load_weights(archive: &Archive, layer: usize, head: usize) -> Result<(Matrix, Matrix)> {
    let m = archive.manifest();
    check_layer(m, layer)?;
    if head >= m.num_heads {
        return Err(BfdError::Usage(format!("head {head} out of range ({} heads)", m.num_heads)));
    }
    let shape = [m.embed_dim, m.head_dim];
    let read = |which: &str| -> Result<Matrix> {
        let name = weight_name(layer, head, which);
        let t = archive.read_shaped(&name, &shape)?;
        if t.data.iter().any(|v| !v.is_finite()) {
            return Err(BfdError::validation(name, "non-finite weight"));
        }
        Ok(Matrix::from_vec(shape[0], shape[1], t.data.iter().map(|&v| v as f64).collect())?)
    };
    Ok((read("wq")?, read("wk")?))
}

pub fn load_basis(archive: &Archive, layer: usize, head: usize) -> Result<ModeBasis> {
    let (wq, wk) = load_weights(archive, layer, head)?;
    Ok(decompose_head(&wq, &wk)?.with_index(layer, head))
}

pub fn check_layer(m: &ArchiveManifest, layer: usize) -> Result<()> {
    let captured = m.captured_layers();
    if !captured.contains(&layer) {
        return Err(BfdError::Usage(format!("layer {layer} is not in the archive (captured layers {captured:?})")));
    }
    Ok(())
}

/// Generate a synthetic model archive in `dir`.
pub fn write_synth_archive(cfg: &SynthConfig, dir: &Path) -> Result<ArchiveManifest> {
    let out = generate(cfg)?;
    let mut manifest = ArchiveManifest::new(
        "synthetic",
        cfg.num_layers,
        cfg.num_heads,
        cfg.dim,
        cfg.head_dim,
        cfg.num_images,
        cfg.num_special,
        cfg.grid_h,
        cfg.grid_w,
    );
    manifest.assign_entries(&out.tensors);
    for (k, v) in cfg.metadata() {
        manifest.metadata.insert(k, json!(v));
    }
    write_archive(dir, &manifest, &out.tensors)?;
    Ok(manifest)
}

fn f32s(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn f64s(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn cache_manifest(source: &Archive, kind: ArchiveKind, layers: &[usize]) -> ArchiveManifest {
    let mut m = source.manifest().clone();
    m.tensor_entries.clear();
    m.kind = Some(kind);
    m.metadata.clear();
    m.metadata.insert("source_digest".into(), json!(source.digest()));
    m.metadata.insert("layers".into(), json!(layers));
    m
}

pub fn factor_tensor_name(layer: usize, part: &str) -> String {
    format!("factors/layer{layer}/mu_{part}")
}

pub fn mode_tensor_name(layer: usize, head: usize, part: &str) -> String {
    format!("modes/layer{layer}/head{head}/{part}")
}

fn subset_name(subset: TokenSubset) -> &'static str {
    if subset.includes_special() {
        "all"
    } else {
        "patch"
    }
}

/// Write factor sets (all sharing one token subset) as a factors archive.
pub fn write_factor_cache(dir: &Path, source: &Archive, factors: &[FactorSet]) -> Result<()> {
    let layers: Vec<usize> = factors.iter().map(|f| f.layer).collect();
    let mut m = cache_manifest(source, ArchiveKind::Factors, &layers);
    let subset = factors.first().map_or(TokenSubset::PatchOnly, |f| f.subset);
    m.metadata.insert("token_subset".into(), json!(subset_name(subset)));
    let mut tensors = Vec::new();
    for f in factors {
        let t = f.num_tokens();
        tensors.push(NamedTensor {
            name: factor_tensor_name(f.layer, "layer"),
            shape: vec![f.dim],
            data: f32s(&f.mu_layer),
        });
        tensors.push(NamedTensor {
            name: factor_tensor_name(f.layer, "position"),
            shape: vec![t, f.dim],
            data: f32s(f.mu_position.as_slice()),
        });
        tensors.push(NamedTensor {
            name: factor_tensor_name(f.layer, "content"),
            shape: vec![f.num_images, t, f.dim],
            data: f32s(f.content_slice()),
        });
    }
    m.assign_entries(&tensors);
    write_archive(dir, &m, &tensors)
}

pub fn write_mode_cache(dir: &Path, source: &Archive, bases: &[ModeBasis]) -> Result<()> {
    let mut layers: Vec<usize> = bases.iter().map(|b| b.layer).collect();
    layers.dedup();
    let m0 = cache_manifest(source, ArchiveKind::Modes, &layers);
    let mut tensors = Vec::new();
    for b in bases {
        let (d, k) = b.u.shape();
        tensors.push(NamedTensor {
            name: mode_tensor_name(b.layer, b.head, "u"),
            shape: vec![d, k],
            data: f32s(b.u.as_slice()),
        });
        tensors.push(NamedTensor {
            name: mode_tensor_name(b.layer, b.head, "sigma"),
            shape: vec![k],
            data: f32s(&b.sigma),
        });
        tensors.push(NamedTensor {
            name: mode_tensor_name(b.layer, b.head, "v"),
            shape: vec![d, k],
            data: f32s(b.v.as_slice()),
        });
    }
    let mut m = m0;
    m.assign_entries(&tensors);
    write_archive(dir, &m, &tensors)
}

/// An opened cache archive, checked against the archive it was built from.
#[derive(Debug, Clone)]
pub struct Cache {
    archive: Archive,
}

impl Cache {
    /// `what` names the stage that produces the cache, for error messages.
    pub fn open(dir: &Path, source: &Archive, kind: ArchiveKind, what: &str) -> Result<Self> {
        if !dir.join(crate::store::MANIFEST_FILE).is_file() {
            return Err(BfdError::Dependency(format!(
                "no cached {} in {}; run `bfd {what}` first",
                kind_name(kind),
                dir.display()
            )));
        }
        let archive = Archive::open(dir)?;
        if archive.manifest().kind() != kind {
            return Err(BfdError::Dependency(format!("{} does not hold {}", dir.display(), kind_name(kind))));
        }
        let digest = archive.manifest().metadata.get("source_digest").and_then(|v| v.as_str());
        if digest != Some(source.digest()) {
            return Err(BfdError::Dependency(format!(
                "cached {} in {} were built from a different archive; rerun `bfd {what}`",
                kind_name(kind),
                dir.display()
            )));
        }
        Ok(Self { archive })
    }

    pub fn archive(&self) -> &Archive {
        &self.archive
    }

    pub fn token_subset(&self) -> TokenSubset {
        let all = self.archive.manifest().metadata.get("token_subset").and_then(|v| v.as_str()) == Some("all");
        TokenSubset::from_include_special(all)
    }

    fn require(&self, name: &str, stage: &str) -> Result<()> {
        if self.archive.contains(name) {
            Ok(())
        } else {
            Err(BfdError::Dependency(format!("cache lacks {name}; run `bfd {stage}` for that layer")))
        }
    }

    pub fn load_factors(&self, layer: usize) -> Result<FactorSet> {
        let m = self.archive.manifest();
        let (n, d) = (m.num_images, m.embed_dim);
        let subset = self.token_subset();
        let tokens: Vec<usize> = if subset.includes_special() {
            (0..m.num_tokens()).collect()
        } else {
            (m.num_special_tokens..m.num_tokens()).collect()
        };
        let t = tokens.len();
        for part in ["layer", "position", "content"] {
            self.require(&factor_tensor_name(layer, part), "factorize")?;
        }
        let mu_layer = self.archive.read_shaped(&factor_tensor_name(layer, "layer"), &[d])?;
        let mu_position = self.archive.read_shaped(&factor_tensor_name(layer, "position"), &[t, d])?;
        let mu_content = self.archive.read_shaped(&factor_tensor_name(layer, "content"), &[n, t, d])?;
        Ok(FactorSet::from_parts(
            layer,
            tokens,
            subset,
            f64s(&mu_layer.data),
            Matrix::from_vec(t, d, f64s(&mu_position.data))?,
            f64s(&mu_content.data),
        )?)
    }

    pub fn load_basis(&self, layer: usize, head: usize) -> Result<ModeBasis> {
        let u_name = mode_tensor_name(layer, head, "u");
        self.require(&u_name, "modes")?;
        let u = self.archive.read(&u_name)?;
        let (d, k) = (u.shape[0], u.shape[1]);
        let sigma = self.archive.read_shaped(&mode_tensor_name(layer, head, "sigma"), &[k])?;
        let v = self.archive.read_shaped(&mode_tensor_name(layer, head, "v"), &[d, k])?;
        Ok(ModeBasis {
            layer,
            head,
            u: Matrix::from_vec(d, k, f64s(&u.data))?,
            sigma: f64s(&sigma.data),
            v: Matrix::from_vec(d, k, f64s(&v.data))?,
        })
    }
}

fn kind_name(kind: ArchiveKind) -> &'static str {
    match kind {
        ArchiveKind::Model => "model tensors",
        ArchiveKind::Factors => "factors",
        ArchiveKind::Modes => "modes",
    }
}

/// `<out>/cache/factors` and `<out>/cache/modes`.
pub fn cache_dir(out: &Path, kind: ArchiveKind) -> PathBuf {
    let leaf = match kind {
        ArchiveKind::Model => "model",
        ArchiveKind::Factors => "factors",
        ArchiveKind::Modes => "modes",
    };
    out.join("cache").join(leaf)
}
