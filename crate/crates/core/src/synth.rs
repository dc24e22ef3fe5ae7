//! Synthetic archives with planted additive structure.
//!
//! Every layer's activations are `offset + γ_t + c[n,t]`, where `γ` is a
//! positional code centered over patch tokens (special tokens get their own
//! random embedding) and `c` is content centered over images at every
//! token. Factorizing such a layer recovers `μ_L = offset`, `μ_P = γ` and
//! `μ_C = c` up to `f32` storage rounding.
//!
//! Random stream (reproducible outside Rust): ChaCha20 keyed with the seed
//! as a little-endian `u64` zero-padded to 32 bytes, stream 0. Uniforms are
//! `(next_u64 >> 11) · 2⁻⁵³`; normals come from Box-Muller pairs, cosine
//! branch first. Draw order: offset `[d]`; then per layer the positional
//! frame or table, special embeddings `[S, d]`, fresh content `[N, T, d]`,
//! and per head `W_Q [d, d_h]` then `W_K [d, d_h]`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};

use crate::activations::TokenLayout;
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionPattern {
    /// 2-D grid coordinates embedded along two orthonormal directions.
    GridPlanar,
    /// Row and column sinusoids along four orthonormal directions.
    Fourier,
    /// Independent Gaussian code per patch.
    Random,
}

impl PositionPattern {
    pub fn name(self) -> &'static str {
        match self {
            PositionPattern::GridPlanar => "grid-planar",
            PositionPattern::Fourier => "fourier",
            PositionPattern::Random => "random",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "grid-planar" => Some(PositionPattern::GridPlanar),
            "fourier" => Some(PositionPattern::Fourier),
            "random" => Some(PositionPattern::Random),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_images: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub num_special: usize,
    pub dim: usize,
    pub head_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub position_scale: f64,
    pub content_scale: f64,
    pub global_offset_scale: f64,
    /// Fraction of the previous layer's content carried into the next
    /// (`c_ℓ = ρ c_{ℓ−1} + √(1−ρ²) fresh`).
    pub content_carryover: f64,
    pub seed: u64,
    pub pattern: PositionPattern,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_images: 64,
            grid_h: 4,
            grid_w: 4,
            num_special: 1,
            dim: 32,
            head_dim: 8,
            num_layers: 4,
            num_heads: 2,
            position_scale: 1.0,
            content_scale: 0.5,
            global_offset_scale: 1.0,
            content_carryover: 0.5,
            seed: 0,
            pattern: PositionPattern::GridPlanar,
        }
    }
}

impl SynthConfig {
    pub fn layout(&self) -> TokenLayout {
        TokenLayout::new(self.num_special, self.grid_h, self.grid_w)
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("num_images", self.num_images),
            ("grid_h", self.grid_h),
            ("grid_w", self.grid_w),
            ("dim", self.dim),
            ("head_dim", self.head_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Argument(format!("synth {name} must be positive")));
        }
        for (name, v) in [
            ("position_scale", self.position_scale),
            ("content_scale", self.content_scale),
            ("global_offset_scale", self.global_offset_scale),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Argument(format!("synth {name} must be a nonnegative number")));
            }
        }
        if !(0.0..1.0).contains(&self.content_carryover) {
            return Err(Error::Argument("content_carryover must lie in [0, 1)".into()));
        }
        let needed = match self.pattern {
            PositionPattern::GridPlanar => 2,
            PositionPattern::Fourier => 4,
            PositionPattern::Random => 1,
        };
        if self.dim < needed {
            return Err(Error::Argument(format!(
                "pattern {} needs dim >= {needed}",
                self.pattern.name()
            )));
        }
        Ok(())
    }

    /// Key/value pairs describing the generator, for archive metadata.
    pub fn metadata(&self) -> Vec<(String, String)> {
        let kv = |k: &str, v: String| (String::from(k), v);
        vec![
            kv("generator", "bfd-synth/1".into()),
            kv("rng", "chacha20-le-u64-seed/box-muller".into()),
            kv("seed", format!("{}", self.seed)),
            kv("pattern", self.pattern.name().into()),
            kv("position_scale", format!("{:?}", self.position_scale)),
            kv("content_scale", format!("{:?}", self.content_scale)),
            kv("global_offset_scale", format!("{:?}", self.global_offset_scale)),
            kv("content_carryover", format!("{:?}", self.content_carryover)),
        ]
    }
}

/// A tensor ready for the archive writer.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Exact planted quantities of one layer (all scales applied).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTruth {
    /// Patch positional code `[P, d]`, mean-zero over patches.
    pub position: Matrix,
    /// Special token embeddings `[S, d]`.
    pub special: Matrix,
    /// Content `[N, T, d]`, mean-zero over images at every token.
    pub content: Vec<f64>,
    /// Planted 2-D grid coordinates `[P, 2]` (grid-planar pattern only).
    pub grid_coords: Option<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedTruth {
    pub offset: Vec<f64>,
    pub layers: Vec<LayerTruth>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub config: SynthConfig,
    /// Activations `activations/layer{ℓ}` then `weights/layer{ℓ}/head{h}/{wq,wk}`.
    pub tensors: Vec<NamedTensor>,
    pub truth: PlantedTruth,
}

struct Gaussian {
    rng: ChaCha20Rng,
    spare: Option<f64>,
}

impl Gaussian {
    fn new(seed: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        Self {
            rng: ChaCha20Rng::from_seed(key),
            spare: None,
        }
    }

    fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    fn normal(&mut self) -> f64 {
        if let Some(s) = self.spare.take() {
            return s;
        }
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * PI * u2;
        self.spare = Some(r * libm::sin(theta));
        r * libm::cos(theta)
    }

    fn normals(&mut self, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| self.normal() * scale).collect()
    }
}

/// `count` orthonormal directions in `R^dim` from Gaussian draws.
fn orthonormal_frame(g: &mut Gaussian, dim: usize, count: usize) -> Vec<Vec<f64>> {
    let mut frame: Vec<Vec<f64>> = Vec::with_capacity(count);
    while frame.len() < count {
        let mut v = g.normals(dim, 1.0);
        for _ in 0..2 {
            for e in &frame {
                let p = dot(&v, e);
                v.iter_mut().zip(e).for_each(|(x, y)| *x -= p * y);
            }
        }
        let len = norm(&v);
        if len > 1e-6 {
            v.iter_mut().for_each(|x| *x /= len);
            frame.push(v);
        }
    }
    frame
}

fn embed(coords: &Matrix, frame: &[Vec<f64>], dim: usize) -> Matrix {
    Matrix::from_fn(coords.rows(), dim, |r, k| {
        (0..coords.cols()).map(|c| coords[(r, c)] * frame[c][k]).sum()
    })
}

fn center_rows(m: &mut Matrix) {
    let (rows, cols) = m.shape();
    for c in 0..cols {
        let mean = (0..rows).map(|r| m[(r, c)]).sum::<f64>() / rows as f64;
        for r in 0..rows {
            m[(r, c)] -= mean;
        }
    }
}

fn positional_code(g: &mut Gaussian, cfg: &SynthConfig) -> (Matrix, Option<Matrix>) {
    let (h, w, d) = (cfg.grid_h, cfg.grid_w, cfg.dim);
    let p = h * w;
    let unit = 2.0 / h.max(w) as f64;
    match cfg.pattern {
        PositionPattern::GridPlanar => {
            let frame = orthonormal_frame(g, d, 2);
            let coords = Matrix::from_fn(p, 2, |t, c| {
                let (row, col) = ((t / w) as f64, (t % w) as f64);
                let v = if c == 0 {
                    col - (w as f64 - 1.0) / 2.0
                } else {
                    row - (h as f64 - 1.0) / 2.0
                };
                v * unit * cfg.position_scale
            });
            (embed(&coords, &frame, d), Some(coords))
        }
        PositionPattern::Fourier => {
            let frame = orthonormal_frame(g, d, 4);
            let mut coords = Matrix::from_fn(p, 4, |t, c| {
                let (row, col) = ((t / w) as f64, (t % w) as f64);
                let v = match c {
                    0 => libm::cos(2.0 * PI * col / w as f64),
                    1 => libm::sin(2.0 * PI * col / w as f64),
                    2 => libm::cos(2.0 * PI * row / h as f64),
                    _ => libm::sin(2.0 * PI * row / h as f64),
                };
                v * cfg.position_scale
            });
            center_rows(&mut coords);
            (embed(&coords, &frame, d), None)
        }
        PositionPattern::Random => {
            let scale = cfg.position_scale / libm::sqrt(d as f64);
            let mut m = Matrix::from_vec(p, d, g.normals(p * d, scale)).expect("shape");
            center_rows(&mut m);
            (m, None)
        }
    }
}

/// Generate activations, weights and the planted truth. Fully determined by
/// the config.
pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let layout = cfg.layout();
    let (n, t, d, dh) = (cfg.num_images, layout.num_tokens(), cfg.dim, cfg.head_dim);
    let s = cfg.num_special;
    let inv_sqrt_d = 1.0 / libm::sqrt(d as f64);
    let mut g = Gaussian::new(cfg.seed);

    let offset = g.normals(d, cfg.global_offset_scale * inv_sqrt_d);
    let rho = cfg.content_carryover;
    let fresh_weight = libm::sqrt(1.0 - rho * rho);
    let mut tensors = Vec::new();
    let mut layers = Vec::with_capacity(cfg.num_layers);
    let mut weights = Vec::new();
    let mut previous: Option<Vec<f64>> = None;
    for layer in 0..cfg.num_layers {
        let (position, grid_coords) = positional_code(&mut g, cfg);
        let special = Matrix::from_vec(s, d, g.normals(s * d, cfg.position_scale * inv_sqrt_d))?;
        let fresh = g.normals(n * t * d, cfg.content_scale * inv_sqrt_d);
        let mut content: Vec<f64> = match &previous {
            Some(prev) => prev
                .iter()
                .zip(&fresh)
                .map(|(p, f)| rho * p + fresh_weight * f)
                .collect(),
            None => fresh,
        };
        // center over images at every (token, feature)
        for tk in 0..t * d {
            let mean = (0..n).map(|i| content[i * t * d + tk]).sum::<f64>() / n as f64;
            for i in 0..n {
                content[i * t * d + tk] -= mean;
            }
        }
        let mut data = Vec::with_capacity(n * t * d);
        for i in 0..n {
            for tok in 0..t {
                let base = if tok < s {
                    special.row(tok)
                } else {
                    position.row(tok - s)
                };
                for k in 0..d {
                    data.push((offset[k] + base[k] + content[(i * t + tok) * d + k]) as f32);
                }
            }
        }
        tensors.push(NamedTensor {
            name: format!("activations/layer{layer}"),
            shape: vec![n, t, d],
            data,
        });
        for head in 0..cfg.num_heads {
            let wq = g.normals(d * dh, inv_sqrt_d);
            let wk = g.normals(d * dh, inv_sqrt_d);
            weights.push(NamedTensor {
                name: format!("weights/layer{layer}/head{head}/wq"),
                shape: vec![d, dh],
                data: wq.iter().map(|&v| v as f32).collect(),
            });
            weights.push(NamedTensor {
                name: format!("weights/layer{layer}/head{head}/wk"),
                shape: vec![d, dh],
                data: wk.iter().map(|&v| v as f32).collect(),
            });
        }
        previous = Some(content.clone());
        layers.push(LayerTruth {
            position,
            special,
            content,
            grid_coords,
        });
    }
    tensors.extend(weights);
    Ok(SynthOutput {
        config: cfg.clone(),
        tensors,
        truth: PlantedTruth { offset, layers },
    })
}

/// The exact planted factors for `cfg` (regenerates the stream).
pub fn planted_truth(cfg: &SynthConfig) -> Result<PlantedTruth> {
    Ok(generate(cfg)?.truth)
}
