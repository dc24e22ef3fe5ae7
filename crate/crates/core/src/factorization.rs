//! Additive split of a layer's activations into layer effect `μ_L`
//! (mean over images and tokens), positional effect `μ_P` (per-token image
//! mean minus `μ_L`) and content residual `μ_C`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::activations::ActivationBlock;
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};

/// Which tokens enter the expectations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TokenSubset {
    /// Patch tokens only.
    #[default]
    PatchOnly,
    /// Special tokens followed by patch tokens.
    All,
}

impl TokenSubset {
    pub fn from_include_special(include: bool) -> Self {
        if include {
            TokenSubset::All
        } else {
            TokenSubset::PatchOnly
        }
    }

    pub fn includes_special(self) -> bool {
        matches!(self, TokenSubset::All)
    }
}

/// Factors of one layer, restricted to `tokens` (indices into the block's
/// token axis, in block order).
#[derive(Debug, Clone, PartialEq)]
pub struct FactorSet {
    pub layer: usize,
    pub tokens: Vec<usize>,
    pub subset: TokenSubset,
    pub num_images: usize,
    pub dim: usize,
    /// `[d]`
    pub mu_layer: Vec<f64>,
    /// `[T', d]`
    pub mu_position: Matrix,
    /// `[N, T', d]`, flat.
    mu_content: Vec<f64>,
}

impl FactorSet {
    /// Assemble from raw parts, e.g. when loading a cached factorization.
    pub fn from_parts(
        layer: usize,
        tokens: Vec<usize>,
        subset: TokenSubset,
        mu_layer: Vec<f64>,
        mu_position: Matrix,
        mu_content: Vec<f64>,
    ) -> Result<Self> {
        let dim = mu_layer.len();
        let t = tokens.len();
        if mu_position.shape() != (t, dim) {
            return Err(Error::Dimension(format!(
                "mu_position is {:?}, expected ({t}, {dim})",
                mu_position.shape()
            )));
        }
        if dim == 0 || t == 0 || !mu_content.len().is_multiple_of(t * dim) {
            return Err(Error::Dimension(format!(
                "mu_content has {} values, not a multiple of {t}x{dim}",
                mu_content.len()
            )));
        }
        let num_images = mu_content.len() / (t * dim);
        Ok(Self {
            layer,
            tokens,
            subset,
            num_images,
            dim,
            mu_layer,
            mu_position,
            mu_content,
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.len()
    }

    #[inline]
    pub fn content_row(&self, image: usize, j: usize) -> &[f64] {
        let start = (image * self.tokens.len() + j) * self.dim;
        &self.mu_content[start..start + self.dim]
    }

    /// `[T', d]` content factor of one image.
    pub fn content(&self, image: usize) -> Matrix {
        let len = self.tokens.len() * self.dim;
        let start = image * len;
        Matrix::from_vec(self.tokens.len(), self.dim, self.mu_content[start..start + len].to_vec())
            .expect("content slice")
    }

    pub fn content_slice(&self) -> &[f64] {
        &self.mu_content
    }

    /// `μ_L` broadcast to `[T', d]`.
    pub fn layer_matrix(&self) -> Matrix {
        Matrix::from_fn(self.tokens.len(), self.dim, |_, k| self.mu_layer[k])
    }

    /// Row index of block token `token` inside this factor set.
    pub fn position_of(&self, token: usize) -> Option<usize> {
        self.tokens.iter().position(|&t| t == token)
    }

    /// Largest `|A − (μ_L + μ_P + μ_C)|` over the selected tokens.
    pub fn reconstruction_error(&self, block: &ActivationBlock) -> f64 {
        let mut worst = 0.0f64;
        for n in 0..self.num_images {
            for (j, &t) in self.tokens.iter().enumerate() {
                let a = block.token(n, t);
                let p = self.mu_position.row(j);
                let c = self.content_row(n, j);
                for k in 0..self.dim {
                    let e = libm::fabs(a[k] - (self.mu_layer[k] + p[k] + c[k]));
                    worst = worst.max(e);
                }
            }
        }
        worst
    }
}

/// Per-token running sums over images, in `f64`. Partial accumulators over
/// disjoint image shards combine with [`TokenSums::merge`].
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSums {
    tokens: usize,
    dim: usize,
    count: usize,
    sums: Vec<f64>,
}

impl TokenSums {
    pub fn new(tokens: usize, dim: usize) -> Self {
        Self {
            tokens,
            dim,
            count: 0,
            sums: vec![0.0; tokens * dim],
        }
    }

    pub fn add_image(&mut self, block: &ActivationBlock, image: usize, tokens: &[usize]) {
        for (j, &t) in tokens.iter().enumerate() {
            let row = &mut self.sums[j * self.dim..(j + 1) * self.dim];
            row.iter_mut().zip(block.token(image, t)).for_each(|(s, a)| *s += a);
        }
        self.count += 1;
    }

    pub fn merge(&mut self, other: &TokenSums) {
        debug_assert_eq!((self.tokens, self.dim), (other.tokens, other.dim));
        self.sums.iter_mut().zip(&other.sums).for_each(|(a, b)| *a += b);
        self.count += other.count;
    }

    /// Per-token mean over images, `[tokens, d]`.
    pub fn means(&self) -> Matrix {
        let inv = 1.0 / self.count as f64;
        Matrix::from_vec(self.tokens, self.dim, self.sums.iter().map(|s| s * inv).collect())
            .expect("sums shape")
    }
}

/// Token indices selected by `subset` for a block.
pub fn select_tokens(block: &ActivationBlock, subset: TokenSubset) -> Vec<usize> {
    match subset {
        TokenSubset::PatchOnly => block.layout.patch_tokens().collect(),
        TokenSubset::All => (0..block.num_tokens()).collect(),
    }
}

/// Factorize one layer. `μ_L` and `μ_P` are plain sample means; `μ_C` is the
/// residual, so reconstruction is exact up to rounding.
pub fn factorize(block: &ActivationBlock, subset: TokenSubset) -> Result<FactorSet> {
    if block.num_images == 0 {
        return Err(Error::Argument("factorize needs at least one image".into()));
    }
    let tokens = select_tokens(block, subset);
    if tokens.is_empty() {
        return Err(Error::Argument("selected token subset is empty".into()));
    }
    let d = block.dim;
    let mut sums = TokenSums::new(tokens.len(), d);
    for n in 0..block.num_images {
        sums.add_image(block, n, &tokens);
    }
    let token_means = sums.means();
    let mut mu_layer = vec![0.0; d];
    for j in 0..tokens.len() {
        mu_layer.iter_mut().zip(token_means.row(j)).for_each(|(m, v)| *m += v);
    }
    let inv_t = 1.0 / tokens.len() as f64;
    mu_layer.iter_mut().for_each(|m| *m *= inv_t);

    let mu_position = Matrix::from_fn(tokens.len(), d, |j, k| token_means[(j, k)] - mu_layer[k]);
    let mut mu_content = Vec::with_capacity(block.num_images * tokens.len() * d);
    for n in 0..block.num_images {
        for (j, &t) in tokens.iter().enumerate() {
            let a = block.token(n, t);
            let p = mu_position.row(j);
            for k in 0..d {
                mu_content.push(a[k] - mu_layer[k] - p[k]);
            }
        }
    }
    FactorSet::from_parts(block.layer, tokens, subset, mu_layer, mu_position, mu_content)
}

/// In-sample orthogonality residuals of a factor set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrthogonalityReport {
    /// `E_{x,p}[μ_Lᵀ μ_P]`
    pub layer_position: f64,
    /// `E_{x,p}[μ_Lᵀ μ_C]`
    pub layer_content: f64,
    /// `E_p E_x[μ_Pᵀ μ_C]`
    pub position_content: f64,
    /// `E_{x,p}[‖A‖²]`, the scale the residuals are compared against.
    pub reference: f64,
}

impl OrthogonalityReport {
    fn rel(&self, v: f64) -> f64 {
        if self.reference == 0.0 {
            libm::fabs(v)
        } else {
            libm::fabs(v) / self.reference
        }
    }

    /// The three residuals divided by `E_{x,p}[‖A‖²]`.
    pub fn relative(&self) -> [f64; 3] {
        [
            self.rel(self.layer_position),
            self.rel(self.layer_content),
            self.rel(self.position_content),
        ]
    }

    pub fn max_relative(&self) -> f64 {
        self.relative().into_iter().fold(0.0, f64::max)
    }
}

pub fn orthogonality_report(f: &FactorSet) -> OrthogonalityReport {
    let t = f.num_tokens();
    let n = f.num_images;
    let mut lp = 0.0;
    for j in 0..t {
        lp += dot(&f.mu_layer, f.mu_position.row(j));
    }
    let mut lc = 0.0;
    let mut pc = 0.0;
    let mut reference = 0.0;
    for img in 0..n {
        for j in 0..t {
            let c = f.content_row(img, j);
            let p = f.mu_position.row(j);
            lc += dot(&f.mu_layer, c);
            pc += dot(p, c);
            for k in 0..f.dim {
                let a = f.mu_layer[k] + p[k] + c[k];
                reference += a * a;
            }
        }
    }
    let nt = (n * t) as f64;
    OrthogonalityReport {
        layer_position: lp / t as f64,
        layer_content: lc / nt,
        position_content: pc / nt,
        reference: reference / nt,
    }
}
