//! Per-layer activation tensors `[N, T, d]` and the fixed token layout:
//! all special tokens first, then patch tokens in row-major grid order.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenKind {
    /// Class or register token; the index counts special tokens only.
    Special(usize),
    Patch { row: usize, col: usize },
}

/// Token arrangement shared by every layer of an archive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenLayout {
    pub num_special: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl TokenLayout {
    pub fn new(num_special: usize, grid_h: usize, grid_w: usize) -> Self {
        Self {
            num_special,
            grid_h,
            grid_w,
        }
    }

    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn num_tokens(&self) -> usize {
        self.num_special + self.num_patches()
    }

    pub fn kind(&self, token: usize) -> TokenKind {
        if token < self.num_special {
            TokenKind::Special(token)
        } else {
            let p = token - self.num_special;
            TokenKind::Patch {
                row: p / self.grid_w,
                col: p % self.grid_w,
            }
        }
    }

    pub fn kinds(&self) -> Vec<TokenKind> {
        (0..self.num_tokens()).map(|t| self.kind(t)).collect()
    }

    /// Token index of the patch at grid position `(row, col)`.
    pub fn patch_token(&self, row: usize, col: usize) -> usize {
        self.num_special + row * self.grid_w + col
    }

    pub fn patch_tokens(&self) -> core::ops::Range<usize> {
        self.num_special..self.num_tokens()
    }
}

/// Activations of one layer for `N` images: `data[(n * T + t) * d + k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBlock {
    pub layer: usize,
    pub num_images: usize,
    pub dim: usize,
    pub layout: TokenLayout,
    data: Vec<f64>,
}

impl ActivationBlock {
    pub fn new(layer: usize, num_images: usize, dim: usize, layout: TokenLayout, data: Vec<f64>) -> Result<Self> {
        let expected = num_images * layout.num_tokens() * dim;
        if data.len() != expected {
            return Err(dim_err(format!(
                "activation block for layer {layer}: {} values, expected {num_images}x{}x{dim}",
                data.len(),
                layout.num_tokens()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite activation at flat index {pos} of layer {layer}"
            )));
        }
        Ok(Self {
            layer,
            num_images,
            dim,
            layout,
            data,
        })
    }

    pub fn from_f32(layer: usize, num_images: usize, dim: usize, layout: TokenLayout, data: &[f32]) -> Result<Self> {
        Self::new(layer, num_images, dim, layout, data.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn num_tokens(&self) -> usize {
        self.layout.num_tokens()
    }

    #[inline]
    pub fn token(&self, image: usize, token: usize) -> &[f64] {
        let t = self.num_tokens();
        let start = (image * t + token) * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// `[T, d]` matrix of image `image`.
    pub fn image(&self, image: usize) -> Matrix {
        let t = self.num_tokens();
        let start = image * t * self.dim;
        Matrix::from_vec(t, self.dim, self.data[start..start + t * self.dim].to_vec())
            .expect("block slice has T*d values")
    }

    /// `[|tokens|, d]` matrix with the chosen token rows of image `image`.
    pub fn image_rows(&self, image: usize, tokens: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(tokens.len() * self.dim);
        for &t in tokens {
            data.extend_from_slice(self.token(image, t));
        }
        Matrix::from_vec(tokens.len(), self.dim, data).expect("row gather")
    }
}
