#![allow(dead_code)]

use bfd_core::{ActivationBlock, Matrix, TokenLayout};
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

pub struct Rng(ChaCha8Rng);

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Uniform in [-1, 1).
    pub fn uniform(&mut self) -> f64 {
        ((self.0.next_u64() >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    pub fn vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.uniform()).collect()
    }

    pub fn matrix(&mut self, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, self.vec(r * c)).unwrap()
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.0.next_u64() % n as u64) as usize
    }
}

pub fn random_block(rng: &mut Rng, n: usize, layout: TokenLayout, d: usize) -> ActivationBlock {
    let data = rng.vec(n * layout.num_tokens() * d);
    ActivationBlock::new(0, n, d, layout, data).unwrap()
}

pub fn to_na(m: &Matrix) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}
