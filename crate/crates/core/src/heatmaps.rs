//! Token-grid heatmaps of one mode: each patch token's factor row projected
//! onto `u_i` (query side) or `v_i` (key side).

use alloc::format;
use alloc::vec::Vec;

use crate::activations::TokenLayout;
use crate::energy::Factor;
use crate::error::{Error, Result};
use crate::factorization::FactorSet;
use crate::linalg::{dot, Matrix};
use crate::spectral::ModeBasis;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Query,
    Key,
}

impl Side {
    pub fn name(self) -> &'static str {
        match self {
            Side::Query => "query",
            Side::Key => "key",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeHeatmap {
    pub layer: usize,
    pub head: usize,
    pub mode: usize,
    pub factor: Factor,
    pub side: Side,
    pub image: usize,
    /// `[grid_h, grid_w]`
    pub grid: Matrix,
}

impl ModeHeatmap {
    pub fn energy(&self) -> f64 {
        self.grid.as_slice().iter().map(|v| v * v).sum()
    }
}

fn direction(basis: &ModeBasis, mode: usize, side: Side) -> Result<Vec<f64>> {
    if mode >= basis.num_modes() {
        return Err(Error::Argument(format!(
            "mode {mode} out of range ({} modes)",
            basis.num_modes()
        )));
    }
    Ok(match side {
        Side::Query => basis.u_col(mode),
        Side::Key => basis.v_col(mode),
    })
}

fn patch_rows(factors: &FactorSet, layout: &TokenLayout) -> Result<Vec<usize>> {
    layout
        .patch_tokens()
        .map(|t| {
            factors
                .position_of(t)
                .ok_or_else(|| Error::Argument(format!("factor set lacks patch token {t}")))
        })
        .collect()
}

fn project(
    factors: &FactorSet,
    rows: &[usize],
    layout: &TokenLayout,
    dir: &[f64],
    factor: Factor,
    image: usize,
) -> Matrix {
    let mut grid = Matrix::zeros(layout.grid_h, layout.grid_w);
    let layer_value = dot(&factors.mu_layer, dir);
    for (p, &j) in rows.iter().enumerate() {
        let value = match factor {
            Factor::Layer => layer_value,
            Factor::Position => dot(factors.mu_position.row(j), dir),
            Factor::Content => dot(factors.content_row(image, j), dir),
        };
        grid[(p / layout.grid_w, p % layout.grid_w)] = value;
    }
    grid
}

#[allow(clippy::too_many_arguments)]
pub fn mode_heatmap(
    factors: &FactorSet,
    basis: &ModeBasis,
    layout: &TokenLayout,
    mode: usize,
    factor: Factor,
    side: Side,
    image: usize,
) -> Result<ModeHeatmap> {
    if image >= factors.num_images {
        return Err(Error::Argument(format!(
            "image {image} out of range ({} images)",
            factors.num_images
        )));
    }
    let dir = direction(basis, mode, side)?;
    let rows = patch_rows(factors, layout)?;
    Ok(ModeHeatmap {
        layer: factors.layer,
        head: basis.head,
        mode,
        factor,
        side,
        image,
        grid: project(factors, &rows, layout, &dir, factor, image),
    })
}

/// The `k` images whose heatmap has the largest squared norm, ties broken
/// by lower image index.
pub fn top_activating_images(
    factors: &FactorSet,
    basis: &ModeBasis,
    layout: &TokenLayout,
    mode: usize,
    factor: Factor,
    side: Side,
    k: usize,
) -> Result<Vec<usize>> {
    if k > factors.num_images {
        return Err(Error::Argument(format!(
            "asked for {k} images but only {} exist",
            factors.num_images
        )));
    }
    let dir = direction(basis, mode, side)?;
    let rows = patch_rows(factors, layout)?;
    let mut scored: Vec<(usize, f64)> = (0..factors.num_images)
        .map(|n| {
            let g = project(factors, &rows, layout, &dir, factor, n);
            (n, g.as_slice().iter().map(|v| v * v).sum())
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored.into_iter().take(k).map(|(n, _)| n).collect())
}
