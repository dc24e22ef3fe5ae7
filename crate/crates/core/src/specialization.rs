//! Family scores, barycentric coordinates and hexagonal simplex densities
//! of per-mode interaction energies.

use alloc::vec::Vec;

use crate::energy::{EnergyTable, Interaction};

/// Planar equilateral-triangle vertices: L top-left, P top-right, C bottom.
pub const VERTEX_L: (f64, f64) = (0.0, SQRT3_2);
pub const VERTEX_P: (f64, f64) = (1.0, SQRT3_2);
pub const VERTEX_C: (f64, f64) = (0.5, 0.0);
const SQRT3_2: f64 = 0.866_025_403_784_438_6;
const SQRT3: f64 = 1.732_050_807_568_877_2;

/// Which per-mode statistic feeds the family scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EnergyStatistic {
    /// Image-mean raw energies, mixed pairs summed over both directions.
    #[default]
    RawMean,
    /// Per-image normalized `Ē`, mixed pairs averaged.
    Normalized,
}

/// Unnormalized `(S_L, S_P, S_C)` from six undirected energies ordered as
/// [`Interaction::ALL`]. Mixed interactions count fully toward both families.
pub fn family_scores(six: &[f64; 6]) -> [f64; 3] {
    let e = |i: Interaction| six[i.index()];
    [
        e(Interaction::LL) + e(Interaction::LP) + e(Interaction::LC),
        e(Interaction::PP) + e(Interaction::LP) + e(Interaction::PC),
        e(Interaction::CC) + e(Interaction::LC) + e(Interaction::PC),
    ]
}

/// One mode located in the (layer, position, content) simplex.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarycentricPoint {
    pub layer: usize,
    pub head: usize,
    pub mode: usize,
    /// `(S_L, S_P, S_C)` summing to one; `None` when every score is zero.
    pub coords: Option<[f64; 3]>,
}

impl BarycentricPoint {
    pub fn planar(&self) -> Option<(f64, f64)> {
        self.coords.map(to_planar)
    }
}

/// Normalize scores to barycentric coordinates; `None` for a zero total.
pub fn to_barycentric(scores: [f64; 3]) -> Option<[f64; 3]> {
    let total: f64 = scores.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    Some(scores.map(|s| s / total))
}

pub fn to_planar(c: [f64; 3]) -> (f64, f64) {
    (
        c[0] * VERTEX_L.0 + c[1] * VERTEX_P.0 + c[2] * VERTEX_C.0,
        c[0] * VERTEX_L.1 + c[1] * VERTEX_P.1 + c[2] * VERTEX_C.1,
    )
}

/// Inverse of [`to_planar`] for points in the triangle's plane.
pub fn from_planar(x: f64, y: f64) -> [f64; 3] {
    let s_c = 1.0 - y / SQRT3_2;
    // x = S_P + S_C / 2
    let s_p = x - 0.5 * s_c;
    [1.0 - s_p - s_c, s_p, s_c]
}

/// Barycentric points of every mode of every head in `tables`.
pub fn mode_points(tables: &[EnergyTable], statistic: EnergyStatistic) -> Vec<BarycentricPoint> {
    let mut out = Vec::new();
    for t in tables {
        let six = match statistic {
            EnergyStatistic::RawMean => t.raw_undirected(),
            EnergyStatistic::Normalized => t.normalized_undirected(),
        };
        for mode in 0..t.num_modes() {
            let energies = Interaction::ALL.map(|i| six[i.index()][mode]);
            out.push(BarycentricPoint {
                layer: t.layer,
                head: t.head,
                mode,
                coords: to_barycentric(family_scores(&energies)),
            });
        }
    }
    out
}

/// Axial coordinate of a pointy-top hexagon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HexCell {
    pub q: i64,
    pub r: i64,
}

/// Pointy-top hexagonal tiling with `resolution` cells across the unit
/// triangle edge, anchored at the planar origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HexGrid {
    pub resolution: usize,
}

impl HexGrid {
    pub fn new(resolution: usize) -> Self {
        Self {
            resolution: resolution.max(1),
        }
    }

    /// Center-to-corner size.
    pub fn size(&self) -> f64 {
        1.0 / (self.resolution as f64 * SQRT3)
    }

    pub fn center(&self, cell: HexCell) -> (f64, f64) {
        let s = self.size();
        (
            s * SQRT3 * (cell.q as f64 + cell.r as f64 / 2.0),
            s * 1.5 * cell.r as f64,
        )
    }

    pub fn cell_of(&self, x: f64, y: f64) -> HexCell {
        let s = self.size();
        let qf = (SQRT3 / 3.0 * x - y / 3.0) / s;
        let rf = (2.0 / 3.0 * y) / s;
        cube_round(qf, rf)
    }
}

fn cube_round(qf: f64, rf: f64) -> HexCell {
    let sf = -qf - rf;
    let mut q = libm::round(qf);
    let mut r = libm::round(rf);
    let s = libm::round(sf);
    let dq = libm::fabs(q - qf);
    let dr = libm::fabs(r - rf);
    let ds = libm::fabs(s - sf);
    if dq > dr && dq > ds {
        q = -r - s;
    } else if dr > ds {
        r = -q - s;
    }
    HexCell {
        q: q as i64,
        r: r as i64,
    }
}

/// Normalized hex-bin occupancy of one layer's points.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexDensity {
    pub resolution: usize,
    /// Nonempty cells in `(q, r)` order with occupancy fractions.
    pub cells: Vec<(HexCell, f64)>,
    pub num_points: usize,
}

/// Count points per cell and divide by the number of (non-degenerate) points.
pub fn simplex_density(points: &[BarycentricPoint], resolution: usize) -> SimplexDensity {
    let grid = HexGrid::new(resolution);
    let mut cells: Vec<HexCell> = points
        .iter()
        .filter_map(|p| p.planar())
        .map(|(x, y)| grid.cell_of(x, y))
        .collect();
    let count = cells.len();
    cells.sort_unstable();
    let mut out: Vec<(HexCell, f64)> = Vec::new();
    for c in cells {
        match out.last_mut() {
            Some((last, n)) if *last == c => *n += 1.0,
            _ => out.push((c, 1.0)),
        }
    }
    if count > 0 {
        out.iter_mut().for_each(|(_, n)| *n /= count as f64);
    }
    SimplexDensity {
        resolution: grid.resolution,
        cells: out,
        num_points: count,
    }
}
