//! Factor-projected mode energies.
//!
//! For a head with modes `(u_i, σ_i, v_i)` and a directed pair of factors
//! `(μ_Q, μ_K)`, the rank-one contribution of mode `i` to the score matrix is
//! `(μ_Q u_i) σ_i (μ_K v_i)ᵀ`; its energy is the squared Frobenius norm
//! `σ_i² ‖μ_Q u_i‖² ‖μ_K v_i‖²`. Summing the contributions over the nine
//! directed pairs and all modes recovers `A W Aᵀ` exactly.
//!
//! Raw energies are symmetrized by summing the two directions of a mixed pair
//! (so six undirected totals still add up to the nine directed ones); the
//! per-image normalized energies `Ē` are symmetrized by averaging the two
//! directions (so each undirected row still sums to one).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Result};
use crate::factorization::FactorSet;
use crate::linalg::Matrix;
use crate::spectral::{mode_sum, ModeBasis};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Factor {
    Layer,
    Position,
    Content,
}

impl Factor {
    pub const ALL: [Factor; 3] = [Factor::Layer, Factor::Position, Factor::Content];

    pub fn symbol(self) -> char {
        match self {
            Factor::Layer => 'L',
            Factor::Position => 'P',
            Factor::Content => 'C',
        }
    }

    pub fn from_symbol(c: char) -> Option<Self> {
        match c.to_ascii_uppercase() {
            'L' => Some(Factor::Layer),
            'P' => Some(Factor::Position),
            'C' => Some(Factor::Content),
            _ => None,
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Ordered (query factor, key factor) pair; index `3·q + k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Directed {
    pub query: Factor,
    pub key: Factor,
}

impl Directed {
    pub const COUNT: usize = 9;

    pub fn all() -> [Directed; 9] {
        let mut out = [Directed {
            query: Factor::Layer,
            key: Factor::Layer,
        }; 9];
        for (qi, q) in Factor::ALL.iter().enumerate() {
            for (ki, k) in Factor::ALL.iter().enumerate() {
                out[qi * 3 + ki] = Directed { query: *q, key: *k };
            }
        }
        out
    }

    pub fn index(self) -> usize {
        self.query.index() * 3 + self.key.index()
    }

    /// `"P->C"` style label.
    pub fn label(self) -> alloc::string::String {
        format!("{}->{}", self.query.symbol(), self.key.symbol())
    }
}

/// The six symmetrized interactions, in reporting order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Interaction {
    LL,
    PP,
    CC,
    LP,
    LC,
    PC,
}

impl Interaction {
    pub const ALL: [Interaction; 6] = [
        Interaction::LL,
        Interaction::PP,
        Interaction::CC,
        Interaction::LP,
        Interaction::LC,
        Interaction::PC,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Interaction::LL => "L-L",
            Interaction::PP => "P-P",
            Interaction::CC => "C-C",
            Interaction::LP => "L-P",
            Interaction::LC => "L-C",
            Interaction::PC => "P-C",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|i| i.label().eq_ignore_ascii_case(s))
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// The one or two directed pairs folded into this interaction.
    pub fn directions(self) -> (Directed, Option<Directed>) {
        use Factor::*;
        let d = |query, key| Directed { query, key };
        match self {
            Interaction::LL => (d(Layer, Layer), None),
            Interaction::PP => (d(Position, Position), None),
            Interaction::CC => (d(Content, Content), None),
            Interaction::LP => (d(Layer, Position), Some(d(Position, Layer))),
            Interaction::LC => (d(Layer, Content), Some(d(Content, Layer))),
            Interaction::PC => (d(Position, Content), Some(d(Content, Position))),
        }
    }

    pub fn is_mixed(self) -> bool {
        self.directions().1.is_some()
    }
}

/// Energies of every mode for one directed factor pair:
/// `E_i = σ_i² ‖q u_i‖² ‖k v_i‖²` with `q`, `k` of shape `[T, d]`.
pub fn mode_energy(query_factor: &Matrix, key_factor: &Matrix, basis: &ModeBasis) -> Result<Vec<f64>> {
    let a = code_norms(query_factor, &basis.u)?;
    let b = code_norms(key_factor, &basis.v)?;
    Ok(combine(&a, &b, &basis.sigma))
}

fn combine(a: &[f64], b: &[f64], sigma: &[f64]) -> Vec<f64> {
    a.iter()
        .zip(b)
        .zip(sigma)
        .map(|((x, y), s)| s * s * x * y)
        .collect()
}

/// `‖F m_i‖²` for every column `m_i` of `modes`.
fn code_norms(factor: &Matrix, modes: &Matrix) -> Result<Vec<f64>> {
    if factor.cols() != modes.rows() {
        return Err(dim_err(format!(
            "factor width {} but modes live in dimension {}",
            factor.cols(),
            modes.rows()
        )));
    }
    let codes = factor.matmul(modes)?;
    let mut out = vec![0.0; modes.cols()];
    for r in 0..codes.rows() {
        for (o, z) in out.iter_mut().zip(codes.row(r)) {
            *o += z * z;
        }
    }
    Ok(out)
}

/// Rank-one contributions of one directed pair summed over modes,
/// `Σ_i (q u_i) σ_i (k v_i)ᵀ`. Materializes a `[T, T]` matrix; meant for
/// verification on small inputs.
pub fn directed_scores(query_factor: &Matrix, key_factor: &Matrix, basis: &ModeBasis) -> Result<Matrix> {
    mode_sum(
        &query_factor.matmul(&basis.u)?,
        &basis.sigma,
        &key_factor.matmul(&basis.v)?,
    )
}

/// Full nine-term expansion `Σ_{Q,K} Σ_i (μ_Q u_i) σ_i (μ_K v_i)ᵀ` for one
/// image. Should equal `A W Aᵀ` on the factor set's tokens.
pub fn bilinear_expansion(factors: &FactorSet, image: usize, basis: &ModeBasis) -> Result<Matrix> {
    let mats = [factors.layer_matrix(), factors.mu_position.clone(), factors.content(image)];
    let t = factors.num_tokens();
    let mut total = Matrix::zeros(t, t);
    for q in &mats {
        for k in &mats {
            let part = directed_scores(q, k, basis)?;
            for r in 0..t {
                for (o, v) in total.row_mut(r).iter_mut().zip(part.row(r)) {
                    *o += v;
                }
            }
        }
    }
    Ok(total)
}

/// Per-image mode normalization followed by the image mean:
/// `Ē_i = E_x[E_i(x) / Σ_j E_j(x)]`.
///
/// Images whose total is zero carry no distribution and are left out of the
/// mean. Returns the zero vector and `degenerate = true` when no image has a
/// positive total.
pub fn normalize_modes(per_image: &[Vec<f64>]) -> (Vec<f64>, bool) {
    let k = per_image.first().map_or(0, Vec::len);
    let mut acc = vec![0.0; k];
    let mut used = 0usize;
    for row in per_image {
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            acc.iter_mut().zip(row).for_each(|(a, e)| *a += e / total);
            used += 1;
        }
    }
    if used == 0 {
        return (acc, true);
    }
    let inv = 1.0 / used as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    (acc, false)
}

/// Average the two directions of each mixed pair (for `Ē` tables).
pub fn symmetrize(directed: &[Vec<f64>; 9]) -> [Vec<f64>; 6] {
    fold(directed, 0.5)
}

/// Sum the two directions of each mixed pair (for raw energy tables).
pub fn symmetrize_raw(directed: &[Vec<f64>; 9]) -> [Vec<f64>; 6] {
    fold(directed, 1.0)
}

fn fold(directed: &[Vec<f64>; 9], mixed_weight: f64) -> [Vec<f64>; 6] {
    Interaction::ALL.map(|int| match int.directions() {
        (a, None) => directed[a.index()].clone(),
        (a, Some(b)) => directed[a.index()]
            .iter()
            .zip(&directed[b.index()])
            .map(|(x, y)| mixed_weight * (x + y))
            .collect(),
    })
}

/// Energies of one head, accumulated over every image of a factor set.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyTable {
    pub layer: usize,
    pub head: usize,
    pub num_images: usize,
    /// Image-mean raw energy per directed pair, `[9][K]`.
    pub raw_mean: [Vec<f64>; 9],
    /// `Ē` per directed pair, `[9][K]`.
    pub normalized: [Vec<f64>; 9],
    /// No image had positive energy for this directed pair.
    pub degenerate: [bool; 9],
    /// `Σ_i E_i(x)` per image and directed pair.
    pub image_totals: Vec<[f64; 9]>,
}

impl EnergyTable {
    pub fn num_modes(&self) -> usize {
        self.raw_mean[0].len()
    }

    pub fn normalized_undirected(&self) -> [Vec<f64>; 6] {
        symmetrize(&self.normalized)
    }

    pub fn raw_undirected(&self) -> [Vec<f64>; 6] {
        symmetrize_raw(&self.raw_mean)
    }

    /// An undirected interaction is degenerate when all its directions are.
    pub fn degenerate_undirected(&self) -> [bool; 6] {
        Interaction::ALL.map(|int| match int.directions() {
            (a, None) => self.degenerate[a.index()],
            (a, Some(b)) => self.degenerate[a.index()] && self.degenerate[b.index()],
        })
    }
}

/// Evaluate all nine directed energy tables of one head.
///
/// Codes of `μ_L` and `μ_P` are image-independent and computed once; only the
/// content codes are recomputed per image. No `[T, T]` matrix is formed.
pub fn head_energies(factors: &FactorSet, basis: &ModeBasis) -> Result<EnergyTable> {
    let t = factors.num_tokens() as f64;
    let k = basis.num_modes();
    if factors.dim != basis.dim() {
        return Err(dim_err(format!(
            "factors have width {} but modes live in dimension {}",
            factors.dim,
            basis.dim()
        )));
    }
    let mu_l = Matrix::from_vec(1, factors.dim, factors.mu_layer.clone())?;
    // μ_L is broadcast over T' tokens: ‖1 (μ_L u)‖² = T' (μ_L u)².
    let mut l_q = code_norms(&mu_l, &basis.u)?;
    let mut l_k = code_norms(&mu_l, &basis.v)?;
    l_q.iter_mut().chain(l_k.iter_mut()).for_each(|x| *x *= t);
    let p_q = code_norms(&factors.mu_position, &basis.u)?;
    let p_k = code_norms(&factors.mu_position, &basis.v)?;

    let n = factors.num_images;
    let mut per_image: [Vec<Vec<f64>>; 9] = Default::default();
    let mut image_totals = Vec::with_capacity(n);
    let mut raw_sum: [Vec<f64>; 9] = core::array::from_fn(|_| vec![0.0; k]);
    for img in 0..n {
        let content = factors.content(img);
        let c_q = code_norms(&content, &basis.u)?;
        let c_k = code_norms(&content, &basis.v)?;
        let q_side = [&l_q, &p_q, &c_q];
        let k_side = [&l_k, &p_k, &c_k];
        let mut totals = [0.0; 9];
        for dir in Directed::all() {
            let e = combine(q_side[dir.query.index()], k_side[dir.key.index()], &basis.sigma);
            let idx = dir.index();
            totals[idx] = e.iter().sum();
            raw_sum[idx].iter_mut().zip(&e).for_each(|(s, v)| *s += v);
            per_image[idx].push(e);
        }
        image_totals.push(totals);
    }
    let inv_n = if n == 0 { 0.0 } else { 1.0 / n as f64 };
    let raw_mean = raw_sum.map(|row| row.into_iter().map(|v| v * inv_n).collect());
    let mut normalized: [Vec<f64>; 9] = Default::default();
    let mut degenerate = [false; 9];
    for idx in 0..9 {
        let (bar, flag) = normalize_modes(&per_image[idx]);
        normalized[idx] = if bar.is_empty() { vec![0.0; k] } else { bar };
        degenerate[idx] = flag;
    }
    Ok(EnergyTable {
        layer: factors.layer,
        head: basis.head,
        num_images: n,
        raw_mean,
        normalized,
        degenerate,
        image_totals,
    })
}

/// Share of a layer's attention energy held by each undirected interaction.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerEnergyProfile {
    pub layer: usize,
    /// Indexed by [`Interaction::index`].
    pub shares: [f64; 6],
    pub degenerate: bool,
}

/// `share(int) = E_x[Σ_{h,i} raw_int(x) / Σ_{int'} Σ_{h,i} raw_int'(x)]`,
/// using raw-summed symmetrization. Images with zero total energy are left
/// out of the mean.
pub fn layer_shares(tables: &[EnergyTable]) -> Result<LayerEnergyProfile> {
    let Some(first) = tables.first() else {
        return Err(crate::Error::Argument("layer_shares needs at least one head".into()));
    };
    let n = first.num_images;
    if tables.iter().any(|t| t.num_images != n || t.layer != first.layer) {
        return Err(dim_err("energy tables of one layer must share images"));
    }
    let mut shares = [0.0; 6];
    let mut used = 0usize;
    for img in 0..n {
        let mut directed = [0.0; 9];
        for t in tables {
            for (d, v) in directed.iter_mut().zip(&t.image_totals[img]) {
                *d += v;
            }
        }
        let undirected = Interaction::ALL.map(|int| match int.directions() {
            (a, None) => directed[a.index()],
            (a, Some(b)) => directed[a.index()] + directed[b.index()],
        });
        let total: f64 = undirected.iter().sum();
        if total > 0.0 {
            for (s, u) in shares.iter_mut().zip(undirected) {
                *s += u / total;
            }
            used += 1;
        }
    }
    if used == 0 {
        return Ok(LayerEnergyProfile {
            layer: first.layer,
            shares: [0.0; 6],
            degenerate: true,
        });
    }
    shares.iter_mut().for_each(|s| *s /= used as f64);
    Ok(LayerEnergyProfile {
        layer: first.layer,
        shares,
        degenerate: false,
    })
}

/// Head-by-mode matrix of `Ē` for one undirected interaction. Rows follow
/// the order of `tables`; columns are modes by descending σ.
pub fn interaction_map(tables: &[EnergyTable], interaction: Interaction) -> Matrix {
    let k = tables.first().map_or(0, EnergyTable::num_modes);
    let mut m = Matrix::zeros(tables.len(), k);
    for (r, t) in tables.iter().enumerate() {
        let row = &t.normalized_undirected()[interaction.index()];
        m.row_mut(r).copy_from_slice(row);
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directed_indices_cover_nine() {
        let all = Directed::all();
        for (i, d) in all.iter().enumerate() {
            assert_eq!(d.index(), i);
        }
        assert_eq!(all[5].label(), "P->C");
    }

    #[test]
    fn single_mode_normalizes_to_one() {
        let (bar, deg) = normalize_modes(&[vec![3.0], vec![0.5]]);
        assert_eq!(bar, vec![1.0]);
        assert!(!deg);
    }

    #[test]
    fn two_opposite_images_average() {
        let (bar, _) = normalize_modes(&[vec![1.0, 0.0], vec![0.0, 2.0]]);
        assert_eq!(bar, vec![0.5, 0.5]);
    }

    #[test]
    fn all_zero_is_degenerate() {
        let (bar, deg) = normalize_modes(&[vec![0.0, 0.0], vec![0.0, 0.0]]);
        assert_eq!(bar, vec![0.0, 0.0]);
        assert!(deg);
    }

    #[test]
    fn symmetrize_mixed_pairs() {
        let mut t: [Vec<f64>; 9] = core::array::from_fn(|i| vec![i as f64, 0.0]);
        let pc = Directed {
            query: Factor::Position,
            key: Factor::Content,
        };
        let cp = Directed {
            query: Factor::Content,
            key: Factor::Position,
        };
        t[pc.index()] = vec![1.0, 0.0];
        t[cp.index()] = vec![0.0, 1.0];
        let s = symmetrize(&t);
        assert_eq!(s[Interaction::PC.index()], vec![0.5, 0.5]);
        assert_eq!(s[Interaction::LL.index()], vec![0.0, 0.0]);
        assert_eq!(s[Interaction::CC.index()], vec![8.0, 0.0]);
        // fixed point when both directions agree
        t[cp.index()] = t[pc.index()].clone();
        assert_eq!(symmetrize(&t)[Interaction::PC.index()], t[pc.index()]);
        let raw = symmetrize_raw(&t);
        let total9: f64 = t.iter().flatten().sum();
        let total6: f64 = raw.iter().flatten().sum();
        assert!((total9 - total6).abs() < 1e-12);
    }

    #[test]
    fn zero_sigma_zero_energy() {
        let basis = ModeBasis {
            layer: 0,
            head: 0,
            u: Matrix::identity(2),
            sigma: vec![1.0, 0.0],
            v: Matrix::identity(2),
        };
        let f = Matrix::from_fn(3, 2, |r, c| (r + c + 1) as f64);
        let e = mode_energy(&f, &f, &basis).unwrap();
        assert_eq!(e[1], 0.0);
        assert!(e[0] > 0.0);
    }

    #[test]
    fn labels_roundtrip() {
        for i in Interaction::ALL {
            assert_eq!(Interaction::from_label(i.label()), Some(i));
        }
        assert_eq!(Factor::from_symbol('c'), Some(Factor::Content));
    }
}
