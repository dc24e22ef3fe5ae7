//! Geometry of the positional factor (top-3 PCA, rotated views, grid
//! colors) and layer-by-layer Pearson correlation of flattened
//! representations.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};
use crate::linalg::{argmax_abs, dot, svd, symmetric_eigen, Matrix};

/// Positional factor projected onto its top three principal components.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionEmbedding3D {
    pub layer: usize,
    /// `[P, 3]`
    pub coords: Matrix,
    /// Covariance eigenvalues (`1/(P−1)` normalization), descending.
    pub explained_variance: [f64; 3],
    /// Sum of all covariance eigenvalues.
    pub total_variance: f64,
    /// Principal directions as columns, `[d, 3]`.
    pub components: Matrix,
}

impl PositionEmbedding3D {
    pub fn explained_ratio(&self) -> [f64; 3] {
        self.explained_variance.map(|v| v / self.total_variance)
    }
}

/// PCA of `μ_P` (`[P, d]`) centered over tokens. Each component's
/// largest-magnitude entry is made positive.
pub fn pca_position(layer: usize, mu_position: &Matrix) -> Result<PositionEmbedding3D> {
    let (p, d) = mu_position.shape();
    if p < 3 {
        return Err(Error::Argument(alloc::format!("PCA needs at least 3 tokens, got {p}")));
    }
    let mut mean = vec![0.0; d];
    for r in 0..p {
        mean.iter_mut().zip(mu_position.row(r)).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= p as f64);
    let x = Matrix::from_fn(p, d, |r, c| mu_position[(r, c)] - mean[c]);
    let centered_ss: f64 = x.as_slice().iter().map(|v| v * v).sum();
    let raw_ss: f64 = mu_position.as_slice().iter().map(|v| v * v).sum();
    if raw_ss == 0.0 || centered_ss <= 1e-24 * raw_ss {
        return Err(Error::DegenerateManifold);
    }
    let denom = (p - 1) as f64;
    let total_variance = centered_ss / denom;

    let mut components = Matrix::zeros(d, 3);
    let mut variance = [0.0; 3];
    if p <= d {
        let mut gram = x.matmul_t(&x)?;
        gram.scale(1.0 / denom);
        let (vals, vecs) = symmetric_eigen(&gram)?;
        for j in 0..3.min(p) {
            let lambda = vals[j].max(0.0);
            variance[j] = lambda;
            let scale = libm::sqrt(lambda * denom);
            if scale > 0.0 {
                for c in 0..d {
                    let s: f64 = (0..p).map(|r| x[(r, c)] * vecs[(r, j)]).sum();
                    components[(c, j)] = s / scale;
                }
            }
        }
    } else {
        let mut cov = x.transpose().matmul(&x)?;
        cov.scale(1.0 / denom);
        let (vals, vecs) = symmetric_eigen(&cov)?;
        for j in 0..3.min(d) {
            variance[j] = vals[j].max(0.0);
            for c in 0..d {
                components[(c, j)] = vecs[(c, j)];
            }
        }
    }
    for j in 0..3 {
        let col = components.column(j);
        if col[argmax_abs(&col)] < 0.0 {
            for c in 0..d {
                components[(c, j)] = -components[(c, j)];
            }
        }
    }
    let coords = x.matmul(&components)?;
    Ok(PositionEmbedding3D {
        layer,
        coords,
        explained_variance: variance,
        total_variance,
        components,
    })
}

/// One orthographic view of the 3-D embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationView {
    pub angle_deg: f64,
    /// `(horizontal, vertical)` per token.
    pub points: Vec<(f64, f64)>,
}

/// Default viewing angles in degrees.
pub const VIEW_ANGLES: [f64; 5] = [0.0, 45.0, 90.0, 135.0, 180.0];

/// Rotate about the vertical (PC2) axis by each angle and drop depth:
/// `h = PC1·cosθ + PC3·sinθ`, `v = PC2`.
pub fn render_rotations(embedding: &PositionEmbedding3D, angles_deg: &[f64]) -> Vec<RotationView> {
    angles_deg
        .iter()
        .map(|&angle_deg| {
            let theta = angle_deg.to_radians();
            let (s, c) = (libm::sin(theta), libm::cos(theta));
            let points = (0..embedding.coords.rows())
                .map(|r| {
                    let e = embedding.coords.row(r);
                    (e[0] * c + e[2] * s, e[1])
                })
                .collect();
            RotationView { angle_deg, points }
        })
        .collect()
}

/// Fixed grid colormap: top-left warm yellow, bottom-right dark blue.
pub fn grid_color(row: usize, col: usize, grid_h: usize, grid_w: usize) -> [u8; 3] {
    let frac = |i: usize, n: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
    let (rf, cf) = (frac(row, grid_h), frac(col, grid_w));
    let to_byte = |v: f64| libm::round(v.clamp(0.0, 1.0) * 255.0) as u8;
    [
        to_byte(1.0 - rf),
        to_byte(1.0 - 0.5 * (rf + cf) - 0.5 * cf * (1.0 - rf)),
        to_byte(0.2 + 0.35 * (rf + cf)),
    ]
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let z_a = standardize(a)?;
    let z_b = standardize(b)?;
    Some(dot(&z_a, &z_b) / a.len() as f64)
}

fn standardize(a: &[f64]) -> Option<Vec<f64>> {
    if a.is_empty() {
        return None;
    }
    let n = a.len() as f64;
    let mean = a.iter().sum::<f64>() / n;
    let var = a.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if !(var > 0.0) {
        return None;
    }
    let sd = libm::sqrt(var);
    Some(a.iter().map(|v| (v - mean) / sd).collect())
}

/// Symmetric `L x L` matrix of image-averaged Pearson correlations.
/// Entries are `None` when some image had a zero-variance representation.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCorrelationMatrix {
    pub num_layers: usize,
    pub entries: Vec<Option<f64>>,
}

impl LayerCorrelationMatrix {
    pub fn get(&self, a: usize, b: usize) -> Option<f64> {
        self.entries[a * self.num_layers + b]
    }
}

/// Streaming form of [`layer_correlations`]: feed one image at a time.
#[derive(Debug, Clone)]
pub struct CorrelationAccumulator {
    num_layers: usize,
    num_images: usize,
    sums: Vec<f64>,
    defined: Vec<bool>,
}

impl CorrelationAccumulator {
    pub fn new(num_layers: usize) -> Self {
        Self {
            num_layers,
            num_images: 0,
            sums: vec![0.0; num_layers * num_layers],
            defined: vec![true; num_layers * num_layers],
        }
    }

    /// `per_layer[ℓ]` is this image's flattened representation at layer ℓ.
    pub fn add_image(&mut self, per_layer: &[&[f64]]) -> Result<()> {
        let l = self.num_layers;
        if per_layer.len() != l {
            return Err(dim_err("image does not cover every layer"));
        }
        let len = per_layer.first().map_or(0, |v| v.len());
        if len == 0 || per_layer.iter().any(|v| v.len() != len) {
            return Err(dim_err("every layer must flatten to the same length per image"));
        }
        let z: Vec<Option<Vec<f64>>> = per_layer.iter().map(|v| standardize(v)).collect();
        for a in 0..l {
            for b in a..l {
                match (&z[a], &z[b]) {
                    (Some(za), Some(zb)) => self.sums[a * l + b] += dot(za, zb) / len as f64,
                    _ => self.defined[a * l + b] = false,
                }
            }
        }
        self.num_images += 1;
        Ok(())
    }

    /// Fold in another accumulator over the same layers.
    pub fn merge(&mut self, other: &CorrelationAccumulator) {
        debug_assert_eq!(self.num_layers, other.num_layers);
        for (s, o) in self.sums.iter_mut().zip(&other.sums) {
            *s += o;
        }
        for (d, o) in self.defined.iter_mut().zip(&other.defined) {
            *d &= o;
        }
        self.num_images += other.num_images;
    }

    pub fn finish(self) -> Result<LayerCorrelationMatrix> {
        let l = self.num_layers;
        if l == 0 || self.num_images == 0 {
            return Err(Error::Argument("layer correlations need layers and images".into()));
        }
        let mut entries = vec![None; l * l];
        for a in 0..l {
            for b in a..l {
                if self.defined[a * l + b] {
                    let r = (self.sums[a * l + b] / self.num_images as f64).clamp(-1.0, 1.0);
                    entries[a * l + b] = Some(r);
                    entries[b * l + a] = Some(r);
                }
            }
        }
        Ok(LayerCorrelationMatrix { num_layers: l, entries })
    }
}

/// `layers[ℓ]` holds `num_images` flattened representations of equal
/// length, concatenated. Correlations are computed per image, then averaged.
pub fn layer_correlations(layers: &[Vec<f64>], num_images: usize) -> Result<LayerCorrelationMatrix> {
    if layers.is_empty() || num_images == 0 {
        return Err(Error::Argument("layer correlations need layers and images".into()));
    }
    let len = layers[0].len() / num_images;
    if layers.iter().any(|v| v.len() != len * num_images) || len == 0 {
        return Err(dim_err("every layer must flatten to the same length per image"));
    }
    let mut acc = CorrelationAccumulator::new(layers.len());
    for n in 0..num_images {
        let slices: Vec<&[f64]> = layers.iter().map(|v| &v[n * len..(n + 1) * len]).collect();
        acc.add_image(&slices)?;
    }
    acc.finish()
}

/// Orthogonal Procrustes residual `min_R ‖X R − Y‖_F / ‖Y‖_F` over
/// orthogonal `R`, for `X`, `Y` of equal shape `[n, k]`.
pub fn procrustes_residual(x: &Matrix, y: &Matrix) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(dim_err("Procrustes operands differ in shape"));
    }
    let s = svd(&x.transpose().matmul(y)?);
    let r = s.u.matmul_t(&s.v)?;
    Ok(x.matmul(&r)?.relative_frobenius_error(y))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_embedding(h: usize, w: usize, d: usize) -> Matrix {
        // grid coordinates on axes 1 and 3 of d
        Matrix::from_fn(h * w, d, |t, c| match c {
            1 => (t % w) as f64,
            3 => (t / w) as f64 * 0.7,
            _ => 0.0,
        })
    }

    #[test]
    fn planar_grid_has_no_third_component() {
        let e = pca_position(0, &grid_embedding(4, 4, 6)).unwrap();
        assert!(e.explained_variance[2] <= 1e-12 * e.total_variance);
        let grid = Matrix::from_fn(16, 2, |t, c| if c == 0 { (t % 4) as f64 - 1.5 } else { ((t / 4) as f64 - 1.5) * 0.7 });
        let xy = Matrix::from_fn(16, 2, |r, c| e.coords[(r, c)]);
        assert!(procrustes_residual(&xy, &grid).unwrap() < 1e-10);
    }

    #[test]
    fn identical_tokens_are_degenerate() {
        let m = Matrix::from_fn(5, 3, |_, c| 0.1 * (c + 1) as f64);
        assert_eq!(pca_position(0, &m), Err(Error::DegenerateManifold));
        assert_eq!(pca_position(0, &Matrix::zeros(5, 3)), Err(Error::DegenerateManifold));
    }

    #[test]
    fn tiny_but_real_variance_succeeds() {
        let m = Matrix::from_fn(4, 2, |r, c| 1e-10 * ((r * 2 + c) as f64 - 3.5));
        assert!(pca_position(0, &m).is_ok());
    }

    #[test]
    fn rotation_views() {
        let e = pca_position(0, &Matrix::from_fn(6, 4, |r, c| libm::sin((r * 4 + c) as f64))).unwrap();
        let views = render_rotations(&e, &VIEW_ANGLES);
        for (t, p) in views[0].points.iter().enumerate() {
            assert!((p.0 - e.coords[(t, 0)]).abs() < 1e-12 && (p.1 - e.coords[(t, 1)]).abs() < 1e-12);
            let m = views[4].points[t];
            assert!((m.0 + p.0).abs() < 1e-12 && (m.1 - p.1).abs() < 1e-12);
            let q = views[2].points[t];
            assert!((q.0 - e.coords[(t, 2)]).abs() < 1e-12 && (q.1 - e.coords[(t, 1)]).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_colors_fixed_corners() {
        assert_eq!(grid_color(3, 3, 4, 4), [0, 0, 229]);
        assert_eq!(grid_color(0, 0, 4, 4)[0], 255);
    }

    #[test]
    fn correlation_self_and_negation() {
        let a: Vec<f64> = (0..12).map(|i| libm::sin(i as f64)).collect();
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        let m = layer_correlations(&[a.clone(), neg], 2).unwrap();
        assert!((m.get(0, 0).unwrap() - 1.0).abs() < 1e-12);
        assert!((m.get(0, 1).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(m.get(0, 1), m.get(1, 0));
    }

    #[test]
    fn zero_variance_is_undefined() {
        let flat = vec![1.0; 6];
        let live: Vec<f64> = (0..6).map(|i| i as f64).collect();
        let m = layer_correlations(&[flat, live], 2).unwrap();
        assert_eq!(m.get(0, 1), None);
        assert_eq!(m.get(0, 0), None);
        assert!(m.get(1, 1).is_some());
    }
}
