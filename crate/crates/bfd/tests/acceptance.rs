//! Acceptance run on synthetic archives. Prints one PASS/FAIL line per
//! criterion and exits nonzero if any fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use bfd::model::{load_block, load_weights, write_synth_archive};
use bfd::store::Archive;
use bfd_core::energy::{head_energies, layer_shares, Directed, EnergyTable};
use bfd_core::factorization::orthogonality_report;
use bfd_core::geometry::{pca_position, procrustes_residual};
use bfd_core::probes::{content_dataset, loss_and_gradient, raw_dataset, train_probe, LinearProbe, ProbeConfig, ProbeSource};
use bfd_core::specialization::{mode_points, EnergyStatistic};
use bfd_core::spectral::{interaction_matrix, mode_alignment, mode_sum, projected_codes, stable_rank};
use bfd_core::synth::{planted_truth, PositionPattern, SynthConfig};
use bfd_core::{decompose_head, factorize, FactorSet, Matrix, TokenSubset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    failures: usize,
}

impl Outcome {
    fn check(&mut self, name: &str, pass: bool, detail: String) {
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failures += 1;
        }
    }
}

fn max_of(it: impl IntoIterator<Item = f64>) -> f64 {
    it.into_iter().fold(0.0, f64::max)
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn synth(dir: &Path, cfg: &SynthConfig) -> Archive {
    write_synth_archive(cfg, dir).unwrap();
    Archive::open(dir).unwrap()
}

fn factors_of(a: &Archive) -> Vec<FactorSet> {
    a.manifest()
        .captured_layers()
        .into_iter()
        .map(|l| factorize(&load_block(a, l).unwrap(), TokenSubset::PatchOnly).unwrap())
        .collect()
}

fn factorization(out: &mut Outcome, a: &Archive) {
    let blocks: Vec<_> = (0..a.manifest().num_layers).map(|l| load_block(a, l).unwrap()).collect();
    let start = Instant::now();
    let mut recon = 0.0f64;
    let mut orth = 0.0f64;
    for b in &blocks {
        let f = factorize(b, TokenSubset::PatchOnly).unwrap();
        recon = recon.max(f.reconstruction_error(b));
        orth = orth.max(orthogonality_report(&f).max_relative());
    }
    let t = start.elapsed();
    out.check(
        "factorization identities",
        recon <= 1e-5 && orth <= 1e-5 && t < Duration::from_secs(1),
        format!("reconstruction {recon:.2e}, orthogonality {orth:.2e} (<= 1e-5), {:.3}s (< 1s)", secs(t)),
    );
}

fn completeness(out: &mut Outcome, a: &Archive) {
    let m = a.manifest().clone();
    let start = Instant::now();
    let (mut mode_err, mut expansion_err) = (0.0f64, 0.0f64);
    for l in 0..m.num_layers {
        let block = load_block(a, l).unwrap();
        let f = factorize(&block, TokenSubset::PatchOnly).unwrap();
        for h in 0..m.num_heads {
            let (wq, wk) = load_weights(a, l, h).unwrap();
            let w = interaction_matrix(&wq, &wk).unwrap();
            let basis = decompose_head(&wq, &wk).unwrap();
            for n in 0..m.num_images {
                let all = block.image(n);
                let (zq, zk) = projected_codes(&all, &basis).unwrap();
                let direct = all.matmul(&w).unwrap().matmul_t(&all).unwrap();
                mode_err = mode_err.max(mode_sum(&zq, &basis.sigma, &zk).unwrap().relative_frobenius_error(&direct));
                let sel = Matrix::from_fn(f.num_tokens(), m.embed_dim, |r, c| all[(f.tokens[r], c)]);
                let direct_sel = sel.matmul(&w).unwrap().matmul_t(&sel).unwrap();
                let expanded = bfd_core::energy::bilinear_expansion(&f, n, &basis).unwrap();
                expansion_err = expansion_err.max(expanded.relative_frobenius_error(&direct_sel));
            }
        }
    }
    let t = start.elapsed();
    out.check(
        "mode completeness",
        mode_err <= 1e-4 && expansion_err <= 1e-4 && t < Duration::from_secs(5),
        format!(
            "mode sum {mode_err:.2e}, nine-term expansion {expansion_err:.2e} (<= 1e-4 relative), {:.3}s (< 5s)",
            secs(t)
        ),
    );
}

fn energy(out: &mut Outcome, a: &Archive, factors: &[FactorSet]) {
    let m = a.manifest();
    let mut row_dev = 0.0f64;
    let mut share_dev = 0.0f64;
    let mut scale_dev = 0.0f64;
    for f in factors {
        let mut tables = Vec::new();
        for h in 0..m.num_heads {
            let (wq, wk) = load_weights(a, f.layer, h).unwrap();
            let t = head_energies(f, &decompose_head(&wq, &wk).unwrap()).unwrap();
            for (i, row) in t.normalized.iter().enumerate() {
                if !t.degenerate[i] {
                    row_dev = row_dev.max((row.iter().sum::<f64>() - 1.0).abs());
                }
            }
            let degen = t.degenerate_undirected();
            for (i, row) in t.normalized_undirected().iter().enumerate() {
                if !degen[i] {
                    row_dev = row_dev.max((row.iter().sum::<f64>() - 1.0).abs());
                }
            }
            let mut wq3 = wq.clone();
            wq3.scale(3.0);
            let t3 = head_energies(f, &decompose_head(&wq3, &wk).unwrap()).unwrap();
            for (r, r3) in t.normalized.iter().zip(&t3.normalized) {
                scale_dev = scale_dev.max(max_of(r.iter().zip(r3).map(|(x, y)| (x - y).abs())));
            }
            tables.push(t);
        }
        let p = layer_shares(&tables).unwrap();
        share_dev = share_dev.max((p.shares.iter().sum::<f64>() - 1.0).abs());
    }
    out.check(
        "energy normalization",
        row_dev <= 1e-6 && share_dev <= 1e-6 && scale_dev <= 1e-6,
        format!(
            "max |row sum - 1| {row_dev:.2e}, max |share sum - 1| {share_dev:.2e}, W_Q x3 change {scale_dev:.2e} (all <= 1e-6)"
        ),
    );
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

fn spectral(out: &mut Outcome, a: &Archive) {
    let d = 12;
    let identity = stable_rank(&decompose_head(&Matrix::identity(d), &Matrix::identity(d)).unwrap()).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random_matrix(&mut rng, d, 1);
    let y = random_matrix(&mut rng, d, 1);
    let pad = |v: &Matrix| Matrix::from_fn(d, 4, |r, c| if c == 0 { v[(r, 0)] } else { 0.0 });
    let rank1 = stable_rank(&decompose_head(&pad(&x), &pad(&y)).unwrap()).unwrap();

    let diag = stable_rank(&decompose_head(&Matrix::from_diag(&[2.0, 1.0, 1.0]), &Matrix::identity(3)).unwrap()).unwrap();

    let m = a.manifest();
    let mut max_nonzero = 0usize;
    for l in 0..m.num_layers {
        for h in 0..m.num_heads {
            let (wq, wk) = load_weights(a, l, h).unwrap();
            // full d x d factorization of W, not the d_h-truncated basis
            let w = interaction_matrix(&wq, &wk).unwrap();
            let full = decompose_head(&w, &Matrix::identity(m.embed_dim)).unwrap();
            max_nonzero = max_nonzero.max(full.nonzero_modes(1e-10));
        }
    }

    let b = random_matrix(&mut rng, 8, 8);
    let spd = decompose_head(&b, &b).unwrap();
    let align = mode_alignment(&spd);
    let align_dev = max_of(align.iter().zip(&spd.sigma).map(|(a, s)| (a - s).abs()));

    out.check(
        "spectral diagnostics",
        identity == d as f64
            && (rank1 - 1.0).abs() <= 1e-12
            && (diag - 1.5).abs() <= 1e-12
            && max_nonzero <= m.head_dim
            && align_dev <= 1e-6,
        format!(
            "identity {identity} (= {d}), rank-1 {rank1}, sigma (2,1,1) {diag}, nonzero modes {max_nonzero} (<= d_h = {}), SPD alignment deviation {align_dev:.2e}",
            m.head_dim
        ),
    );
}

fn single_pair_table(k: usize, pairs: &[&str]) -> EnergyTable {
    let mut raw: [Vec<f64>; 9] = std::array::from_fn(|_| vec![0.0; k]);
    for d in Directed::all() {
        if pairs.contains(&d.label().as_str()) {
            raw[d.index()] = vec![1.0; k];
        }
    }
    EnergyTable {
        layer: 0,
        head: 0,
        num_images: 1,
        normalized: raw.clone(),
        raw_mean: raw,
        degenerate: [false; 9],
        image_totals: Vec::new(),
    }
}

fn specialization(out: &mut Outcome) {
    let cc = mode_points(&[single_pair_table(2, &["C->C"])], EnergyStatistic::RawMean);
    let pc = mode_points(&[single_pair_table(2, &["P->C", "C->P"])], EnergyStatistic::RawMean);
    let near = |p: Option<(f64, f64)>, x: f64, y: f64| p.is_some_and(|(a, b)| (a - x).abs() <= 1e-12 && (b - y).abs() <= 1e-12);
    let c_vertex = cc.iter().all(|p| near(p.planar(), 0.5, 0.0));
    let midpoint = pc.iter().all(|p| near(p.planar(), 0.75, 3f64.sqrt() / 4.0));

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let tables: Vec<EnergyTable> = (0..12)
        .map(|h| {
            let mut t = single_pair_table(64, &[]);
            t.head = h;
            for row in t.raw_mean.iter_mut() {
                row.iter_mut().for_each(|v| *v = rng.random_range(0.0..1.0));
            }
            t
        })
        .collect();
    let count = mode_points(&tables, EnergyStatistic::RawMean).len();
    out.check(
        "specialization geometry",
        c_vertex && midpoint && count == 768,
        format!(
            "C-C only at C vertex: {c_vertex}, P-C only at P-C midpoint: {midpoint}, points at H=12 K=64: {count} (= 768)"
        ),
    );
}

fn probes(out: &mut Outcome, dir: &Path) {
    let cfg = SynthConfig {
        pattern: PositionPattern::Random,
        ..SynthConfig::default()
    };
    let a = synth(dir, &cfg);
    let s = a.manifest().num_special_tokens;
    let classes = a.manifest().num_patch_tokens;
    let start = Instant::now();
    let (mut raw_min, mut content_max) = (f64::INFINITY, 0.0f64);
    for l in 0..cfg.num_layers {
        let block = load_block(&a, l).unwrap();
        let f = factorize(&block, TokenSubset::PatchOnly).unwrap();
        for (source, data) in [
            (ProbeSource::Raw, raw_dataset(&block)),
            (ProbeSource::Content, content_dataset(&f, s).unwrap()),
        ] {
            let r = train_probe(&data, &ProbeConfig { source, layer: l, ..ProbeConfig::default() }).unwrap();
            match source {
                ProbeSource::Raw => raw_min = raw_min.min(r.accuracy),
                ProbeSource::Content => content_max = content_max.max(r.accuracy),
            }
        }
    }
    let t = start.elapsed();

    let block = load_block(&a, 0).unwrap();
    let data = raw_dataset(&block);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut probe = LinearProbe {
        weights: random_matrix(&mut rng, classes, cfg.dim),
        bias: (0..classes).map(|_| rng.random_range(-0.5..0.5)).collect(),
    };
    let rows: Vec<usize> = (0..64).map(|_| rng.random_range(0..data.labels.len())).collect();
    let (_, grad) = loss_and_gradient(&probe, &data, &rows);
    let eps = 1e-6;
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for r in 0..classes {
        for c in 0..cfg.dim {
            let orig = probe.weights[(r, c)];
            probe.weights[(r, c)] = orig + eps;
            let up = loss_and_gradient(&probe, &data, &rows).0;
            probe.weights[(r, c)] = orig - eps;
            let down = loss_and_gradient(&probe, &data, &rows).0;
            probe.weights[(r, c)] = orig;
            let fd = (up - down) / (2.0 * eps);
            num += (grad.weights[(r, c)] - fd).powi(2);
            den += fd * fd;
        }
        let orig = probe.bias[r];
        probe.bias[r] = orig + eps;
        let up = loss_and_gradient(&probe, &data, &rows).0;
        probe.bias[r] = orig - eps;
        let down = loss_and_gradient(&probe, &data, &rows).0;
        probe.bias[r] = orig;
        let fd = (up - down) / (2.0 * eps);
        num += (grad.bias[r] - fd).powi(2);
        den += fd * fd;
    }
    let grad_err = (num / den).sqrt();
    let bound = 2.0 / classes as f64;
    out.check(
        "probe sanity",
        raw_min >= 0.95 && content_max <= bound && grad_err <= 1e-4 && t < Duration::from_secs(30),
        format!(
            "min raw accuracy {raw_min:.4} (>= 0.95), max content accuracy {content_max:.4} (<= {bound:.4}), gradient error {grad_err:.2e} (<= 1e-4), {:.2}s (< 30s)",
            secs(t)
        ),
    );
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

/// Per-image Pearson by explicit two-pass mean and variance, then averaged.
fn two_pass_correlation(a: &Archive, la: usize, lb: usize) -> f64 {
    let m = a.manifest();
    let (xa, xb) = (load_block(a, la).unwrap(), load_block(a, lb).unwrap());
    let mut total = 0.0;
    for n in 0..m.num_images {
        let (x, y) = (xa.image(n), xb.image(n));
        let (x, y) = (x.as_slice(), y.as_slice());
        let len = x.len() as f64;
        let mx = x.iter().sum::<f64>() / len;
        let my = y.iter().sum::<f64>() / len;
        let (mut sxy, mut sxx, mut syy) = (0.0f64, 0.0f64, 0.0f64);
        for (p, q) in x.iter().zip(y) {
            sxy += (p - mx) * (q - my);
            sxx += (p - mx) * (p - mx);
            syy += (q - my) * (q - my);
        }
        total += sxy / (sxx * syy).sqrt();
    }
    total / m.num_images as f64
}

fn geometry(out: &mut Outcome, a: &Archive, factors: &[FactorSet], report: &Path) {
    let cfg = SynthConfig::default();
    let truth = planted_truth(&cfg).unwrap();
    let (mut third, mut residual) = (0.0f64, 0.0f64);
    for f in factors {
        let e = pca_position(f.layer, &f.mu_position).unwrap();
        third = third.max(e.explained_variance[2] / e.total_variance);
        let xy = Matrix::from_fn(e.coords.rows(), 2, |r, c| e.coords[(r, c)]);
        let planted = truth.layers[f.layer].grid_coords.as_ref().unwrap();
        residual = residual.max(procrustes_residual(&xy, planted).unwrap());
    }

    let rows = read_csv(&report.join("correlations_raw.csv"));
    let l = a.manifest().num_layers;
    let value = |r: usize, c: usize| rows[r][c + 1].parse::<f64>().unwrap();
    let mut diag = 0.0f64;
    let mut asym = 0.0f64;
    let mut oracle = 0.0f64;
    for r in 0..l {
        diag = diag.max((value(r, r) - 1.0).abs());
        for c in 0..l {
            asym = asym.max((value(r, c) - value(c, r)).abs());
            if c > r {
                oracle = oracle.max((value(r, c) - two_pass_correlation(a, r, c)).abs());
            }
        }
    }
    out.check(
        "geometry",
        third <= 1e-8 && residual <= 1e-6 && diag <= 1e-12 && asym == 0.0 && oracle <= 1e-7,
        format!(
            "third variance share {third:.2e} (<= 1e-8), Procrustes {residual:.2e} (<= 1e-6), |diag - 1| {diag:.2e}, asymmetry {asym:.1e}, oracle deviation {oracle:.2e} (<= 1e-7)"
        ),
    );
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().display().to_string(), fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn report(archive: &Path, out: &Path) {
    let status = Command::new(env!("CARGO_BIN_EXE_bfd"))
        .arg("report")
        .arg("--archive")
        .arg(archive)
        .arg("--out")
        .arg(out)
        .args(["--workers", "1", "--plots"])
        .status()
        .unwrap();
    assert!(status.success(), "bfd report failed");
}

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let default_dir = tmp.path().join("default");
    let a = synth(&default_dir, &SynthConfig::default());
    let factors = factors_of(&a);
    let (r1, r2) = (tmp.path().join("report1"), tmp.path().join("report2"));
    report(&default_dir, &r1);
    report(&default_dir, &r2);

    let mut out = Outcome { failures: 0 };
    factorization(&mut out, &a);
    completeness(&mut out, &a);
    energy(&mut out, &a, &factors);
    spectral(&mut out, &a);
    specialization(&mut out);
    probes(&mut out, &tmp.path().join("random"));
    geometry(&mut out, &a, &factors, &r1);
    let (t1, t2) = (tree(&r1), tree(&r2));
    let differing = t1.iter().filter(|(k, v)| t2.get(*k) != Some(v)).count();
    out.check(
        "determinism",
        t1.len() == t2.len() && differing == 0 && !t1.is_empty(),
        format!("{} files per bundle, {differing} differ between two single-worker report runs", t1.len()),
    );
    if out.failures > 0 {
        println!("{} criteria failed", out.failures);
        std::process::exit(1);
    }
}
