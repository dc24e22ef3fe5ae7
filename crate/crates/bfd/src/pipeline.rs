//! Analysis stages over one archive, writing into a report bundle.
//!
//! Work is split across `(layer, head)` pairs or layers only, and results
//! are collected in index order, so outputs do not depend on the worker
//! count.

use std::fs;
use std::path::{Path, PathBuf};

use bfd_core::energy::{head_energies, interaction_map, layer_shares, Directed, EnergyTable, Factor, Interaction};
use bfd_core::factorization::orthogonality_report;
use bfd_core::geometry::{pca_position, render_rotations, CorrelationAccumulator, VIEW_ANGLES};
use bfd_core::heatmaps::{mode_heatmap, top_activating_images, Side};
use bfd_core::probes::{content_dataset, raw_dataset, train_probe, ProbeConfig, ProbeSource};
use bfd_core::specialization::{mode_points, simplex_density, EnergyStatistic, HexGrid};
use bfd_core::spectral::{mode_alignment, summarize, weighted_layer_alignment, SpectralSummary};
use bfd_core::{factorize, FactorSet, Matrix, ModeBasis, TokenSubset};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{BfdError, Result};
use crate::model::{cache_dir, load_basis, load_block, write_factor_cache, write_mode_cache, Cache};
use crate::output::{fmt_f64, fmt_opt, Bundle};
use crate::render;
use crate::store::{activation_name, Archive, ArchiveKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum StatisticArg {
    RawMean,
    Normalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SourceArg {
    Raw,
    Content,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum FactorArg {
    #[value(alias = "L")]
    Layer,
    #[value(alias = "P")]
    Position,
    #[value(alias = "C")]
    Content,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SideArg {
    Query,
    Key,
    Both,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeOptions {
    pub source: SourceArg,
    pub seed: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub holdout: Option<f64>,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        let d = ProbeConfig::default();
        Self {
            source: SourceArg::Both,
            seed: d.seed,
            learning_rate: d.learning_rate,
            batch_size: d.batch_size,
            epochs: d.epochs,
            holdout: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct HeatmapOptions {
    pub factors: Vec<FactorArg>,
    pub side: SideArg,
    pub image: Option<usize>,
    pub top_k: usize,
}

impl Default for HeatmapOptions {
    fn default() -> Self {
        Self {
            factors: vec![FactorArg::Position, FactorArg::Content],
            side: SideArg::Both,
            image: None,
            top_k: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Options {
    pub include_special_tokens: bool,
    pub layer: Option<usize>,
    pub head: Option<usize>,
    /// Heatmap mode; all modes elsewhere.
    pub mode: Option<usize>,
    pub hex_resolution: usize,
    pub energy_statistic: StatisticArg,
    pub patch_only_correlations: bool,
    pub plots: bool,
    pub workers: usize,
    pub probe: ProbeOptions,
    pub heatmap: HeatmapOptions,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            include_special_tokens: false,
            layer: None,
            head: None,
            mode: None,
            hex_resolution: 20,
            energy_statistic: StatisticArg::RawMean,
            patch_only_correlations: false,
            plots: false,
            workers: 1,
            probe: ProbeOptions::default(),
            heatmap: HeatmapOptions::default(),
        }
    }
}

type Stage = fn(&mut Context) -> Result<()>;

pub const RUN_MANIFEST: &str = "run_manifest.json";

pub struct Context {
    archive: Archive,
    archive_arg: String,
    out: PathBuf,
    bundle: Bundle,
    opts: Options,
    pool: rayon::ThreadPool,
    fresh_manifest: bool,
    energy_memo: Option<(Vec<usize>, Vec<Vec<EnergyTable>>)>,
}

fn pairs(layers: &[usize], heads: &[usize]) -> Vec<(usize, usize)> {
    layers.iter().flat_map(|&l| heads.iter().map(move |&h| (l, h))).collect()
}

fn interaction_labels() -> [&'static str; 6] {
    Interaction::ALL.map(Interaction::label)
}

impl Context {
    pub fn new(archive_path: &Path, archive_arg: String, out: &Path, opts: Options) -> Result<Self> {
        if opts.workers == 0 {
            return Err(BfdError::Usage("--workers must be at least 1".into()));
        }
        if opts.hex_resolution == 0 {
            return Err(BfdError::Usage("--hex-resolution must be at least 1".into()));
        }
        let archive = Archive::open(archive_path)?;
        if archive.manifest().kind() != ArchiveKind::Model {
            return Err(BfdError::Usage(format!("{} is a cache archive, not a model archive", archive_arg)));
        }
        let m = archive.manifest();
        if let Some(l) = opts.layer {
            crate::model::check_layer(m, l)?;
        }
        if let Some(h) = opts.head {
            if h >= m.num_heads {
                return Err(BfdError::Usage(format!("head {h} out of range ({} heads)", m.num_heads)));
            }
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.workers)
            .build()
            .map_err(|e| BfdError::Other(format!("thread pool: {e}")))?;
        Ok(Self {
            archive,
            archive_arg,
            out: out.to_path_buf(),
            bundle: Bundle::create(out)?,
            opts,
            pool,
            fresh_manifest: false,
            energy_memo: None,
        })
    }

    pub fn archive(&self) -> &Archive {
        &self.archive
    }

    fn layers(&self) -> Vec<usize> {
        match self.opts.layer {
            Some(l) => vec![l],
            None => self.archive.manifest().captured_layers(),
        }
    }

    fn heads(&self) -> Vec<usize> {
        match self.opts.head {
            Some(h) => vec![h],
            None => (0..self.archive.manifest().num_heads).collect(),
        }
    }

    fn all_heads(&self) -> Vec<usize> {
        (0..self.archive.manifest().num_heads).collect()
    }

    fn factor_cache(&self, stage: &str) -> Result<Cache> {
        Cache::open(&cache_dir(&self.out, ArchiveKind::Factors), &self.archive, ArchiveKind::Factors, "factorize")
            .map_err(|e| match e {
                BfdError::Dependency(msg) => BfdError::Dependency(format!("{stage}: {msg}")),
                other => other,
            })
    }

    fn par_map<T, R, F>(&self, items: &[T], f: F) -> Result<Vec<R>>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> Result<R> + Sync + Send,
    {
        self.pool.install(|| items.par_iter().map(&f).collect())
    }

    fn bases(&self, layers: &[usize], heads: &[usize]) -> Result<Vec<ModeBasis>> {
        let archive = &self.archive;
        self.par_map(&pairs(layers, heads), |&(l, h)| load_basis(archive, l, h))
    }

    /// Start `run_manifest.json` from scratch instead of merging.
    pub fn fresh_run_manifest(&mut self) {
        self.fresh_manifest = true;
    }

    /// Merge this stage's options and files into `run_manifest.json`.
    pub fn record_stage(&mut self, stage: &str) -> Result<()> {
        let files = self.bundle.take_files();
        let path = self.out.join(RUN_MANIFEST);
        let m = self.archive.manifest();
        let archive_info = json!({
            "path": self.archive_arg,
            "manifest_sha256": self.archive.digest(),
            "model_name": m.model_name,
            "format_version": m.format_version,
            "metadata": m.metadata,
        });
        let mut doc: Value = if self.fresh_manifest {
            Value::Null
        } else {
            fs::read(&path)
                .ok()
                .and_then(|b| serde_json::from_slice(&b).ok())
                .unwrap_or(Value::Null)
        };
        let same_archive = doc.get("archive") == Some(&archive_info);
        if !same_archive || !doc.is_object() {
            doc = json!({
                "tool": "bfd",
                "version": env!("CARGO_PKG_VERSION"),
                "archive": archive_info,
                "stages": {},
            });
        }
        self.fresh_manifest = false;
        let mut opts = serde_json::to_value(&self.opts).map_err(|e| BfdError::Other(e.to_string()))?;
        // worker count changes scheduling only
        if let Some(o) = opts.as_object_mut() {
            o.remove("workers");
        }
        doc["stages"][stage] = json!({ "options": opts, "files": files });
        let mut s = serde_json::to_string_pretty(&doc).map_err(|e| BfdError::Other(e.to_string()))?;
        s.push('\n');
        fs::write(&path, s).map_err(|e| BfdError::io(&path, e))
    }

    pub fn factorize(&mut self) -> Result<Vec<FactorSet>> {
        let subset = TokenSubset::from_include_special(self.opts.include_special_tokens);
        let layers = self.layers();
        let archive = &self.archive;
        let results = self.par_map(&layers, |&l| {
            let block = load_block(archive, l)?;
            let f = factorize(&block, subset)?;
            let err = f.reconstruction_error(&block);
            let orth = orthogonality_report(&f).relative();
            Ok((f, err, orth))
        })?;
        let rows = results.iter().map(|(f, err, o)| {
            vec![
                f.layer.to_string(),
                if subset.includes_special() { "all" } else { "patch" }.to_string(),
                fmt_f64(*err),
                fmt_f64(o[0]),
                fmt_f64(o[1]),
                fmt_f64(o[2]),
            ]
        });
        self.bundle.csv(
            "factorization.csv",
            &[
                "layer",
                "token_subset",
                "reconstruction_max_abs",
                "orthogonality_layer_position",
                "orthogonality_layer_content",
                "orthogonality_position_content",
            ],
            rows,
        )?;
        let factors: Vec<FactorSet> = results.into_iter().map(|r| r.0).collect();
        let dir = cache_dir(&self.out, ArchiveKind::Factors);
        remove_dir(&dir)?;
        write_factor_cache(&dir, &self.archive, &factors)?;
        self.bundle.note("cache/factors/manifest.json");
        self.energy_memo = None;
        Ok(factors)
    }

    pub fn modes(&mut self) -> Result<()> {
        let layers = self.layers();
        let bases = self.bases(&layers, &self.heads())?;
        let summaries: Vec<Option<SpectralSummary>> = bases.iter().map(|b| summarize(b).ok()).collect();
        let mut spectral = Vec::new();
        let mut spectrum = Vec::new();
        let mut alignment = Vec::new();
        for (b, s) in bases.iter().zip(&summaries) {
            let (l, h) = (b.layer.to_string(), b.head.to_string());
            spectral.push(vec![
                l.clone(),
                h.clone(),
                fmt_opt(s.as_ref().map(|s| s.stable_rank)),
                fmt_f64(b.sigma[0]),
            ]);
            let align = mode_alignment(b);
            for i in 0..b.num_modes() {
                spectrum.push(vec![
                    l.clone(),
                    h.clone(),
                    i.to_string(),
                    fmt_f64(b.sigma[i]),
                    fmt_opt(s.as_ref().map(|s| s.spectrum[i])),
                ]);
                let cos = if b.sigma[i] > 0.0 { Some(align[i] / b.sigma[i]) } else { None };
                alignment.push(vec![l.clone(), h.clone(), i.to_string(), fmt_opt(cos), fmt_f64(align[i])]);
            }
        }
        self.bundle
            .csv("spectral.csv", &["layer", "head", "stable_rank", "sigma_max"], spectral)?;
        self.bundle
            .csv("spectrum.csv", &["layer", "head", "mode", "sigma", "normalized_sigma"], spectrum)?;
        self.bundle
            .csv("alignment.csv", &["layer", "head", "mode", "cosine", "alignment"], alignment)?;
        let layer_rows = layers.iter().map(|&l| {
            let s: Vec<SpectralSummary> = summaries.iter().flatten().filter(|s| s.layer == l).cloned().collect();
            vec![l.to_string(), fmt_opt(weighted_layer_alignment(&s))]
        });
        self.bundle
            .csv("layer_alignment.csv", &["layer", "weighted_alignment"], layer_rows)?;
        let dir = cache_dir(&self.out, ArchiveKind::Modes);
        remove_dir(&dir)?;
        write_mode_cache(&dir, &self.archive, &bases)?;
        self.bundle.note("cache/modes/manifest.json");
        Ok(())
    }

    /// Energy tables for every head of each selected layer, from the factor
    /// cache and freshly decomposed weights.
    fn energy_tables(&mut self, stage: &str) -> Result<(Vec<usize>, Vec<Vec<EnergyTable>>)> {
        let layers = self.layers();
        if let Some((l, t)) = &self.energy_memo {
            if *l == layers {
                return Ok((l.clone(), t.clone()));
            }
        }
        let cache = self.factor_cache(stage)?;
        let factors = self.par_map(&layers, |&l| cache.load_factors(l))?;
        let heads = self.all_heads();
        let jobs = pairs(&(0..layers.len()).collect::<Vec<_>>(), &heads);
        let archive = &self.archive;
        let flat = self.par_map(&jobs, |&(li, h)| {
            let f = &factors[li];
            let basis = load_basis(archive, f.layer, h)?;
            Ok(head_energies(f, &basis)?)
        })?;
        let mut tables: Vec<Vec<EnergyTable>> = layers.iter().map(|_| Vec::new()).collect();
        for ((li, _), t) in jobs.iter().zip(flat) {
            tables[*li].push(t);
        }
        self.energy_memo = Some((layers.clone(), tables.clone()));
        Ok((layers, tables))
    }

    pub fn energy(&mut self) -> Result<()> {
        let (layers, tables) = self.energy_tables("energy")?;
        let keep_head = |h: usize| self.opts.head.is_none_or(|x| x == h);
        let mut rows = Vec::new();
        for t in tables.iter().flatten().filter(|t| keep_head(t.head)) {
            let (l, h) = (t.layer.to_string(), t.head.to_string());
            for d in Directed::all() {
                let i = d.index();
                for m in 0..t.num_modes() {
                    rows.push(vec![
                        l.clone(),
                        h.clone(),
                        d.label(),
                        m.to_string(),
                        fmt_f64(t.normalized[i][m]),
                        fmt_f64(t.raw_mean[i][m]),
                        u8::from(t.degenerate[i]).to_string(),
                    ]);
                }
            }
            let (norm, raw, degen) = (t.normalized_undirected(), t.raw_undirected(), t.degenerate_undirected());
            for int in Interaction::ALL {
                let i = int.index();
                for m in 0..t.num_modes() {
                    rows.push(vec![
                        l.clone(),
                        h.clone(),
                        int.label().to_string(),
                        m.to_string(),
                        fmt_f64(norm[i][m]),
                        fmt_f64(raw[i][m]),
                        u8::from(degen[i]).to_string(),
                    ]);
                }
            }
        }
        self.bundle.csv(
            "energies.csv",
            &["layer", "head", "interaction", "mode", "normalized", "raw_mean", "degenerate"],
            rows,
        )?;

        let profiles = tables.iter().map(|t| layer_shares(t)).collect::<bfd_core::Result<Vec<_>>>()?;
        let labels = interaction_labels();
        let mut header = vec!["layer"];
        header.extend(labels);
        header.push("degenerate");
        let share_rows = profiles.iter().map(|p| {
            let mut r = vec![p.layer.to_string()];
            r.extend(p.shares.iter().map(|&s| fmt_f64(s)));
            r.push(u8::from(p.degenerate).to_string());
            r
        });
        self.bundle.csv("layer_shares.csv", &header, share_rows)?;
        let json_layers: Vec<Value> = profiles
            .iter()
            .map(|p| {
                let shares: serde_json::Map<String, Value> =
                    labels.iter().zip(p.shares).map(|(k, v)| (k.to_string(), json!(v))).collect();
                json!({ "layer": p.layer, "shares": shares, "degenerate": p.degenerate })
            })
            .collect();
        self.bundle
            .json("layer_shares.json", &json!({ "interactions": labels, "layers": json_layers }))?;

        let k = tables.iter().flatten().map(EnergyTable::num_modes).max().unwrap_or(0);
        let mut map_header = vec!["layer".to_string(), "interaction".into(), "head".into()];
        map_header.extend((0..k).map(|m| format!("mode{m}")));
        let mut map_rows = Vec::new();
        for (l, t) in layers.iter().zip(&tables) {
            for int in Interaction::ALL {
                let m = interaction_map(t, int);
                for (r, table) in t.iter().enumerate() {
                    if !keep_head(table.head) {
                        continue;
                    }
                    let mut row = vec![l.to_string(), int.label().to_string(), table.head.to_string()];
                    row.extend(m.row(r).iter().map(|&v| fmt_f64(v)));
                    map_rows.push(row);
                }
            }
        }
        let map_header: Vec<&str> = map_header.iter().map(String::as_str).collect();
        self.bundle.csv("interaction_maps.csv", &map_header, map_rows)?;
        if self.opts.plots {
            let bars: Vec<(usize, [f64; 6])> = profiles.iter().map(|p| (p.layer, p.shares)).collect();
            self.bundle
                .text("plots/layer_shares.svg", &render::shares_svg(&labels, &bars))?;
        }
        Ok(())
    }

    pub fn specialize(&mut self) -> Result<()> {
        let (layers, tables) = self.energy_tables("specialize")?;
        let statistic = match self.opts.energy_statistic {
            StatisticArg::RawMean => EnergyStatistic::RawMean,
            StatisticArg::Normalized => EnergyStatistic::Normalized,
        };
        let res = self.opts.hex_resolution;
        let grid = HexGrid::new(res);
        let mut rows = Vec::new();
        for (l, t) in layers.iter().zip(&tables) {
            let points = mode_points(t, statistic);
            for p in &points {
                let (c, xy) = (p.coords, p.planar());
                rows.push(vec![
                    p.layer.to_string(),
                    p.head.to_string(),
                    p.mode.to_string(),
                    fmt_opt(c.map(|c| c[0])),
                    fmt_opt(c.map(|c| c[1])),
                    fmt_opt(c.map(|c| c[2])),
                    fmt_opt(xy.map(|p| p.0)),
                    fmt_opt(xy.map(|p| p.1)),
                ]);
            }
            let density = simplex_density(&points, res);
            let cells = density.cells.iter().map(|(cell, occ)| {
                let (x, y) = grid.center(*cell);
                vec![cell.q.to_string(), cell.r.to_string(), fmt_f64(x), fmt_f64(y), fmt_f64(*occ)]
            });
            self.bundle
                .csv(&format!("density_layer{l}.csv"), &["q", "r", "x", "y", "occupancy"], cells)?;
            if self.opts.plots {
                self.bundle
                    .text(&format!("plots/specialization_layer{l}.svg"), &render::ternary_svg(*l, &points))?;
            }
        }
        self.bundle.csv(
            "specialization.csv",
            &["layer", "head", "mode", "S_L", "S_P", "S_C", "x", "y"],
            rows,
        )
    }

    pub fn probe(&mut self) -> Result<()> {
        let p = &self.opts.probe;
        let sources: Vec<ProbeSource> = match p.source {
            SourceArg::Raw => vec![ProbeSource::Raw],
            SourceArg::Content => vec![ProbeSource::Content],
            SourceArg::Both => vec![ProbeSource::Raw, ProbeSource::Content],
        };
        let cache = if sources.contains(&ProbeSource::Content) {
            Some(self.factor_cache("probe --source content")?)
        } else {
            None
        };
        let layers = self.layers();
        let jobs: Vec<(ProbeSource, usize)> =
            sources.iter().flat_map(|&s| layers.iter().map(move |&l| (s, l))).collect();
        let archive = &self.archive;
        let s = archive.manifest().num_special_tokens;
        let results = self.par_map(&jobs, |&(source, layer)| {
            let data = match source {
                ProbeSource::Raw => raw_dataset(&load_block(archive, layer)?),
                ProbeSource::Content => {
                    content_dataset(&cache.as_ref().expect("cache opened").load_factors(layer)?, s)?
                }
            };
            let cfg = ProbeConfig {
                source,
                layer,
                learning_rate: p.learning_rate,
                batch_size: p.batch_size,
                epochs: p.epochs,
                seed: p.seed,
                holdout_fraction: p.holdout,
            };
            Ok(train_probe(&data, &cfg)?)
        })?;
        let w = archive.manifest().grid_w;
        let mut rows = Vec::new();
        let mut positions = Vec::new();
        for ((source, layer), r) in jobs.iter().zip(&results) {
            rows.push(vec![
                source.name().to_string(),
                layer.to_string(),
                fmt_f64(r.accuracy),
                fmt_f64(r.chance_level),
            ]);
            for (pos, acc) in r.per_position_accuracy.iter().enumerate() {
                positions.push(vec![
                    source.name().to_string(),
                    layer.to_string(),
                    pos.to_string(),
                    (pos / w).to_string(),
                    (pos % w).to_string(),
                    fmt_opt(*acc),
                ]);
            }
        }
        self.bundle
            .csv("probe_results.csv", &["source", "layer", "accuracy", "chance_level"], rows)?;
        self.bundle.csv(
            "probe_positions.csv",
            &["source", "layer", "position", "row", "col", "accuracy"],
            positions,
        )
    }

    pub fn geometry(&mut self) -> Result<()> {
        let cache = self.factor_cache("geometry")?;
        let m = self.archive.manifest().clone();
        let s = m.num_special_tokens;
        let mut variance_rows = Vec::new();
        for l in self.layers() {
            let f = cache.load_factors(l)?;
            let patch_rows: Vec<usize> = (0..f.num_tokens()).filter(|&j| f.tokens[j] >= s).collect();
            let mu = Matrix::from_fn(patch_rows.len(), f.dim, |r, c| f.mu_position[(patch_rows[r], c)]);
            let emb = match pca_position(l, &mu) {
                Ok(e) => Some(e),
                Err(bfd_core::Error::DegenerateManifold) => None,
                Err(e) => return Err(e.into()),
            };
            let coords = (0..m.num_patch_tokens).map(|p| {
                let mut r = vec![(s + p).to_string(), (p / m.grid_w).to_string(), (p % m.grid_w).to_string()];
                r.extend((0..3).map(|c| fmt_opt(emb.as_ref().map(|e| e.coords[(p, c)]))));
                r
            });
            self.bundle
                .csv(&format!("pca_layer{l}.csv"), &["token", "row", "col", "pc1", "pc2", "pc3"], coords)?;
            variance_rows.push(match &emb {
                Some(e) => {
                    let mut r = vec![l.to_string()];
                    r.extend(e.explained_variance.iter().map(|&v| fmt_f64(v)));
                    r.push(fmt_f64(e.total_variance));
                    r.push("0".into());
                    r
                }
                None => {
                    let mut r = vec![l.to_string()];
                    r.extend((0..4).map(|_| crate::output::UNDEFINED.to_string()));
                    r.push("1".into());
                    r
                }
            });
            if let Some(e) = &emb {
                let views = render_rotations(e, &VIEW_ANGLES);
                let mut rows = Vec::new();
                for v in &views {
                    for (p, (h, vert)) in v.points.iter().enumerate() {
                        rows.push(vec![
                            fmt_f64(v.angle_deg),
                            (s + p).to_string(),
                            (p / m.grid_w).to_string(),
                            (p % m.grid_w).to_string(),
                            fmt_f64(*h),
                            fmt_f64(*vert),
                        ]);
                    }
                }
                self.bundle.csv(
                    &format!("pca_views_layer{l}.csv"),
                    &["angle_deg", "token", "row", "col", "horizontal", "vertical"],
                    rows,
                )?;
                if self.opts.plots {
                    self.bundle.text(
                        &format!("plots/pca_layer{l}.svg"),
                        &render::rotation_svg(&views, m.grid_h, m.grid_w),
                    )?;
                }
            }
        }
        self.bundle.csv(
            "pca_variance.csv",
            &["layer", "variance_pc1", "variance_pc2", "variance_pc3", "total_variance", "degenerate"],
            variance_rows,
        )?;
        for content in [false, true] {
            let corr = self.correlations(content)?;
            let l = corr.num_layers;
            let captured = self.archive.manifest().captured_layers();
            let mut header = vec!["layer".to_string()];
            header.extend(captured.iter().map(|j| j.to_string()));
            let header: Vec<&str> = header.iter().map(String::as_str).collect();
            let rows = (0..l).map(|a| {
                let mut r = vec![captured[a].to_string()];
                r.extend((0..l).map(|b| fmt_opt(corr.get(a, b))));
                r
            });
            let name = if content { "correlations_content.csv" } else { "correlations_raw.csv" };
            self.bundle.csv(name, &header, rows)?;
        }
        Ok(())
    }

    /// Image-averaged layer-by-layer correlations over all layers, streamed
    /// one image at a time. Content factors include special tokens unless
    /// `patch_only_correlations` is set.
    fn correlations(&self, content: bool) -> Result<bfd_core::geometry::LayerCorrelationMatrix> {
        let m = self.archive.manifest();
        let (n, t, d) = (m.num_images, m.num_tokens(), m.embed_dim);
        let tokens: Vec<usize> = if self.opts.patch_only_correlations {
            (m.num_special_tokens..t).collect()
        } else {
            (0..t).collect()
        };
        let layers = m.captured_layers();
        let archive = &self.archive;
        // per layer: mean of (μ_L + μ_P) per selected token, flattened
        let subtract: Vec<Option<Vec<f64>>> = if content {
            let subset = if self.opts.patch_only_correlations {
                TokenSubset::PatchOnly
            } else {
                TokenSubset::All
            };
            self.par_map(&layers, |&l| {
                let f = factorize(&load_block(archive, l)?, subset)?;
                let mut base = Vec::with_capacity(f.num_tokens() * d);
                for j in 0..f.num_tokens() {
                    base.extend(f.mu_position.row(j).iter().zip(&f.mu_layer).map(|(p, g)| p + g));
                }
                Ok(Some(base))
            })?
        } else {
            vec![None; layers.len()]
        };
        let per_image = self.par_map(&(0..n).collect::<Vec<_>>(), |&img| {
            let mut acc = CorrelationAccumulator::new(layers.len());
            let mut flat: Vec<Vec<f64>> = Vec::with_capacity(layers.len());
            for &l in &layers {
                let raw = archive.read_elements(&activation_name(l), img * t * d, t * d)?;
                let mut v = Vec::with_capacity(tokens.len() * d);
                for &tok in &tokens {
                    v.extend(raw[tok * d..(tok + 1) * d].iter().map(|&x| x as f64));
                }
                if let Some(base) = &subtract[flat.len()] {
                    v.iter_mut().zip(base).for_each(|(x, b)| *x -= b);
                }
                flat.push(v);
            }
            let slices: Vec<&[f64]> = flat.iter().map(Vec::as_slice).collect();
            acc.add_image(&slices)?;
            Ok(acc)
        })?;
        let mut total = CorrelationAccumulator::new(layers.len());
        for acc in &per_image {
            total.merge(acc);
        }
        Ok(total.finish()?)
    }

    pub fn heatmap(&mut self) -> Result<()> {
        let cache = self.factor_cache("heatmap")?;
        let m = self.archive.manifest().clone();
        let layout = m.layout();
        let mode = self.opts.mode.unwrap_or(0);
        let sides: Vec<Side> = match self.opts.heatmap.side {
            SideArg::Query => vec![Side::Query],
            SideArg::Key => vec![Side::Key],
            SideArg::Both => vec![Side::Query, Side::Key],
        };
        let factors: Vec<Factor> = self
            .opts
            .heatmap
            .factors
            .iter()
            .map(|f| match f {
                FactorArg::Layer => Factor::Layer,
                FactorArg::Position => Factor::Position,
                FactorArg::Content => Factor::Content,
            })
            .collect();
        let mut index = Vec::new();
        let heads = self.heads();
        for l in self.layers() {
            let f = cache.load_factors(l)?;
            for b in self.bases(&[l], &heads)? {
                if mode >= b.num_modes() {
                    return Err(BfdError::Usage(format!("mode {mode} out of range ({} modes)", b.num_modes())));
                }
                for &factor in &factors {
                    for &side in &sides {
                        let images: Vec<(usize, Option<usize>)> = match (factor, self.opts.heatmap.image) {
                            (Factor::Content, Some(img)) => vec![(img, None)],
                            (Factor::Content, None) => {
                                let k = self.opts.heatmap.top_k.min(f.num_images);
                                top_activating_images(&f, &b, &layout, mode, factor, side, k)?
                                    .into_iter()
                                    .enumerate()
                                    .map(|(rank, img)| (img, Some(rank)))
                                    .collect()
                            }
                            _ => vec![(0, None)],
                        };
                        for (img, rank) in images {
                            let hm = mode_heatmap(&f, &b, &layout, mode, factor, side, img)?;
                            let mut stem = format!(
                                "heatmaps/layer{l}_head{}_mode{mode}_{}_{}",
                                b.head,
                                factor.symbol(),
                                side.name()
                            );
                            if factor == Factor::Content {
                                stem.push_str(&format!("_img{img}"));
                            }
                            let mut header = vec!["row".to_string()];
                            header.extend((0..m.grid_w).map(|c| format!("col{c}")));
                            let header: Vec<&str> = header.iter().map(String::as_str).collect();
                            let rows = (0..m.grid_h).map(|r| {
                                let mut row = vec![r.to_string()];
                                row.extend(hm.grid.row(r).iter().map(|&v| fmt_f64(v)));
                                row
                            });
                            self.bundle.csv(&format!("{stem}.csv"), &header, rows)?;
                            self.bundle.bytes(&format!("{stem}.pgm"), &render::pgm(&hm.grid))?;
                            index.push(vec![
                                l.to_string(),
                                b.head.to_string(),
                                mode.to_string(),
                                factor.symbol().to_string(),
                                side.name().to_string(),
                                if factor == Factor::Content { img.to_string() } else { String::new() },
                                rank.map_or(String::new(), |r| r.to_string()),
                                fmt_f64(hm.energy()),
                                format!("{stem}.csv"),
                            ]);
                        }
                    }
                }
            }
        }
        self.bundle.csv(
            "heatmaps/index.csv",
            &["layer", "head", "mode", "factor", "side", "image", "rank", "energy", "file"],
            index,
        )
    }

    /// Every analysis stage in order, then a fresh `run_manifest.json`.
    pub fn report(&mut self) -> Result<()> {
        self.fresh_run_manifest();
        let stages: [(&str, Stage); 7] = [
            ("factorize", |c| c.factorize().map(|_| ())),
            ("modes", Self::modes),
            ("energy", Self::energy),
            ("specialize", Self::specialize),
            ("probe", Self::probe),
            ("geometry", Self::geometry),
            ("heatmap", Self::heatmap),
        ];
        for (name, run) in stages {
            run(self)?;
            self.record_stage(name)?;
        }
        Ok(())
    }
}

fn remove_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| BfdError::io(dir, e))?;
    }
    Ok(())
}
