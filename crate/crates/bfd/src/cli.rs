//! Argument parsing and dispatch for the `bfd` binary.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use bfd_core::synth::{PositionPattern, SynthConfig};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::error::{BfdError, Result};
use crate::model::write_synth_archive;
use crate::pipeline::{
    Context, FactorArg, HeatmapOptions, Options, ProbeOptions, SideArg, SourceArg, StatisticArg,
};

pub const WORKERS_ENV: &str = "BFD_WORKERS";

#[derive(Debug, Parser)]
#[command(name = "bfd", version, about = "Factor and mode decomposition of transformer activations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic model archive with a planted positional code
    Synth(SynthArgs),
    /// Split activations into layer, position and content factors
    Factorize(AnalysisArgs),
    /// Singular modes and spectral diagnostics of each head
    Modes(AnalysisArgs),
    /// Per-mode energy attribution and layer shares
    Energy(AnalysisArgs),
    /// Barycentric specialization points and hex densities
    Specialize(AnalysisArgs),
    /// Linear position probes on raw activations and content
    Probe(AnalysisArgs),
    /// Positional PCA, rotation views and layer correlations
    Geometry(AnalysisArgs),
    /// Spatial heatmaps of mode projections
    Heatmap(AnalysisArgs),
    /// Run every stage
    Report(AnalysisArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub num_images: usize,
    #[arg(long, default_value_t = 4)]
    pub grid_h: usize,
    #[arg(long, default_value_t = 4)]
    pub grid_w: usize,
    #[arg(long, default_value_t = 1)]
    pub num_special: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 8)]
    pub head_dim: usize,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 1.0)]
    pub position_scale: f64,
    #[arg(long, default_value_t = 0.5)]
    pub content_scale: f64,
    #[arg(long, default_value_t = 1.0)]
    pub offset_scale: f64,
    #[arg(long, default_value_t = 0.5)]
    pub content_carryover: f64,
    /// grid-planar, fourier or random
    #[arg(long, default_value = "grid-planar")]
    pub pattern: String,
}

impl SynthArgs {
    pub fn config(&self) -> Result<SynthConfig> {
        let pattern = PositionPattern::from_name(&self.pattern)
            .ok_or_else(|| BfdError::Usage(format!("unknown pattern {:?}", self.pattern)))?;
        Ok(SynthConfig {
            num_images: self.num_images,
            grid_h: self.grid_h,
            grid_w: self.grid_w,
            num_special: self.num_special,
            dim: self.dim,
            head_dim: self.head_dim,
            num_layers: self.layers,
            num_heads: self.heads,
            position_scale: self.position_scale,
            content_scale: self.content_scale,
            global_offset_scale: self.offset_scale,
            content_carryover: self.content_carryover,
            seed: self.seed,
            pattern,
        })
    }
}

#[derive(Debug, Args)]
pub struct AnalysisArgs {
    #[arg(long)]
    pub archive: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Restrict to one layer
    #[arg(long)]
    pub layer: Option<usize>,
    /// Restrict to one head
    #[arg(long)]
    pub head: Option<usize>,
    /// Mode shown by heatmaps
    #[arg(long)]
    pub mode: Option<usize>,
    /// Probe input
    #[arg(long, value_enum, default_value_t = SourceArg::Both)]
    pub source: SourceArg,
    /// Probe shuffling seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Factorize over class/register tokens as well as patches
    #[arg(long)]
    pub include_special_tokens: bool,
    #[arg(long, default_value_t = 20)]
    pub hex_resolution: usize,
    #[arg(long, value_enum, default_value_t = StatisticArg::RawMean)]
    pub energy_statistic: StatisticArg,
    #[arg(long, default_value_t = 1e-2)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 8192)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    /// Hold out this fraction of tokens for probe evaluation
    #[arg(long)]
    pub holdout: Option<f64>,
    /// Heatmap factors (repeatable)
    #[arg(long = "factor", value_enum)]
    pub factors: Vec<FactorArg>,
    #[arg(long, value_enum, default_value_t = SideArg::Both)]
    pub side: SideArg,
    /// Content heatmap for this image instead of the top-k
    #[arg(long)]
    pub image: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub top_k: usize,
    /// Content correlations over patch tokens only
    #[arg(long)]
    pub patch_only_correlations: bool,
    /// Also write SVG plots
    #[arg(long)]
    pub plots: bool,
    #[arg(long, env = WORKERS_ENV, default_value_t = 1)]
    pub workers: usize,
}

impl AnalysisArgs {
    pub fn options(&self) -> Options {
        let defaults = HeatmapOptions::default();
        Options {
            include_special_tokens: self.include_special_tokens,
            layer: self.layer,
            head: self.head,
            mode: self.mode,
            hex_resolution: self.hex_resolution,
            energy_statistic: self.energy_statistic,
            patch_only_correlations: self.patch_only_correlations,
            plots: self.plots,
            workers: self.workers,
            probe: ProbeOptions {
                source: self.source,
                seed: self.seed,
                learning_rate: self.learning_rate,
                batch_size: self.batch_size,
                epochs: self.epochs,
                holdout: self.holdout,
            },
            heatmap: HeatmapOptions {
                factors: if self.factors.is_empty() { defaults.factors } else { self.factors.clone() },
                side: self.side,
                image: self.image,
                top_k: self.top_k,
            },
        }
    }
}

fn analysis(name: &str, args: &AnalysisArgs) -> Result<()> {
    let mut ctx = Context::new(&args.archive, args.archive.display().to_string(), &args.out, args.options())?;
    match name {
        "factorize" => ctx.factorize().map(|_| ())?,
        "modes" => ctx.modes()?,
        "energy" => ctx.energy()?,
        "specialize" => ctx.specialize()?,
        "probe" => ctx.probe()?,
        "geometry" => ctx.geometry()?,
        "heatmap" => ctx.heatmap()?,
        "report" => return ctx.report(),
        _ => unreachable!("unknown stage {name}"),
    }
    ctx.record_stage(name)
}

pub fn execute(cli: &Cli) -> Result<()> {
    let (name, args) = match &cli.command {
        Command::Synth(s) => {
            write_synth_archive(&s.config()?, &s.out)?;
            return Ok(());
        }
        Command::Factorize(a) => ("factorize", a),
        Command::Modes(a) => ("modes", a),
        Command::Energy(a) => ("energy", a),
        Command::Specialize(a) => ("specialize", a),
        Command::Probe(a) => ("probe", a),
        Command::Geometry(a) => ("geometry", a),
        Command::Heatmap(a) => ("heatmap", a),
        Command::Report(a) => ("report", a),
    };
    analysis(name, args)
}

fn emit_error(err: &BfdError) -> i32 {
    let line = serde_json::to_string(&err.record()).unwrap_or_else(|_| json!({"error": "other"}).to_string());
    let _ = writeln!(std::io::stderr(), "{line}");
    err.exit_code()
}

/// Parse `args` (program name first), run, and return the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            return emit_error(&BfdError::Usage(e.render().to_string().trim_end().to_string()));
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => emit_error(&e),
    }
}
