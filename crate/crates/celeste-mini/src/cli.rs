//! Command-line interface: `synth`, `infer`, `score` and `bench`.
//!
//! Settings come from built-in defaults, then an optional `--config` file of
//! `key = value` lines, then flags; later sources win.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use celeste_mini_core::priors_fit::fit_priors;
use celeste_mini_core::sky::{ClusterConfig, Prior, BAND_COUNT};
use celeste_mini_core::validate::{match_sources, score, ScoreConfig, ScoreReport};

use crate::bench::{self, MetricsRow};
use crate::catalog_io::{self, SourceEntry};
use crate::config::{self, KeyValues};
use crate::pipeline::{self, ImageSource, Mode, PipelineConfig, TaskOrder};
use crate::survey::{self, SurveyConfig};

/// Environment variable capping workers per rank.
pub const THREADS_ENV: &str = "CELESTE_MINI_THREADS";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const PRIOR_FILE: &str = "prior.txt";
pub const SCORE_FILE: &str = "score.csv";

#[derive(Parser, Debug)]
#[command(name = "celeste-mini", version, about = "Variational inference for astronomical catalogs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic survey: FITS images plus truth and initial catalogs.
    Synth(SynthArgs),
    /// Fit every catalog source against the images in a directory.
    Infer(InferArgs),
    /// Compare predictions with the truth.
    Score(ScoreArgs),
    /// Sweep ranks and workers over a synthetic survey and record throughput.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    sources: Option<usize>,
    /// Number of fields; each is written as one file per band.
    #[arg(long)]
    images: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum ModeArg {
    Optimize,
    SimulatedDurations,
}

#[derive(Args, Debug, Default)]
struct RunFlags {
    #[arg(long)]
    fanout: Option<usize>,
    /// Images cached per rank; 0 means unbounded.
    #[arg(long)]
    cache: Option<usize>,
    /// Neighbor search radius, arcsec.
    #[arg(long)]
    neighbor_radius: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

#[derive(Args, Debug)]
struct InferArgs {
    /// Directory holding the FITS images.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Initial catalog; defaults to `catalog.csv` in the input directory.
    #[arg(long)]
    catalog: Option<PathBuf>,
    /// Prior file; without it the prior is fitted to the initial catalog.
    #[arg(long)]
    prior: Option<PathBuf>,
    #[arg(long)]
    ranks: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[command(flatten)]
    run: RunFlags,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    /// Prediction CSV or a directory holding `predictions.csv`.
    #[arg(long)]
    pred: PathBuf,
    /// Truth CSV or a directory holding `truth.csv`.
    #[arg(long)]
    truth: PathBuf,
    /// Report path; defaults to `score.csv` next to the predictions.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Matching radius, pixels.
    #[arg(long, default_value_t = celeste_mini_core::validate::DEFAULT_MAX_DIST_PX)]
    max_dist: f64,
    /// Arcsec per pixel used to express distances in pixels.
    #[arg(long, default_value_t = celeste_mini_core::validate::DEFAULT_PIXEL_SCALE)]
    pixel_scale: f64,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Comma-separated rank counts.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    ranks: Vec<usize>,
    /// Comma-separated workers-per-rank values.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    workers: Vec<usize>,
    #[arg(long)]
    sources: Option<usize>,
    #[arg(long)]
    images: Option<usize>,
    #[arg(long, default_value = "bench.csv")]
    out: PathBuf,
    #[command(flatten)]
    run: RunFlags,
    #[arg(long)]
    config: Option<PathBuf>,
}

/// A failure the user can fix by changing the command line.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Parse `argv` and run the command; returns the process exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Infer(a) => infer(a),
        Command::Score(a) => score_cmd(a),
        Command::Bench(a) => bench_cmd(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}\n\nRun `celeste-mini <command> --help` for usage.");
            2
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<KeyValues> {
    match path {
        None => Ok(KeyValues::default()),
        Some(p) if !p.is_file() => Err(usage(format!("config file {} not found", p.display()))),
        Some(p) => KeyValues::read(p),
    }
}

/// Survey settings from config keys.
fn survey_from(kv: &mut KeyValues, cfg: &mut SurveyConfig) -> Result<()> {
    kv.apply("sources", &mut cfg.sources)?;
    kv.apply("images", &mut cfg.fields)?;
    kv.apply("width", &mut cfg.width)?;
    kv.apply("height", &mut cfg.height)?;
    kv.apply("pixel_scale", &mut cfg.pixel_scale_arcsec)?;
    kv.apply("psf_sigma", &mut cfg.psf_sigma_px)?;
    kv.apply("seed", &mut cfg.seed)?;
    if let Some(v) = kv.take_list::<f64>("sky")? {
        cfg.sky = match v.len() {
            1 => [v[0]; BAND_COUNT],
            BAND_COUNT => v.try_into().expect("length checked"),
            n => bail!("sky: expected 1 or {BAND_COUNT} values, got {n}"),
        };
    }
    let mut c = ClusterConfig::default();
    let mut sigma_arcsec = 0.0;
    kv.apply("cluster_weight", &mut c.weight)?;
    kv.apply("cluster_count", &mut c.count)?;
    kv.apply("cluster_sigma", &mut sigma_arcsec)?;
    c.sigma = sigma_arcsec / celeste_mini_core::sky::ARCSEC_PER_DEGREE;
    cfg.clustering = c;
    kv.apply("position_noise", &mut cfg.init_noise.position_px)?;
    kv.apply("flux_noise", &mut cfg.init_noise.log_flux)?;
    kv.apply("color_noise", &mut cfg.init_noise.color)?;
    cfg.prior = config::prior_from(kv)?;
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut kv = load_config(&a.config)?;
    let mut cfg = SurveyConfig::default();
    survey_from(&mut kv, &mut cfg)?;
    kv.finish()?;
    let set = |slot: &mut usize, v: Option<usize>| v.into_iter().for_each(|v| *slot = v);
    set(&mut cfg.sources, a.sources);
    set(&mut cfg.fields, a.images);
    set(&mut cfg.width, a.width);
    set(&mut cfg.height, a.height);
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if cfg.fields == 0 || cfg.width == 0 || cfg.height == 0 {
        return Err(usage("--images, --width and --height must be at least 1"));
    }
    let s = survey::generate(&cfg)?;
    let paths = survey::write_survey(&s, &a.out)?;
    println!("wrote {} images and {} sources to {}", paths.len(), s.truth.len(), a.out.display());
    Ok(())
}

/// Pipeline settings: defaults, then config keys, then flags.
fn pipeline_config(kv: &mut KeyValues, flags: &RunFlags, workers: Option<usize>) -> Result<PipelineConfig> {
    let mut c = PipelineConfig::default();
    kv.apply("ranks", &mut c.nranks)?;
    kv.apply("workers", &mut c.workers_per_rank)?;
    kv.apply("fanout", &mut c.sched.fanout)?;
    kv.apply("drain_fraction", &mut c.sched.drain_fraction)?;
    kv.apply("min_batch", &mut c.sched.min_batch)?;
    kv.apply("max_batch", &mut c.sched.max_batch)?;
    kv.apply("latency", &mut c.fabric.latency)?;
    kv.apply("bandwidth", &mut c.fabric.bandwidth)?;
    if let Some(n) = kv.take::<usize>("cache_capacity")? {
        c.cache_capacity = (n > 0).then_some(n);
    }
    if let Some(r) = kv.take::<f64>("neighbor_radius")? {
        c.neighbor_radius_arcsec = Some(r);
    }
    kv.apply("max_iters", &mut c.optimizer.max_iters)?;
    kv.apply("grad_tol", &mut c.optimizer.grad_tol)?;
    kv.apply("seed", &mut c.seed)?;
    let (mut median_s, mut sigma) = (1e-3, 1.0);
    kv.apply("median_duration", &mut median_s)?;
    kv.apply("duration_sigma", &mut sigma)?;
    if let Some(m) = kv.take::<String>("mode")? {
        c.mode = match m.as_str() {
            "optimize" => Mode::Optimize,
            "simulated-durations" => Mode::SimulatedDurations { median_s, sigma },
            other => bail!("mode: unknown value {other:?}"),
        };
    }
    if let Some(o) = kv.take::<String>("order")? {
        c.order = match o.as_str() {
            "spatial" => TaskOrder::Spatial,
            "random" => TaskOrder::Random(c.seed),
            other => bail!("order: unknown value {other:?}"),
        };
    }
    if let Some(w) = workers {
        c.workers_per_rank = w;
    }
    if let Some(f) = flags.fanout {
        c.sched.fanout = f;
    }
    if let Some(n) = flags.cache {
        c.cache_capacity = (n > 0).then_some(n);
    }
    if let Some(r) = flags.neighbor_radius {
        c.neighbor_radius_arcsec = Some(r);
    }
    if let Some(m) = flags.max_iters {
        c.optimizer.max_iters = m;
    }
    if let Some(s) = flags.seed {
        c.seed = s;
    }
    match flags.mode {
        Some(ModeArg::Optimize) => c.mode = Mode::Optimize,
        Some(ModeArg::SimulatedDurations) => c.mode = Mode::SimulatedDurations { median_s, sigma },
        None => {}
    }
    apply_thread_cap(&mut c)?;
    c.validate().map_err(|e| usage(format!("{e:#}")))?;
    Ok(c)
}

fn apply_thread_cap(c: &mut PipelineConfig) -> Result<()> {
    if let Some(v) = std::env::var_os(THREADS_ENV) {
        let cap: usize = v
            .to_str()
            .and_then(|s| s.trim().parse().ok())
            .filter(|&n| n >= 1)
            .ok_or_else(|| usage(format!("{THREADS_ENV} must be a positive integer")))?;
        c.workers_per_rank = c.workers_per_rank.min(cap);
    }
    Ok(())
}

fn infer(a: InferArgs) -> Result<()> {
    if !a.input.is_dir() {
        return Err(usage(format!("input directory {} does not exist", a.input.display())));
    }
    let catalog_path = a.catalog.clone().unwrap_or_else(|| a.input.join(survey::INITIAL_FILE));
    if !catalog_path.is_file() {
        return Err(usage(format!("catalog {} not found (use --catalog)", catalog_path.display())));
    }
    let mut kv = load_config(&a.config)?;
    let mut cfg = pipeline_config(&mut kv, &a.run, a.workers)?;
    kv.finish()?;
    if let Some(r) = a.ranks {
        cfg.nranks = r;
        cfg.validate().map_err(|e| usage(format!("{e:#}")))?;
    }
    let entries = catalog_io::read_catalog(&catalog_path)?;
    let prior = match &a.prior {
        Some(p) => config::read_prior(p)?,
        None => {
            let fit = fit_priors(&entries.iter().map(|e| e.params).collect::<Vec<_>>(), &Prior::default());
            for w in &fit.warnings {
                log::warn!("prior fit: {w:?}");
            }
            fit.prior
        }
    };
    let images = survey::list_images(&a.input)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    catalog_io::write_atomic(&a.out.join(PRIOR_FILE), config::format_prior(&prior).as_bytes())?;
    let metrics_path = a.out.join(METRICS_FILE);
    match pipeline::run(ImageSource::Files(images), &entries, &prior, &cfg) {
        Ok((results, metrics)) => {
            let rows: Vec<_> = results.iter().map(|r| r.prediction_row()).collect();
            catalog_io::write_predictions(&a.out.join(PREDICTIONS_FILE), &rows)?;
            bench::write_metrics(&metrics_path, &[MetricsRow::new(&cfg, &metrics)])?;
            let converged = results.iter().filter(|r| r.status == pipeline::SourceStatus::Converged).count();
            println!(
                "fitted {} sources ({converged} converged) in {:.2}s, {:.2} sources/s",
                results.len(),
                metrics.wall_s,
                metrics.sources_per_second
            );
            Ok(())
        }
        Err(e) => {
            // Keep whatever was measured.
            bench::write_metrics(&metrics_path, &[MetricsRow::new(&cfg, &e.metrics)])?;
            Err(e.error)
        }
    }
}

fn resolve(path: &Path, file: &str) -> PathBuf {
    if path.is_dir() {
        path.join(file)
    } else {
        path.to_path_buf()
    }
}

fn format_report(r: &ScoreReport) -> String {
    let mut s = format!("{:<14}{:>12}\n", "metric", "error");
    for (name, v) in r.rows() {
        match v {
            Some(v) => s += &format!("{name:<14}{v:>12.4}\n"),
            None => s += &format!("{name:<14}{:>12}\n", "-"),
        }
    }
    s += &format!("matched {}, unmatched predictions {}, unmatched truth {}\n", r.matched, r.unmatched_pred, r.unmatched_truth);
    s
}

fn report_csv(r: &ScoreReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["metric", "value"])?;
    for (name, v) in r.rows() {
        w.write_record([name.to_string(), v.map(|x| x.to_string()).unwrap_or_default()])?;
    }
    w.write_record(["matched".to_string(), r.matched.to_string()])?;
    w.write_record(["unmatched_pred".to_string(), r.unmatched_pred.to_string()])?;
    w.write_record(["unmatched_truth".to_string(), r.unmatched_truth.to_string()])?;
    Ok(w.into_inner()?)
}

fn score_cmd(a: ScoreArgs) -> Result<()> {
    let pred_path = resolve(&a.pred, PREDICTIONS_FILE);
    let truth_path = resolve(&a.truth, survey::TRUTH_FILE);
    for p in [&pred_path, &truth_path] {
        if !p.is_file() {
            return Err(usage(format!("{} not found", p.display())));
        }
    }
    if !(a.max_dist > 0.0 && a.pixel_scale > 0.0) {
        return Err(usage("--max-dist and --pixel-scale must be positive"));
    }
    let pred: Vec<SourceEntry> = catalog_io::read_catalog(&pred_path)?;
    let truth: Vec<SourceEntry> = catalog_io::read_catalog(&truth_path)?;
    let cfg = ScoreConfig { max_dist_px: a.max_dist, pixel_scale_arcsec: a.pixel_scale, ..ScoreConfig::default() };
    let pp: Vec<_> = pred.iter().map(|e| e.params).collect();
    let tp: Vec<_> = truth.iter().map(|e| e.params).collect();
    let pos = |v: &[celeste_mini_core::sky::SourceParams]| v.iter().map(|s| s.position).collect::<Vec<_>>();
    let pairing = match_sources(&pos(&pp), &pos(&tp), cfg.max_dist_px, cfg.pixel_scale_arcsec);
    let report = score(&pp, &tp, &pairing, &cfg);
    let out = a.out.unwrap_or_else(|| pred_path.parent().unwrap_or(Path::new(".")).join(SCORE_FILE));
    catalog_io::write_atomic(&out, &report_csv(&report)?)?;
    print!("{}", format_report(&report));
    Ok(())
}

fn bench_cmd(a: BenchArgs) -> Result<()> {
    if a.ranks.is_empty() || a.ranks.contains(&0) || a.workers.is_empty() || a.workers.contains(&0) {
        return Err(usage("--ranks and --workers need positive values"));
    }
    let mut kv = load_config(&a.config)?;
    let mut flags = a.run;
    flags.mode = Some(flags.mode.unwrap_or(ModeArg::SimulatedDurations));
    let mut survey_cfg = SurveyConfig {
        sources: 2000,
        fields: 16,
        width: 128,
        height: 128,
        clustering: ClusterConfig { weight: 0.7, count: 20, sigma: 15.0 / 3600.0 },
        ..SurveyConfig::default()
    };
    let cluster_default = survey_cfg.clustering;
    let mut base = pipeline_config(&mut kv, &flags, None)?;
    survey_from(&mut kv, &mut survey_cfg)?;
    kv.finish()?;
    if survey_cfg.clustering == ClusterConfig::default() {
        survey_cfg.clustering = cluster_default;
    }
    survey_cfg.seed = base.seed;
    if let Some(n) = a.sources {
        survey_cfg.sources = n;
    }
    if let Some(n) = a.images {
        survey_cfg.fields = n;
    }
    let s = survey::generate(&survey_cfg)?;
    let grid: Vec<(usize, usize)> =
        a.ranks.iter().flat_map(|&r| a.workers.iter().map(move |&w| (r, w))).collect();
    let cap = {
        let mut c = PipelineConfig { workers_per_rank: usize::MAX, ..base.clone() };
        apply_thread_cap(&mut c)?;
        c.workers_per_rank
    };
    base.workers_per_rank = 1;
    let grid: Vec<(usize, usize)> = grid.into_iter().map(|(r, w)| (r, w.min(cap))).collect();
    let prior = fit_priors(&s.initial.iter().map(|e| e.params).collect::<Vec<_>>(), &Prior::default()).prior;
    let rows = bench::sweep(&s.images, &s.initial, &prior, &base, &grid)?;
    bench::write_metrics(&a.out, &rows)?;
    for r in &rows {
        println!("ranks {:>4} workers {:>3}: {:>12.1} sources/s", r.scale, r.workers_per_rank, r.sources_per_second);
    }
    Ok(())
}

/// Shorthand for tests and embedding: run with string arguments.
pub fn run_args(args: &[&str]) -> i32 {
    run_command(std::iter::once("celeste-mini").chain(args.iter().copied()))
}
