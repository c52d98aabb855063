//! Runtime breakdown rows and the rank/worker sweep.

use std::path::Path;

use anyhow::Result;
use celeste_mini_core::sky::Prior;
use serde::Serialize;

use crate::catalog_io::{self, SourceEntry};
use crate::pipeline::{self, ImageSource, PipelineConfig, RunMetrics};
use celeste_mini_core::sky::Image;

/// One line of a metrics CSV. Component times are means over ranks.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    /// Number of ranks.
    pub scale: usize,
    pub image_load_s: f64,
    pub ga_fetch_s: f64,
    pub sched_overhead_s: f64,
    pub imbalance_s: f64,
    pub optimize_s: f64,
    pub sources_per_second: f64,
    pub workers_per_rank: usize,
    pub sources: usize,
    pub wall_s: f64,
    pub load_imbalance: f64,
    pub remote_bytes: u64,
    pub simulated_transfer_s: f64,
}

impl MetricsRow {
    pub fn new(cfg: &PipelineConfig, m: &RunMetrics) -> Self {
        Self {
            scale: cfg.nranks,
            image_load_s: m.mean(|r| r.image_load_s),
            ga_fetch_s: m.mean(|r| r.ga_fetch_s),
            sched_overhead_s: m.mean(|r| r.sched_overhead_s),
            imbalance_s: m.imbalance_s,
            optimize_s: m.mean(|r| r.optimize_s),
            sources_per_second: m.sources_per_second,
            workers_per_rank: cfg.workers_per_rank,
            sources: m.sources,
            wall_s: m.wall_s,
            load_imbalance: m.load_imbalance,
            remote_bytes: m.remote_bytes(),
            simulated_transfer_s: m.image_transfer.simulated_transfer_time + m.catalog_transfer.simulated_transfer_time,
        }
    }
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    catalog_io::write_atomic(path, &w.into_inner()?)
}

/// Run the pipeline once per `(nranks, workers_per_rank)` in `grid`.
pub fn sweep(
    images: &[Image],
    entries: &[SourceEntry],
    prior: &Prior,
    base: &PipelineConfig,
    grid: &[(usize, usize)],
) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::with_capacity(grid.len());
    for &(nranks, workers_per_rank) in grid {
        let cfg = PipelineConfig { nranks, workers_per_rank, ..base.clone() };
        let (_, m) = pipeline::run(ImageSource::Memory(images.to_vec()), entries, prior, &cfg)?;
        log::info!("{nranks} ranks x {workers_per_rank} workers: {:.1} sources/s", m.sources_per_second);
        rows.push(MetricsRow::new(&cfg, &m));
    }
    Ok(rows)
}
