//! The three-phase run: images into one global array, the spatially ordered
//! catalog into another, then scheduled per-source optimization.
//!
//! Ranks are simulated inside the process. In [`Mode::Optimize`] every rank
//! runs `workers_per_rank` threads that fit sources for real. In
//! [`Mode::SimulatedDurations`] a deterministic discrete-event loop replaces
//! each fit with a seeded lognormal duration while still moving the same data
//! through the global arrays, caches and scheduler.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use anyhow::{anyhow, bail, ensure, Context, Result};
use celeste_mini_core::elbo::{SourceContext, VariationalParams};
use celeste_mini_core::inference::{self, brightness_sd, point_estimate};
use celeste_mini_core::schedule::SchedConfig;
use celeste_mini_core::sky::{Image, ImageMetadata, Prior, ARCSEC_PER_DEGREE};
use celeste_mini_core::spatial::{morton_keys, spatial_order, NeighborIndex};
use celeste_mini_core::trust_region::{TrConfig, TrStatus};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::cache::SharedLru;
use crate::catalog_io::{PredictionRow, SourceEntry};
use crate::fits;
use crate::global_array::{block_layout, FabricModel, GlobalArray, TransferStats};
use crate::records::{self, CatalogEntry, CATALOG_RECORD_SIZE};
use crate::scheduler::{Dtree, Grant};

/// How phase 3 spends its time per source.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    Optimize,
    /// Each source takes `median_s * exp(sigma * z)` simulated seconds,
    /// `z ~ N(0, 1)` seeded by the run seed and the source id.
    SimulatedDurations { median_s: f64, sigma: f64 },
}

impl Mode {
    pub fn simulated() -> Self {
        Mode::SimulatedDurations { median_s: 1e-3, sigma: 1.0 }
    }
}

/// Order of the catalog global array, which is also the task order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TaskOrder {
    /// Morton (Z-order) over the catalog's bounding box.
    Spatial,
    /// A seeded random permutation, as a baseline.
    Random(u64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub nranks: usize,
    pub workers_per_rank: usize,
    /// `total` is ignored; it is set from the catalog.
    pub sched: SchedConfig,
    pub fabric: FabricModel,
    /// Images cached per rank; `None` is unbounded.
    pub cache_capacity: Option<usize>,
    /// Catalog entries cached per rank; `None` is unbounded.
    pub entry_cache_capacity: Option<usize>,
    /// Neighbor search radius; `None` derives it from the catalog.
    pub neighbor_radius_arcsec: Option<f64>,
    pub optimizer: TrConfig,
    pub mode: Mode,
    pub order: TaskOrder,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            nranks: 1,
            workers_per_rank: 1,
            sched: SchedConfig::default(),
            fabric: FabricModel::default(),
            cache_capacity: Some(16),
            entry_cache_capacity: Some(4096),
            neighbor_radius_arcsec: None,
            optimizer: TrConfig::default(),
            mode: Mode::Optimize,
            order: TaskOrder::Spatial,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.nranks >= 1, "nranks must be at least 1");
        ensure!(self.workers_per_rank >= 1, "workers_per_rank must be at least 1");
        ensure!(self.cache_capacity != Some(0), "cache_capacity must be at least 1");
        ensure!(self.entry_cache_capacity != Some(0), "entry cache capacity must be at least 1");
        if let Some(r) = self.neighbor_radius_arcsec {
            ensure!(r > 0.0 && r.is_finite(), "neighbor radius must be positive");
        }
        if let Mode::SimulatedDurations { median_s, sigma } = self.mode {
            ensure!(median_s > 0.0 && sigma >= 0.0, "simulated durations need median > 0 and sigma >= 0");
        }
        self.fabric.validate().map_err(|e| anyhow!(e))?;
        self.sched.validate()?;
        self.optimizer.validate()?;
        Ok(())
    }
}

pub enum ImageSource {
    Files(Vec<PathBuf>),
    Memory(Vec<Image>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceStatus {
    Converged,
    MaxIters,
    EvalFailure,
    /// The objective could not be set up or the optimizer rejected it.
    Failed,
    /// No image covers the source.
    NoImages,
    Simulated,
}

impl SourceStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SourceStatus::Converged => "converged",
            SourceStatus::MaxIters => "max_iters",
            SourceStatus::EvalFailure => "eval_failure",
            SourceStatus::Failed => "failed",
            SourceStatus::NoImages => "no_images",
            SourceStatus::Simulated => "simulated",
        }
    }
}

/// One output record. Unfitted sources keep their initial parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceResult {
    pub id: u64,
    pub status: SourceStatus,
    pub iterations: usize,
    pub params: VariationalParams,
    /// Final ELBO, NaN when not fitted.
    pub elbo: f64,
}

impl SourceResult {
    pub fn prediction_row(&self) -> PredictionRow {
        let e = point_estimate(&self.params);
        let (flux_sd, color_sd) = brightness_sd(&self.params);
        PredictionRow {
            id: self.id,
            p_star: self.params.p_star,
            ref_flux: e.ref_flux,
            c1: e.colors[0],
            c2: e.colors[1],
            c3: e.colors[2],
            c4: e.colors[3],
            ra: e.position[0],
            dec: e.position[1],
            profile_mix: e.shape.profile_mix,
            scale: e.shape.scale,
            axis_ratio: e.shape.axis_ratio,
            angle: e.shape.angle,
            ref_flux_sd: flux_sd,
            c1_sd: color_sd[0],
            c2_sd: color_sd[1],
            c3_sd: color_sd[2],
            c4_sd: color_sd[3],
            status: self.status.as_str().to_string(),
            iterations: self.iterations,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RankMetrics {
    pub image_load_s: f64,
    pub catalog_load_s: f64,
    pub ga_fetch_s: f64,
    pub sched_overhead_s: f64,
    pub optimize_s: f64,
    /// Sum of the busy time of the rank's workers.
    pub busy_s: f64,
    pub tasks: usize,
    pub cache_hits: u64,
    pub cache_misses: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMetrics {
    pub ranks: Vec<RankMetrics>,
    pub worker_busy_s: Vec<f64>,
    /// Wall-clock seconds of the whole run, or the simulated makespan of
    /// phase 3 in simulated mode.
    pub wall_s: f64,
    pub sources: usize,
    pub sources_per_second: f64,
    /// (max - mean) / mean of per-rank busy time.
    pub load_imbalance: f64,
    /// (max - mean) / mean of per-worker busy time.
    pub worker_imbalance: f64,
    /// max - mean of per-rank busy time, seconds.
    pub imbalance_s: f64,
    pub image_transfer: TransferStats,
    pub catalog_transfer: TransferStats,
    pub simulated: bool,
}

impl RunMetrics {
    /// Mean over ranks of one component.
    pub fn mean(&self, f: impl Fn(&RankMetrics) -> f64) -> f64 {
        if self.ranks.is_empty() {
            return 0.0;
        }
        self.ranks.iter().map(f).sum::<f64>() / self.ranks.len() as f64
    }

    pub fn remote_bytes(&self) -> u64 {
        self.image_transfer.bytes_fetched_remote + self.catalog_transfer.bytes_fetched_remote
    }
}

/// (max - mean, (max - mean) / mean); zeros when nothing ran.
fn imbalance(busy: &[f64]) -> (f64, f64) {
    if busy.is_empty() {
        return (0.0, 0.0);
    }
    let mean = busy.iter().sum::<f64>() / busy.len() as f64;
    let max = busy.iter().copied().fold(0.0, f64::max);
    if mean > 0.0 {
        (max - mean, (max - mean) / mean)
    } else {
        (0.0, 0.0)
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{error:#}")]
pub struct RunError {
    pub error: anyhow::Error,
    /// Whatever was measured before the failure.
    pub metrics: Box<RunMetrics>,
}

/// Phase 1: each rank loads its block of images and stores them locally.
/// Returns the array and the replicated image directory.
pub fn phase_load_images(
    source: ImageSource,
    cfg: &PipelineConfig,
    metrics: &mut RunMetrics,
) -> Result<(GlobalArray, Vec<ImageMetadata>)> {
    let blocks = match &source {
        ImageSource::Files(p) => block_layout(p.len(), cfg.nranks),
        ImageSource::Memory(v) => block_layout(v.len(), cfg.nranks),
    };
    let mut per_rank: Vec<Vec<Image>> = Vec::with_capacity(cfg.nranks);
    let mut times = vec![0.0; cfg.nranks];
    match source {
        ImageSource::Files(paths) => {
            let loaded: Vec<Result<(Vec<Image>, f64)>> = std::thread::scope(|s| {
                let handles: Vec<_> = blocks
                    .iter()
                    .map(|b| {
                        let paths = &paths[b.clone()];
                        s.spawn(move || {
                            let t = Instant::now();
                            let imgs = paths.iter().map(|p| fits::load_image(p)).collect::<Result<Vec<_>>>()?;
                            Ok((imgs, t.elapsed().as_secs_f64()))
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("loader thread panicked")).collect()
            });
            for (k, r) in loaded.into_iter().enumerate() {
                let (imgs, t) = r?;
                times[k] = t;
                per_rank.push(imgs);
            }
        }
        ImageSource::Memory(images) => {
            let mut it = images.into_iter();
            for b in &blocks {
                per_rank.push(it.by_ref().take(b.len()).collect());
            }
        }
    }
    let n: usize = per_rank.iter().map(Vec::len).sum();
    let record_size = per_rank.iter().flatten().map(records::image_record_len).max().unwrap_or(1);
    let ga = GlobalArray::create(n, record_size, cfg.nranks, cfg.fabric)?;
    let mut directory = Vec::with_capacity(n);
    for (k, imgs) in per_rank.iter().enumerate() {
        let t = Instant::now();
        let mut bytes = Vec::with_capacity(imgs.len() * record_size);
        for img in imgs {
            bytes.extend_from_slice(&records::encode_image(img, record_size));
            directory.push(img.meta.clone());
        }
        ga.put(blocks[k].clone(), &bytes, k)?;
        times[k] += t.elapsed().as_secs_f64();
    }
    for (m, t) in metrics.ranks.iter_mut().zip(times) {
        m.image_load_s = t;
    }
    Ok((ga, directory))
}

/// Task order over `entries` and each entry's Morton key.
pub fn catalog_order(entries: &[SourceEntry], order: TaskOrder) -> (Vec<usize>, Vec<u64>) {
    let positions: Vec<[f64; 2]> = entries.iter().map(|e| e.params.position).collect();
    let keys = morton_keys(&positions);
    let perm = match order {
        TaskOrder::Spatial => spatial_order(&positions),
        TaskOrder::Random(seed) => {
            let mut p: Vec<usize> = (0..entries.len()).collect();
            p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            p
        }
    };
    (perm, keys)
}

/// Phase 2: the catalog in task order, each rank storing its own block.
/// Returns the array and the permutation (`perm[slot]` is an index into
/// `entries`).
pub fn phase_load_catalog(
    entries: &[SourceEntry],
    cfg: &PipelineConfig,
    metrics: &mut RunMetrics,
) -> Result<(GlobalArray, Vec<usize>)> {
    let (perm, keys) = catalog_order(entries, cfg.order);
    let ga = GlobalArray::create(entries.len(), CATALOG_RECORD_SIZE, cfg.nranks, cfg.fabric)?;
    for (k, block) in block_layout(entries.len(), cfg.nranks).into_iter().enumerate() {
        let t = Instant::now();
        let mut bytes = Vec::with_capacity(block.len() * CATALOG_RECORD_SIZE);
        for &i in &perm[block.clone()] {
            let e = CatalogEntry { id: entries[i].id, sort_key: keys[i], params: entries[i].params };
            bytes.extend_from_slice(&records::encode_entry(&e));
        }
        ga.put(block, &bytes, k)?;
        metrics.ranks[k].catalog_load_s = t.elapsed().as_secs_f64();
    }
    Ok((ga, perm))
}

/// Patch radius used for an entry, arcsec: four combined sigmas.
fn extent_arcsec(e: &SourceEntry, psf_arcsec: f64) -> f64 {
    let scale = if e.params.is_star { 0.5 } else { e.params.shape.scale };
    celeste_mini_core::elbo::PATCH_SIGMAS * (scale * scale + psf_arcsec * psf_arcsec).sqrt()
}

/// Widest PSF in the directory, arcsec.
fn max_psf_arcsec(directory: &[ImageMetadata]) -> f64 {
    directory.iter().map(|m| m.psf.max_sigma() * m.wcs.pixel_scale_arcsec()).fold(0.0, f64::max)
}

/// Default neighbor radius: four times the largest patch extent.
pub fn default_neighbor_radius(entries: &[SourceEntry], directory: &[ImageMetadata]) -> f64 {
    let psf = max_psf_arcsec(directory);
    4.0 * entries.iter().map(|e| extent_arcsec(e, psf)).fold(0.0, f64::max)
}

/// Everything workers share during phase 3.
struct Shared<'a> {
    cfg: &'a PipelineConfig,
    prior: &'a Prior,
    images: &'a GlobalArray,
    catalog: &'a GlobalArray,
    directory: &'a [ImageMetadata],
    index: &'a NeighborIndex,
    radius_deg: f64,
    /// Replicated per slot, like the positions in `index`.
    positions: &'a [[f64; 2]],
    extents_deg: &'a [f64],
    image_caches: Vec<SharedLru<usize, Image>>,
    entry_caches: Vec<SharedLru<usize, CatalogEntry>>,
    dtree: Dtree,
    output: Vec<OnceLock<SourceResult>>,
}

#[derive(Clone, Copy, Debug, Default)]
struct Tally {
    fetch_s: f64,
    sched_s: f64,
    optimize_s: f64,
    tasks: usize,
}

impl Tally {
    fn busy(&self) -> f64 {
        self.fetch_s + self.sched_s + self.optimize_s
    }
}

/// Data one task needs, with the simulated fabric time of fetching it.
struct TaskData {
    entry: Arc<CatalogEntry>,
    neighbors: Vec<Arc<CatalogEntry>>,
    images: Vec<Arc<Image>>,
    simulated_s: f64,
}

impl Shared<'_> {
    fn entry(&self, slot: usize, rank: usize, sim: &mut f64) -> Result<Arc<CatalogEntry>> {
        let (e, _) = self.entry_caches[rank].get_or_fetch(slot, || -> Result<CatalogEntry> {
            let (bytes, cost) = self.catalog.get_costed(slot..slot + 1, rank)?;
            *sim += cost;
            Ok(records::decode_entry(&bytes)?)
        })?;
        Ok(e)
    }

    fn image(&self, slot: usize, rank: usize, sim: &mut f64) -> Result<Arc<Image>> {
        let (img, _) = self.image_caches[rank].get_or_fetch(slot, || -> Result<Image> {
            let (bytes, cost) = self.images.get_costed(slot..slot + 1, rank)?;
            *sim += cost;
            Ok(records::decode_image(&bytes)?)
        })?;
        Ok(img)
    }

    fn fetch(&self, slot: usize, rank: usize) -> Result<TaskData> {
        let mut sim = 0.0;
        let entry = self.entry(slot, rank, &mut sim)?;
        let neighbors = self
            .index
            .neighbors(slot, self.radius_deg)
            .into_iter()
            // Only sources whose footprint reaches the target's patch.
            .filter(|&j| {
                let (a, b) = (self.positions[slot], self.positions[j]);
                let reach = self.extents_deg[slot] + self.extents_deg[j];
                (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) <= reach * reach
            })
            .map(|j| self.entry(j, rank, &mut sim))
            .collect::<Result<Vec<_>>>()?;
        let images = (0..self.directory.len())
            .filter(|&j| self.directory[j].contains_world(entry.params.position))
            .map(|j| self.image(j, rank, &mut sim))
            .collect::<Result<Vec<_>>>()?;
        Ok(TaskData { entry, neighbors, images, simulated_s: sim })
    }

    fn optimize(&self, data: &TaskData) -> SourceResult {
        let e = &data.entry;
        let initial = inference::initial_params(&e.params);
        let unfitted = |status| SourceResult { id: e.id, status, iterations: 0, params: initial, elbo: f64::NAN };
        if data.images.is_empty() {
            return unfitted(SourceStatus::NoImages);
        }
        let refs: Vec<&Image> = data.images.iter().map(|a| a.as_ref()).collect();
        let neighbors = data.neighbors.iter().map(|n| n.params).collect();
        let ctx = match SourceContext::new(initial, neighbors, &refs, *self.prior) {
            Ok(c) => c,
            Err(err) => {
                log::warn!("source {}: {err}", e.id);
                return unfitted(SourceStatus::Failed);
            }
        };
        if ctx.patches.is_empty() {
            return unfitted(SourceStatus::NoImages);
        }
        match inference::fit_source(&ctx, &self.cfg.optimizer) {
            Ok(fit) => SourceResult {
                id: e.id,
                status: match fit.status {
                    TrStatus::Converged => SourceStatus::Converged,
                    TrStatus::MaxIters => SourceStatus::MaxIters,
                    TrStatus::EvalFailure => SourceStatus::EvalFailure,
                },
                iterations: fit.iterations,
                params: fit.params,
                elbo: fit.value,
            },
            Err(err) => {
                log::warn!("source {}: {err}", e.id);
                unfitted(SourceStatus::Failed)
            }
        }
    }

    fn store(&self, slot: usize, r: SourceResult) -> Result<()> {
        self.output[slot].set(r).map_err(|_| anyhow!("task {slot} was issued twice"))
    }

    /// Real-mode worker: pull batches until Done or `stop`.
    fn work(&self, rank: usize, stop: &AtomicBool) -> Result<Tally> {
        let mut t = Tally::default();
        loop {
            if stop.load(Ordering::Relaxed) {
                return Ok(t);
            }
            let t0 = Instant::now();
            let grant = self.dtree.next_batch(rank);
            t.sched_s += t0.elapsed().as_secs_f64();
            let Grant::Batch(b) = grant else {
                return Ok(t);
            };
            for slot in b.start..b.end {
                let t0 = Instant::now();
                let data = self.fetch(slot, rank)?;
                let t1 = Instant::now();
                let r = self.optimize(&data);
                t.fetch_s += (t1 - t0).as_secs_f64();
                t.optimize_s += t1.elapsed().as_secs_f64();
                t.tasks += 1;
                self.store(slot, r)?;
            }
        }
    }

    fn simulated_result(&self, data: &TaskData, median_s: f64, sigma: f64) -> (SourceResult, f64) {
        let e = &data.entry;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ e.id.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let z: f64 = Normal::new(0.0, 1.0).expect("unit normal").sample(&mut rng);
        let r = SourceResult {
            id: e.id,
            status: SourceStatus::Simulated,
            iterations: 0,
            params: inference::initial_params(&e.params),
            elbo: f64::NAN,
        };
        (r, median_s * (sigma * z).exp())
    }

    /// Discrete-event phase 3: workers advance on a simulated clock and the
    /// earliest one always acts next, so the run is deterministic.
    fn simulate(&self, median_s: f64, sigma: f64) -> Result<(Vec<Tally>, Vec<f64>)> {
        let wpr = self.cfg.workers_per_rank;
        let nworkers = self.cfg.nranks * wpr;
        let mut tallies = vec![Tally::default(); nworkers];
        let mut finish = vec![0.0; nworkers];
        let mut queue: BinaryHeap<Reverse<(u64, usize)>> = (0..nworkers).map(|w| Reverse((0f64.to_bits(), w))).collect();
        while let Some(Reverse((bits, w))) = queue.pop() {
            let mut clock = f64::from_bits(bits);
            let rank = w / wpr;
            let t = &mut tallies[w];
            let (grant, cost) = self.dtree.next_batch_costed(rank);
            clock += cost;
            t.sched_s += cost;
            let Grant::Batch(b) = grant else {
                finish[w] = clock;
                continue;
            };
            for slot in b.start..b.end {
                let data = self.fetch(slot, rank)?;
                let (r, d) = self.simulated_result(&data, median_s, sigma);
                clock += data.simulated_s + d;
                t.fetch_s += data.simulated_s;
                t.optimize_s += d;
                t.tasks += 1;
                self.store(slot, r)?;
            }
            // Non-negative clocks order correctly by their bits.
            queue.push(Reverse((clock.to_bits(), w)));
        }
        Ok((tallies, finish))
    }
}

/// Run all three phases over `images` and the initial catalog `entries`.
/// Results come back sorted by id.
pub fn run(
    images: ImageSource,
    entries: &[SourceEntry],
    prior: &Prior,
    cfg: &PipelineConfig,
) -> std::result::Result<(Vec<SourceResult>, RunMetrics), RunError> {
    let mut metrics = RunMetrics {
        ranks: vec![RankMetrics::default(); cfg.nranks],
        simulated: matches!(cfg.mode, Mode::SimulatedDurations { .. }),
        sources: entries.len(),
        ..RunMetrics::default()
    };
    match run_inner(images, entries, prior, cfg, &mut metrics) {
        Ok(results) => Ok((results, metrics)),
        Err(error) => Err(RunError { error, metrics: Box::new(metrics) }),
    }
}

fn run_inner(
    images: ImageSource,
    entries: &[SourceEntry],
    prior: &Prior,
    cfg: &PipelineConfig,
    metrics: &mut RunMetrics,
) -> Result<Vec<SourceResult>> {
    cfg.validate()?;
    prior.validate().context("invalid prior")?;
    let mut ids: Vec<u64> = entries.iter().map(|e| e.id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        bail!("catalog ids must be unique");
    }
    for e in entries {
        e.params.validate().with_context(|| format!("catalog entry {}", e.id))?;
    }
    let start = Instant::now();

    let (image_ga, directory) = phase_load_images(images, cfg, metrics)?;
    let (catalog_ga, perm) = phase_load_catalog(entries, cfg, metrics)?;
    let positions: Vec<[f64; 2]> = perm.iter().map(|&i| entries[i].params.position).collect();
    let psf = max_psf_arcsec(&directory);
    let extents_deg: Vec<f64> = perm.iter().map(|&i| extent_arcsec(&entries[i], psf) / ARCSEC_PER_DEGREE).collect();
    let radius_arcsec = cfg.neighbor_radius_arcsec.unwrap_or_else(|| default_neighbor_radius(entries, &directory));
    let radius_deg = radius_arcsec / ARCSEC_PER_DEGREE;
    let index = NeighborIndex::new(&positions, radius_deg);

    let sched = SchedConfig { total: entries.len(), ..cfg.sched };
    let shared = Shared {
        cfg,
        prior,
        images: &image_ga,
        catalog: &catalog_ga,
        directory: &directory,
        index: &index,
        radius_deg,
        positions: &positions,
        extents_deg: &extents_deg,
        image_caches: (0..cfg.nranks).map(|_| SharedLru::new(cfg.cache_capacity)).collect(),
        entry_caches: (0..cfg.nranks).map(|_| SharedLru::new(cfg.entry_cache_capacity)).collect(),
        dtree: Dtree::new(cfg.nranks, cfg.workers_per_rank, sched, cfg.fabric)?,
        output: (0..entries.len()).map(|_| OnceLock::new()).collect(),
    };

    let wpr = cfg.workers_per_rank;
    let outcome: Result<(Vec<Tally>, Vec<f64>)> = match cfg.mode {
        Mode::SimulatedDurations { median_s, sigma } => shared.simulate(median_s, sigma),
        Mode::Optimize => {
            let stop = AtomicBool::new(false);
            let first_error = Mutex::new(None);
            let tallies: Vec<Tally> = std::thread::scope(|s| {
                let handles: Vec<_> = (0..cfg.nranks * wpr)
                    .map(|w| {
                        let (shared, stop, first_error) = (&shared, &stop, &first_error);
                        s.spawn(move || match shared.work(w / wpr, stop) {
                            Ok(t) => t,
                            Err(e) => {
                                stop.store(true, Ordering::Relaxed);
                                first_error.lock().unwrap_or_else(|p| p.into_inner()).get_or_insert(e);
                                Tally::default()
                            }
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("worker thread panicked")).collect()
            });
            match first_error.into_inner().unwrap_or_else(|p| p.into_inner()) {
                Some(e) => Err(e),
                None => {
                    let busy = tallies.iter().map(Tally::busy).collect();
                    Ok((tallies, busy))
                }
            }
        }
    };

    // Metrics are filled in even when phase 3 failed.
    metrics.image_transfer = image_ga.total_stats();
    metrics.catalog_transfer = catalog_ga.total_stats();
    for (k, m) in metrics.ranks.iter_mut().enumerate() {
        m.cache_hits = shared.image_caches[k].hits();
        m.cache_misses = shared.image_caches[k].misses();
    }
    let (tallies, busy) = outcome?;
    for (w, t) in tallies.iter().enumerate() {
        let m = &mut metrics.ranks[w / wpr];
        m.ga_fetch_s += t.fetch_s;
        m.sched_overhead_s += t.sched_s;
        m.optimize_s += t.optimize_s;
        m.busy_s += busy[w];
        m.tasks += t.tasks;
    }
    metrics.worker_busy_s = busy;
    let rank_busy: Vec<f64> = metrics.ranks.iter().map(|m| m.busy_s).collect();
    (metrics.imbalance_s, metrics.load_imbalance) = imbalance(&rank_busy);
    metrics.worker_imbalance = imbalance(&metrics.worker_busy_s).1;
    metrics.wall_s = if metrics.simulated {
        metrics.worker_busy_s.iter().copied().fold(0.0, f64::max)
    } else {
        start.elapsed().as_secs_f64()
    };
    metrics.sources_per_second = if metrics.wall_s > 0.0 { entries.len() as f64 / metrics.wall_s } else { 0.0 };

    let mut results = Vec::with_capacity(entries.len());
    for (slot, cell) in shared.output.into_iter().enumerate() {
        results.push(cell.into_inner().ok_or_else(|| anyhow!("task {slot} was never issued"))?);
    }
    results.sort_by_key(|r| r.id);
    Ok(results)
}
