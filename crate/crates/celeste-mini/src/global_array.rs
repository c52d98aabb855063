//! A block-distributed array of fixed-size records with one-sided get/put.
//!
//! Ranks are logical: every rank's chunk lives in this process behind its own
//! lock, and a [`FabricModel`] charges simulated time for traffic that crosses
//! ranks. Concurrent writes to overlapping ranges are unspecified.

use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::RwLock;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GaError {
    #[error("need at least one rank")]
    NoRanks,
    #[error("record size must be at least one byte")]
    RecordSize,
    #[error("range {start}..{end} outside array of length {len}")]
    Index { start: usize, end: usize, len: usize },
    #[error("rank {0} does not exist")]
    Rank(usize),
    #[error("expected {expected} bytes, got {actual}")]
    SizeMismatch { expected: usize, actual: usize },
}

/// Cost of one-sided operations between ranks. Local operations are free.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FabricModel {
    /// Seconds per remote operation.
    pub latency: f64,
    /// Bytes per second; zero drops the bandwidth term.
    pub bandwidth: f64,
}

impl FabricModel {
    pub const UNCOSTED: FabricModel = FabricModel { latency: 0.0, bandwidth: 0.0 };

    /// Simulated seconds for `ops` remote operations moving `bytes` in total.
    pub fn cost(&self, ops: usize, bytes: usize) -> f64 {
        let transfer = if self.bandwidth > 0.0 { bytes as f64 / self.bandwidth } else { 0.0 };
        self.latency * ops as f64 + transfer
    }

    pub fn validate(&self) -> Result<(), &'static str> {
        if !(self.latency >= 0.0 && self.latency.is_finite() && self.bandwidth >= 0.0 && self.bandwidth.is_finite()) {
            return Err("fabric latency and bandwidth must be finite and >= 0");
        }
        Ok(())
    }
}

impl Default for FabricModel {
    /// Roughly a commodity HPC interconnect: 2 us latency, 5 GB/s.
    fn default() -> Self {
        Self { latency: 2e-6, bandwidth: 5e9 }
    }
}

/// Traffic counters for one rank, as the caller of gets and puts.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TransferStats {
    pub gets: u64,
    pub puts: u64,
    pub bytes_fetched_local: u64,
    pub bytes_fetched_remote: u64,
    /// Bytes this rank's chunk supplied to gets from other ranks.
    pub bytes_served: u64,
    pub bytes_put_local: u64,
    pub bytes_put_remote: u64,
    pub simulated_transfer_time: f64,
}

impl std::ops::Add for TransferStats {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            gets: self.gets + o.gets,
            puts: self.puts + o.puts,
            bytes_fetched_local: self.bytes_fetched_local + o.bytes_fetched_local,
            bytes_fetched_remote: self.bytes_fetched_remote + o.bytes_fetched_remote,
            bytes_served: self.bytes_served + o.bytes_served,
            bytes_put_local: self.bytes_put_local + o.bytes_put_local,
            bytes_put_remote: self.bytes_put_remote + o.bytes_put_remote,
            simulated_transfer_time: self.simulated_transfer_time + o.simulated_transfer_time,
        }
    }
}

impl std::iter::Sum for TransferStats {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

#[derive(Default)]
struct Counters {
    gets: AtomicU64,
    puts: AtomicU64,
    fetched_local: AtomicU64,
    fetched_remote: AtomicU64,
    served: AtomicU64,
    put_local: AtomicU64,
    put_remote: AtomicU64,
    /// f64 bits.
    sim_time: AtomicU64,
}

impl Counters {
    fn add_time(&self, dt: f64) {
        if dt == 0.0 {
            return;
        }
        let _ = self
            .sim_time
            .fetch_update(Ordering::Relaxed, Ordering::Relaxed, |bits| Some((f64::from_bits(bits) + dt).to_bits()));
    }

    fn snapshot(&self) -> TransferStats {
        let r = |a: &AtomicU64| a.load(Ordering::Relaxed);
        TransferStats {
            gets: r(&self.gets),
            puts: r(&self.puts),
            bytes_fetched_local: r(&self.fetched_local),
            bytes_fetched_remote: r(&self.fetched_remote),
            bytes_served: r(&self.served),
            bytes_put_local: r(&self.put_local),
            bytes_put_remote: r(&self.put_remote),
            simulated_transfer_time: f64::from_bits(r(&self.sim_time)),
        }
    }
}

/// Block distribution of `len` items over `nranks`: contiguous chunks whose
/// sizes differ by at most one, larger chunks first.
pub fn block_layout(len: usize, nranks: usize) -> Vec<Range<usize>> {
    let (base, extra) = (len / nranks.max(1), len % nranks.max(1));
    let mut start = 0;
    (0..nranks)
        .map(|k| {
            let n = base + usize::from(k < extra);
            start += n;
            start - n..start
        })
        .collect()
}

pub struct GlobalArray {
    len: usize,
    record_size: usize,
    /// `starts[k]..starts[k + 1]` are the records owned by rank k.
    starts: Vec<usize>,
    chunks: Vec<RwLock<Vec<u8>>>,
    stats: Vec<Counters>,
    fabric: FabricModel,
}

impl GlobalArray {
    /// Zero-filled array of `len` records of `record_size` bytes over `nranks`.
    pub fn create(len: usize, record_size: usize, nranks: usize, fabric: FabricModel) -> Result<Self, GaError> {
        if nranks == 0 {
            return Err(GaError::NoRanks);
        }
        if record_size == 0 {
            return Err(GaError::RecordSize);
        }
        let mut starts = vec![0];
        starts.extend(block_layout(len, nranks).iter().map(|r| r.end));
        let chunks = (0..nranks)
            .map(|k| RwLock::new(vec![0u8; (starts[k + 1] - starts[k]) * record_size]))
            .collect();
        let stats = (0..nranks).map(|_| Counters::default()).collect();
        Ok(Self { len, record_size, starts, chunks, stats, fabric })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn record_size(&self) -> usize {
        self.record_size
    }

    pub fn nranks(&self) -> usize {
        self.chunks.len()
    }

    pub fn fabric(&self) -> FabricModel {
        self.fabric
    }

    /// Records owned by `rank`.
    pub fn chunk(&self, rank: usize) -> Range<usize> {
        self.starts[rank]..self.starts[rank + 1]
    }

    /// Owning rank and offset within that rank's chunk.
    pub fn locate(&self, index: usize) -> Result<(usize, usize), GaError> {
        if index >= self.len {
            return Err(GaError::Index { start: index, end: index + 1, len: self.len });
        }
        let n = self.nranks();
        let (base, extra) = (self.len / n, self.len % n);
        // The first `extra` ranks hold `base + 1` records.
        let big = extra * (base + 1);
        let rank = if index < big { index / (base + 1) } else { extra + (index - big) / base };
        Ok((rank, index - self.starts[rank]))
    }

    fn check(&self, range: &Range<usize>, caller: usize) -> Result<(), GaError> {
        if caller >= self.nranks() {
            return Err(GaError::Rank(caller));
        }
        if range.start > range.end || range.end > self.len {
            return Err(GaError::Index { start: range.start, end: range.end, len: self.len });
        }
        Ok(())
    }

    /// Pieces of `range` as (rank, local record range), in index order.
    fn pieces(&self, range: Range<usize>) -> Vec<(usize, Range<usize>)> {
        let mut out = Vec::new();
        let Ok((mut k, _)) = self.locate(range.start) else {
            return out;
        };
        let mut i = range.start;
        while i < range.end {
            let c = self.chunk(k);
            let hi = range.end.min(c.end);
            if hi > i {
                out.push((k, i - c.start..hi - c.start));
                i = hi;
            }
            k += 1;
        }
        out
    }

    /// Copy of records `range` fetched by rank `caller`.
    pub fn get(&self, range: Range<usize>, caller: usize) -> Result<Vec<u8>, GaError> {
        self.get_costed(range, caller).map(|(bytes, _)| bytes)
    }

    /// Like [`get`](Self::get), also returning the simulated transfer time.
    pub fn get_costed(&self, range: Range<usize>, caller: usize) -> Result<(Vec<u8>, f64), GaError> {
        self.check(&range, caller)?;
        let rs = self.record_size;
        let mut out = Vec::with_capacity(range.len() * rs);
        let (mut remote_ops, mut remote_bytes, mut local_bytes) = (0usize, 0usize, 0usize);
        for (rank, local) in self.pieces(range) {
            let chunk = self.chunks[rank].read().unwrap_or_else(|e| e.into_inner());
            let bytes = &chunk[local.start * rs..local.end * rs];
            out.extend_from_slice(bytes);
            if rank == caller {
                local_bytes += bytes.len();
            } else {
                remote_ops += 1;
                remote_bytes += bytes.len();
                self.stats[rank].served.fetch_add(bytes.len() as u64, Ordering::Relaxed);
            }
        }
        let cost = self.fabric.cost(remote_ops, remote_bytes);
        let s = &self.stats[caller];
        s.gets.fetch_add(1, Ordering::Relaxed);
        s.fetched_local.fetch_add(local_bytes as u64, Ordering::Relaxed);
        s.fetched_remote.fetch_add(remote_bytes as u64, Ordering::Relaxed);
        s.add_time(cost);
        Ok((out, cost))
    }

    /// Overwrite records `range` with `data`, issued by rank `caller`.
    pub fn put(&self, range: Range<usize>, data: &[u8], caller: usize) -> Result<f64, GaError> {
        self.check(&range, caller)?;
        let rs = self.record_size;
        if data.len() != range.len() * rs {
            return Err(GaError::SizeMismatch { expected: range.len() * rs, actual: data.len() });
        }
        let (mut remote_ops, mut remote_bytes, mut local_bytes) = (0usize, 0usize, 0usize);
        let mut cursor = 0;
        for (rank, local) in self.pieces(range) {
            let n = local.len() * rs;
            let mut chunk = self.chunks[rank].write().unwrap_or_else(|e| e.into_inner());
            chunk[local.start * rs..local.end * rs].copy_from_slice(&data[cursor..cursor + n]);
            cursor += n;
            if rank == caller {
                local_bytes += n;
            } else {
                remote_ops += 1;
                remote_bytes += n;
            }
        }
        let cost = self.fabric.cost(remote_ops, remote_bytes);
        let s = &self.stats[caller];
        s.puts.fetch_add(1, Ordering::Relaxed);
        s.put_local.fetch_add(local_bytes as u64, Ordering::Relaxed);
        s.put_remote.fetch_add(remote_bytes as u64, Ordering::Relaxed);
        s.add_time(cost);
        Ok(cost)
    }

    pub fn stats(&self, rank: usize) -> TransferStats {
        self.stats[rank].snapshot()
    }

    pub fn total_stats(&self) -> TransferStats {
        (0..self.nranks()).map(|k| self.stats(k)).sum()
    }
}
