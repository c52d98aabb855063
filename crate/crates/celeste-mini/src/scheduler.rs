//! Dtree: hierarchical distribution of task ranges.
//!
//! The root rank starts with the whole range `[0, T)`. A rank whose pool runs
//! dry asks its parent, which refills from its own parent when needed, so
//! requests walk up the tree only as far as necessary. Each rank's state sits
//! behind its own mutex; a request holds the locks of the ranks on its path,
//! always acquired from the requester upward, so no cycle can form.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use celeste_mini_core::schedule::{batch_size, build_tree, BatchRange, SchedConfig, SchedError, SchedTree};

use crate::global_array::FabricModel;

/// Payload of one scheduler message (a range), for the fabric model.
const MESSAGE_BYTES: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grant {
    Batch(BatchRange),
    Done,
}

#[derive(Debug)]
struct Node {
    pool: BatchRange,
    /// Set once the parent has nothing left to give.
    exhausted: bool,
}

pub struct Dtree {
    tree: SchedTree,
    cfg: SchedConfig,
    workers_per_rank: usize,
    fabric: FabricModel,
    nodes: Vec<Mutex<Node>>,
    overhead_ns: Vec<AtomicU64>,
    requests: Vec<AtomicU64>,
}

impl Dtree {
    pub fn new(nranks: usize, workers_per_rank: usize, cfg: SchedConfig, fabric: FabricModel) -> Result<Self, SchedError> {
        cfg.validate()?;
        if workers_per_rank == 0 {
            return Err(SchedError::Config("workers_per_rank must be at least 1"));
        }
        let tree = build_tree(nranks, cfg.fanout)?;
        let nodes = (0..nranks)
            .map(|r| {
                let pool = if r == 0 { BatchRange { start: 0, end: cfg.total } } else { BatchRange { start: 0, end: 0 } };
                Mutex::new(Node { pool, exhausted: r == 0 })
            })
            .collect();
        Ok(Self {
            tree,
            cfg,
            workers_per_rank,
            fabric,
            nodes,
            overhead_ns: (0..nranks).map(|_| AtomicU64::new(0)).collect(),
            requests: (0..nranks).map(|_| AtomicU64::new(0)).collect(),
        })
    }

    pub fn tree(&self) -> &SchedTree {
        &self.tree
    }

    pub fn nranks(&self) -> usize {
        self.tree.nranks
    }

    /// Next range for a worker on `rank`; `Done` forever once the tasks
    /// reachable from `rank` are gone.
    pub fn next_batch(&self, rank: usize) -> Grant {
        self.next_batch_costed(rank).0
    }

    /// Like [`next_batch`](Self::next_batch), also returning the simulated
    /// fabric time of the parent requests it made.
    pub fn next_batch_costed(&self, rank: usize) -> (Grant, f64) {
        let t0 = Instant::now();
        let mut node = self.lock(rank);
        let mut hops = 0;
        if node.pool.is_empty() && !node.exhausted {
            let (grant, h) = self.take_from_parent(rank);
            hops = h;
            match grant {
                Some(r) => node.pool = r,
                None => node.exhausted = true,
            }
        }
        let grant = if node.pool.is_empty() {
            Grant::Done
        } else {
            // The rank's pool also feeds its subtree, so share it accordingly.
            let n = batch_size(node.pool.len(), self.workers_below(rank), &self.cfg);
            let b = BatchRange { start: node.pool.start, end: node.pool.start + n };
            node.pool.start += n;
            Grant::Batch(b)
        };
        drop(node);
        self.requests[rank].fetch_add(1, Ordering::Relaxed);
        self.overhead_ns[rank].fetch_add(t0.elapsed().as_nanos() as u64, Ordering::Relaxed);
        // Each hop is a request and a reply.
        (grant, self.fabric.cost(2 * hops, 2 * hops * MESSAGE_BYTES))
    }

    fn lock(&self, rank: usize) -> std::sync::MutexGuard<'_, Node> {
        self.nodes[rank].lock().unwrap_or_else(|e| e.into_inner())
    }

    fn workers_below(&self, rank: usize) -> usize {
        self.tree.subtree_size(rank) * self.workers_per_rank
    }

    /// A grant for `child` out of its parent's pool, refilling the parent
    /// first if it is empty. The caller holds `child`'s lock.
    fn take_from_parent(&self, child: usize) -> (Option<BatchRange>, usize) {
        let Some(p) = self.tree.parent(child) else {
            return (None, 0);
        };
        let mut node = self.lock(p);
        let mut hops = 1;
        if node.pool.is_empty() && !node.exhausted {
            let (grant, h) = self.take_from_parent(p);
            hops += h;
            match grant {
                Some(r) => node.pool = r,
                None => node.exhausted = true,
            }
        }
        if node.pool.is_empty() {
            return (None, hops);
        }
        let remaining = node.pool.len();
        let share = (remaining as f64 * self.cfg.drain_fraction * self.workers_below(child) as f64
            / self.workers_below(p) as f64)
            .ceil() as usize;
        let cap = (self.tree.children(child).len() + 1) * self.cfg.max_batch;
        let n = share.max(self.cfg.min_batch).min(cap).min(remaining);
        let b = BatchRange { start: node.pool.start, end: node.pool.start + n };
        node.pool.start += n;
        (Some(b), hops)
    }

    /// Wall-clock seconds spent inside `next_batch` calls issued by `rank`.
    pub fn overhead_seconds(&self, rank: usize) -> f64 {
        self.overhead_ns[rank].load(Ordering::Relaxed) as f64 * 1e-9
    }

    pub fn requests(&self, rank: usize) -> u64 {
        self.requests[rank].load(Ordering::Relaxed)
    }
}
