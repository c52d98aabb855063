//! Scheduling arithmetic: the rank tree and the batch-size law.
//!
//! The runtime that hands out batches to concurrent workers lives in the std
//! crate; everything here is pure.

use alloc::vec::Vec;
#[allow(unused_imports)] // shadowed by inherent methods whenever std is linked
use num_traits::Float;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SchedError {
    #[error("fanout must be at least 2, got {0}")]
    Fanout(usize),
    #[error("need at least one rank")]
    NoRanks,
    #[error("invalid scheduler configuration: {0}")]
    Config(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SchedConfig {
    /// Total number of tasks `T`.
    pub total: usize,
    pub fanout: usize,
    /// Fraction of the remaining pool handed out per round, in (0, 1].
    pub drain_fraction: f64,
    pub min_batch: usize,
    pub max_batch: usize,
}

impl Default for SchedConfig {
    fn default() -> Self {
        Self {
            total: 0,
            fanout: 8,
            drain_fraction: 0.5,
            min_batch: 4,
            max_batch: 256,
        }
    }
}

impl SchedConfig {
    pub fn validate(&self) -> Result<(), SchedError> {
        if self.fanout < 2 {
            return Err(SchedError::Fanout(self.fanout));
        }
        if !(self.drain_fraction > 0.0 && self.drain_fraction <= 1.0) {
            return Err(SchedError::Config("drain_fraction must lie in (0, 1]"));
        }
        if self.min_batch == 0 || self.min_batch > self.max_batch {
            return Err(SchedError::Config("need 1 <= min_batch <= max_batch"));
        }
        Ok(())
    }
}

/// A half-open task range `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BatchRange {
    pub start: usize,
    pub end: usize,
}

impl BatchRange {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Tasks per request: `clamp(ceil(remaining * alpha / workers), min, max)`,
/// never more than `remaining`.
pub fn batch_size(remaining: usize, workers_below: usize, cfg: &SchedConfig) -> usize {
    if remaining == 0 {
        return 0;
    }
    let w = workers_below.max(1) as f64;
    let raw = (remaining as f64 * cfg.drain_fraction / w).ceil() as usize;
    raw.clamp(cfg.min_batch, cfg.max_batch).min(remaining)
}

/// A complete `fanout`-ary tree over ranks in breadth-first order, rooted at 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SchedTree {
    pub nranks: usize,
    pub fanout: usize,
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    subtree: Vec<usize>,
    depth: usize,
}

impl SchedTree {
    pub fn parent(&self, rank: usize) -> Option<usize> {
        self.parent[rank]
    }

    pub fn children(&self, rank: usize) -> &[usize] {
        &self.children[rank]
    }

    /// Number of ranks in the subtree rooted at `rank`, itself included.
    pub fn subtree_size(&self, rank: usize) -> usize {
        self.subtree[rank]
    }

    /// Number of edges on the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Ranks on the path from `rank` up to the root, `rank` first.
    pub fn path_to_root(&self, rank: usize) -> Vec<usize> {
        let mut path = alloc::vec![rank];
        let mut r = rank;
        while let Some(p) = self.parent[r] {
            path.push(p);
            r = p;
        }
        path
    }
}

pub fn build_tree(nranks: usize, fanout: usize) -> Result<SchedTree, SchedError> {
    if fanout < 2 {
        return Err(SchedError::Fanout(fanout));
    }
    if nranks == 0 {
        return Err(SchedError::NoRanks);
    }
    let parent: Vec<Option<usize>> = (0..nranks).map(|i| if i == 0 { None } else { Some((i - 1) / fanout) }).collect();
    let mut children = alloc::vec![Vec::new(); nranks];
    for (i, p) in parent.iter().enumerate() {
        if let Some(p) = *p {
            children[p].push(i);
        }
    }
    let mut subtree = alloc::vec![1usize; nranks];
    for i in (1..nranks).rev() {
        let p = (i - 1) / fanout;
        subtree[p] += subtree[i];
    }
    let mut depth = 0;
    let mut r = nranks - 1;
    while r > 0 {
        r = (r - 1) / fanout;
        depth += 1;
    }
    Ok(SchedTree { nranks, fanout, parent, children, subtree, depth })
}
