//! Per-rank LRU caches shared by the workers of a rank.

use std::hash::Hash;
use std::num::NonZeroUsize;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use lru::LruCache;

/// A thread-safe LRU cache. Values are built outside the lock, so two workers
/// missing on the same key may both fetch it; the second insert wins.
pub struct SharedLru<K: Hash + Eq, V> {
    inner: Mutex<LruCache<K, Arc<V>>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl<K: Hash + Eq + Copy, V> SharedLru<K, V> {
    /// `None` means unbounded.
    pub fn new(capacity: Option<usize>) -> Self {
        let inner = match capacity.and_then(NonZeroUsize::new) {
            Some(c) => LruCache::new(c),
            None => LruCache::unbounded(),
        };
        Self { inner: Mutex::new(inner), hits: AtomicU64::new(0), misses: AtomicU64::new(0) }
    }

    /// The cached value for `key`, or the result of `fetch`, which is then
    /// cached. The flag reports a hit.
    pub fn get_or_fetch<E>(&self, key: K, fetch: impl FnOnce() -> Result<V, E>) -> Result<(Arc<V>, bool), E> {
        if let Some(v) = self.inner.lock().unwrap_or_else(|e| e.into_inner()).get(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok((Arc::clone(v), true));
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let v = Arc::new(fetch()?);
        self.inner.lock().unwrap_or_else(|e| e.into_inner()).put(key, Arc::clone(&v));
        Ok((v, false))
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
