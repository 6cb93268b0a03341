//! Fixed-size chained hash map with FIFO capacity eviction.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use super::list::Bucket;
use super::queue::Queue;
use crate::reclaim::{Handle, Scheme};

pub const BUCKETS: usize = 2048;
pub const DEFAULT_CAPACITY: usize = 10_000;

const HASH_MULTIPLIER: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn hash(key: u64) -> u64 {
    key.wrapping_mul(HASH_MULTIPLIER) >> 32
}

pub fn bucket_index(key: u64) -> usize {
    (hash(key) % BUCKETS as u64) as usize
}

pub struct HashMap<V: Send + Sync + 'static, S: Scheme> {
    buckets: Box<[Bucket<u64, V>]>,
    fifo: Queue<u64, S>,
    count: AtomicUsize,
    capacity: usize,
    domain: Arc<S>,
}

impl<V: Send + Sync + 'static, S: Scheme> HashMap<V, S> {
    pub fn new(h: &Handle<S>, capacity: usize) -> Self {
        HashMap {
            buckets: (0..BUCKETS).map(|_| Bucket::default()).collect(),
            fifo: Queue::new(h),
            count: AtomicUsize::new(0),
            capacity,
            domain: h.domain().clone(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Entries inserted and not yet evicted.
    pub fn len(&self) -> usize {
        self.count.load(Ordering::Acquire)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn bucket(&self, key: u64) -> &Bucket<u64, V> {
        &self.buckets[bucket_index(key)]
    }

    /// Passes the payload for `key` to `visit`, computing and inserting it
    /// first if absent. Returns the visitor's result and whether the key was
    /// a hit.
    pub fn get_or_compute<R>(
        &self,
        h: &Handle<S>,
        key: u64,
        compute: impl FnOnce() -> V,
        visit: impl FnOnce(&V) -> R,
    ) -> (R, bool) {
        let bucket = self.bucket(key);
        let mut c = Bucket::cursor(h);
        if bucket.find(h, key, &mut c) {
            h.check(c.cur.canary());
            return (visit(&c.cur.value), true);
        }
        drop(c);
        let mut visit = Some(visit);
        let mut out = None;
        let (inserted, c) = bucket.insert_with(h, key, || {
            let v = compute();
            out = Some((visit.take().unwrap())(&v));
            v
        });
        if inserted {
            drop(c);
            self.fifo.enqueue(h, key);
            self.count.fetch_add(1, Ordering::AcqRel);
            self.evict(h);
            return (out.unwrap(), false);
        }
        match visit {
            // Another thread inserted the key first.
            Some(visit) => {
                h.check(c.cur.canary());
                (visit(&c.cur.value), true)
            }
            None => (out.unwrap(), false),
        }
    }

    fn evict(&self, h: &Handle<S>) {
        let cap = self.capacity;
        while self
            .count
            .fetch_update(Ordering::AcqRel, Ordering::Acquire, |c| {
                (c > cap).then(|| c - 1)
            })
            .is_ok()
        {
            loop {
                if let Some(old) = self.fifo.dequeue(h) {
                    let removed = self.bucket(old).remove(h, old);
                    debug_assert!(
                        removed,
                        "{}: queued key {old} missing from the map",
                        S::NAME
                    );
                    break;
                }
            }
        }
    }

    pub fn contains(&self, h: &Handle<S>, key: u64) -> bool {
        self.bucket(key).contains(h, key)
    }

    /// Number of linked entries. Only meaningful at quiescence.
    pub fn count_quiescent(&self) -> usize {
        self.buckets
            .iter()
            .map(|b| b.snapshot_quiescent().len())
            .sum()
    }
}

impl<V: Send + Sync + 'static, S: Scheme> Drop for HashMap<V, S> {
    fn drop(&mut self) {
        for b in self.buckets.iter_mut() {
            // SAFETY: `&mut self` excludes concurrent access.
            unsafe { b.destroy(self.domain.core()) };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baseline::Qsr;
    use crate::stamp_it::StampIt;
    use std::cell::Cell;

    #[test]
    fn miss_then_hit_computes_once() {
        let d = Arc::new(StampIt::default());
        let h = Handle::register(&d);
        let m = HashMap::new(&h, 10);
        let calls = Cell::new(0);
        let compute = || {
            calls.set(calls.get() + 1);
            vec![7u8; 16]
        };
        let (v, hit) = m.get_or_compute(&h, 5, compute, |p| p[0]);
        assert_eq!((v, hit), (7, false));
        let (v, hit) = m.get_or_compute(&h, 5, || vec![0u8; 16], |p| p[0]);
        assert_eq!((v, hit), (7, true));
        assert_eq!(calls.get(), 1);
    }

    #[test]
    fn oldest_entry_is_evicted() {
        let d = Arc::new(Qsr::default());
        let h = Handle::register(&d);
        let m = HashMap::new(&h, 3);
        for k in 1..=4u64 {
            m.get_or_compute(&h, k, || k, |_| ());
        }
        assert_eq!(m.len(), 3);
        assert!(!m.contains(&h, 1));
        assert!((2..=4).all(|k| m.contains(&h, k)));
        assert_eq!(m.count_quiescent(), 3);
    }

    #[test]
    fn buckets_follow_the_hash() {
        assert_eq!(bucket_index(0), 0);
        assert!((0..10_000u64).all(|k| bucket_index(k) < BUCKETS));
        let used: std::collections::HashSet<_> = (0..3000u64).map(bucket_index).collect();
        assert!(used.len() > BUCKETS / 2);
    }

    #[test]
    fn racing_misses_on_few_keys_always_yield_a_payload() {
        let d = Arc::new(crate::baseline::Hp::default());
        let m = {
            let h = Handle::register(&d);
            HashMap::new(&h, 2)
        };
        std::thread::scope(|s| {
            for t in 0..4u64 {
                let (d, m) = (&d, &m);
                s.spawn(move || {
                    let h = Handle::register(d);
                    for i in 0..3000u64 {
                        let key = (i + t) % 4;
                        let (v, _) = m.get_or_compute(&h, key, || key * 10, |v| *v);
                        assert_eq!(v, key * 10);
                        if i % 64 == 0 {
                            std::thread::yield_now();
                        }
                    }
                });
            }
        });
        assert!(m.len() <= 2);
    }

    #[test]
    fn drop_frees_everything() {
        let d = Arc::new(StampIt::default());
        let h = Handle::register(&d);
        let m = HashMap::new(&h, 50);
        for k in 0..200u64 {
            m.get_or_compute(&h, k, || vec![0u8; 8], |_| ());
        }
        drop(m);
        drop(h);
        assert_eq!(d.core().stats.snapshot().unreclaimed(), 0);
    }
}
