//! Harris-Michael lock-free ordered list, used as a set and as the bucket
//! type of the hash map.

use std::sync::atomic::Ordering::{AcqRel, Acquire, Relaxed};
use std::sync::Arc;

use crate::marked::{Atomic, MarkedPtr};
use crate::reclaim::{Canary, DomainCore, Guard, Handle, Retired, Scheme};

pub(crate) struct Node<K, V> {
    canary: Canary,
    key: K,
    pub(crate) value: V,
    next: Atomic<Node<K, V>, 1>,
}

impl<K, V> Node<K, V> {
    pub(crate) fn canary(&self) -> &Canary {
        &self.canary
    }
}

type Link<K, V> = Atomic<Node<K, V>, 1>;
type NodeGuard<'h, K, V, S> = Guard<'h, Node<K, V>, S, 1>;

/// Traversal state left behind by [`Bucket::find`].
pub(crate) struct Cursor<'h, K, V, S: Scheme> {
    prev: *const Link<K, V>,
    next: MarkedPtr<Node<K, V>, 1>,
    pub(crate) cur: NodeGuard<'h, K, V, S>,
    save: NodeGuard<'h, K, V, S>,
}

impl<'h, K, V, S: Scheme> Cursor<'h, K, V, S> {
    fn new(h: &'h Handle<S>) -> Self {
        Cursor {
            prev: std::ptr::null(),
            next: MarkedPtr::null(),
            cur: h.guard(),
            save: h.guard(),
        }
    }

    fn prev<'a>(&self) -> &'a Link<K, V> {
        // SAFETY: `prev` is the list head or the link of the node in `save`,
        // which stays protected until the cursor moves on.
        unsafe { &*self.prev }
    }
}

/// An ordered lock-free list without an owning domain.
pub(crate) struct Bucket<K, V> {
    head: Link<K, V>,
}

impl<K, V> Default for Bucket<K, V> {
    fn default() -> Self {
        Bucket {
            head: Atomic::null(),
        }
    }
}

impl<K: Ord + Copy + Send + Sync + 'static, V: Send + Sync + 'static> Bucket<K, V> {
    /// Positions `c` on the first node with a key not below `key`, unlinking
    /// and retiring delete-marked nodes on the way.
    pub(crate) fn find<'h, S: Scheme>(
        &self,
        h: &'h Handle<S>,
        key: K,
        c: &mut Cursor<'h, K, V, S>,
    ) -> bool {
        'retry: loop {
            c.prev = &self.head;
            c.next = c.prev().load(Acquire);
            c.save.reset();
            loop {
                let prev = c.prev();
                if !c.cur.acquire_if_equal(prev, c.next) {
                    continue 'retry;
                }
                let Some(cur) = c.cur.as_ref() else {
                    return false;
                };
                h.check(&cur.canary);
                c.next = cur.next.load(Acquire);
                if c.next.mark() != 0 {
                    // Reload the successor and drop the mark before splicing.
                    c.next = cur.next.load(Acquire).unmarked();
                    let expected = c.cur.get();
                    if c.prev()
                        .compare_exchange_weak(expected, c.next, AcqRel, Relaxed)
                        .is_err()
                    {
                        continue 'retry;
                    }
                    // SAFETY: our CAS unlinked the node.
                    unsafe { c.cur.reclaim() };
                } else {
                    if c.prev().load(Acquire) != c.cur.get() {
                        continue 'retry;
                    }
                    let ckey = cur.key;
                    if ckey >= key {
                        return ckey == key;
                    }
                    c.prev = &cur.next;
                    c.save = c.cur.take();
                }
            }
        }
    }

    pub(crate) fn cursor<'h, S: Scheme>(h: &'h Handle<S>) -> Cursor<'h, K, V, S> {
        Cursor::new(h)
    }

    /// Inserts `key` unless present. Returns the cursor so callers can read
    /// the existing node on a miss.
    pub(crate) fn insert_with<'h, S: Scheme>(
        &self,
        h: &'h Handle<S>,
        key: K,
        make: impl FnOnce() -> V,
    ) -> (bool, Cursor<'h, K, V, S>) {
        let mut c = Cursor::new(h);
        let mut node: *mut Node<K, V> = std::ptr::null_mut();
        let mut make = Some(make);
        loop {
            if self.find(h, key, &mut c) {
                if !node.is_null() {
                    // SAFETY: never published.
                    unsafe { h.free_unpublished(node) };
                }
                return (false, c);
            }
            if node.is_null() {
                node = h.alloc(Node {
                    canary: Canary::new(),
                    key,
                    value: (make.take().unwrap())(),
                    next: Atomic::null(),
                });
            }
            let n = MarkedPtr::new(node, 0);
            // SAFETY: still private to this thread.
            unsafe { (*node).next.store(c.cur.get(), Relaxed) };
            if c.prev()
                .compare_exchange(c.cur.get(), n, AcqRel, Relaxed)
                .is_ok()
            {
                return (true, c);
            }
        }
    }

    pub(crate) fn remove<S: Scheme>(&self, h: &Handle<S>, key: K) -> bool {
        let mut c = Cursor::new(h);
        loop {
            if !self.find(h, key, &mut c) {
                return false;
            }
            let cur = c.cur.as_ref().unwrap();
            let next = c.next;
            if cur
                .next
                .compare_exchange(next, next.with_mark(1), AcqRel, Relaxed)
                .is_err()
            {
                continue;
            }
            if c.prev()
                .compare_exchange(c.cur.get(), next, AcqRel, Relaxed)
                .is_ok()
            {
                // SAFETY: our CAS unlinked the node.
                unsafe { c.cur.reclaim() };
            } else {
                self.find(h, key, &mut c);
            }
            return true;
        }
    }

    pub(crate) fn contains<S: Scheme>(&self, h: &Handle<S>, key: K) -> bool {
        let mut c = Cursor::new(h);
        self.find(h, key, &mut c)
    }

    /// Keys and mark bits in list order. Only meaningful at quiescence.
    pub(crate) fn snapshot_quiescent(&self) -> Vec<(K, bool)> {
        let mut out = Vec::new();
        let mut cur = self.head.load(Acquire);
        while !cur.is_null() {
            // SAFETY: caller guarantees quiescence.
            let node = unsafe { &*cur.get() };
            let next = node.next.load(Acquire);
            out.push((node.key, next.mark() != 0));
            cur = next;
        }
        out
    }

    /// Frees every node still linked.
    ///
    /// # Safety
    /// No thread may access the bucket concurrently or afterwards.
    pub(crate) unsafe fn destroy(&mut self, core: &DomainCore) {
        let mut cur = self.head.load(Relaxed);
        while !cur.is_null() {
            let next = (*cur.get()).next.load(Relaxed);
            core.reclaim_detached(Retired::new(cur.get()));
            cur = next;
        }
        self.head.store(MarkedPtr::null(), Relaxed);
    }
}

/// A lock-free ordered set of keys.
pub struct List<K: Ord + Copy + Send + Sync + 'static, S: Scheme> {
    bucket: Bucket<K, ()>,
    domain: Arc<S>,
}

impl<K: Ord + Copy + Send + Sync + 'static, S: Scheme> List<K, S> {
    pub fn new(domain: &Arc<S>) -> Self {
        List {
            bucket: Bucket::default(),
            domain: domain.clone(),
        }
    }

    pub fn insert(&self, h: &Handle<S>, key: K) -> bool {
        self.bucket.insert_with(h, key, || ()).0
    }

    pub fn remove(&self, h: &Handle<S>, key: K) -> bool {
        self.bucket.remove(h, key)
    }

    pub fn contains(&self, h: &Handle<S>, key: K) -> bool {
        self.bucket.contains(h, key)
    }

    /// Keys with their delete marks. Only meaningful when no other thread
    /// mutates the list.
    pub fn snapshot_quiescent(&self) -> Vec<(K, bool)> {
        self.bucket.snapshot_quiescent()
    }
}

impl<K: Ord + Copy + Send + Sync + 'static, S: Scheme> Drop for List<K, S> {
    fn drop(&mut self) {
        // SAFETY: `&mut self` excludes concurrent access.
        unsafe { self.bucket.destroy(self.domain.core()) };
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baseline::Hp;
    use crate::stamp_it::StampIt;

    #[test]
    fn set_semantics() {
        let d = Arc::new(StampIt::default());
        let h = Handle::register(&d);
        let l = List::new(&d);
        assert!(!l.remove(&h, 3));
        assert!(l.insert(&h, 3));
        assert!(!l.insert(&h, 3));
        assert!(l.insert(&h, 1));
        assert!(l.insert(&h, 2));
        assert!(l.contains(&h, 2));
        assert!(!l.contains(&h, 4));
        assert!(l.remove(&h, 2));
        assert!(!l.contains(&h, 2));
        assert_eq!(l.snapshot_quiescent(), vec![(1, false), (3, false)]);
    }

    #[test]
    fn find_brackets_insertion_point() {
        let d = Arc::new(Hp::default());
        let h = Handle::register(&d);
        let l = List::new(&d);
        for k in [10, 20, 30] {
            l.insert(&h, k);
        }
        let mut c = Bucket::cursor(&h);
        assert!(l.bucket.find(&h, 20, &mut c));
        assert_eq!(c.cur.key, 20);
        assert!(!l.bucket.find(&h, 25, &mut c));
        assert_eq!(c.cur.key, 30);
        assert_eq!(c.save.key, 20);
        assert!(!l.bucket.find(&h, 35, &mut c));
        assert!(c.cur.is_null());
    }

    #[test]
    fn traversal_splices_marked_node_once() {
        let d = Arc::new(StampIt::default());
        let h = Handle::register(&d);
        let l = List::new(&d);
        for k in [1, 2, 3] {
            l.insert(&h, k);
        }
        let mut c = Bucket::cursor(&h);
        assert!(l.bucket.find(&h, 2, &mut c));
        let next = c.next;
        c.cur.next.store(next.with_mark(1), Relaxed);
        drop(c);
        assert_eq!(
            l.snapshot_quiescent(),
            vec![(1, false), (2, true), (3, false)]
        );
        assert!(l.contains(&h, 3));
        assert!(!l.contains(&h, 2));
        assert_eq!(l.snapshot_quiescent(), vec![(1, false), (3, false)]);
        let s = d.core().stats.snapshot();
        assert_eq!(s.retired, 1);
    }

    #[test]
    fn drop_frees_remaining_nodes() {
        let d = Arc::new(Hp::default());
        let h = Handle::register(&d);
        let l = List::new(&d);
        for k in 0..50 {
            l.insert(&h, k);
        }
        for k in 0..25 {
            l.remove(&h, k);
        }
        drop(l);
        drop(h);
        assert_eq!(d.core().stats.snapshot().unreclaimed(), 0);
    }
}
