//! A push-only, lock-free list of per-thread records. Records are claimed
//! on registration and released on exit, then reused by later threads.
//! They are freed only when the registry is dropped.

use std::ptr;
use std::sync::atomic::{AtomicBool, AtomicPtr, Ordering};

pub(crate) struct Entry<R> {
    pub(crate) record: R,
    in_use: AtomicBool,
    next: *mut Entry<R>,
}

impl<R> Entry<R> {
    pub(crate) fn in_use(&self) -> bool {
        self.in_use.load(Ordering::Acquire)
    }
}

pub(crate) struct Registry<R> {
    head: AtomicPtr<Entry<R>>,
}

// SAFETY: entries are immutable apart from their atomics and are never freed
// while the registry is shared.
unsafe impl<R: Send + Sync> Send for Registry<R> {}
unsafe impl<R: Send + Sync> Sync for Registry<R> {}

impl<R> Default for Registry<R> {
    fn default() -> Self {
        Registry {
            head: AtomicPtr::new(ptr::null_mut()),
        }
    }
}

impl<R> Registry<R> {
    /// Claims a free record or appends a fresh one built by `make`. The
    /// boolean reports whether the record is new.
    pub(crate) fn claim(&self, make: impl FnOnce() -> R) -> (&Entry<R>, bool) {
        for e in self.iter() {
            if !e.in_use.load(Ordering::Relaxed)
                && e.in_use
                    .compare_exchange(false, true, Ordering::AcqRel, Ordering::Relaxed)
                    .is_ok()
            {
                return (e, false);
            }
        }
        let entry = Box::into_raw(Box::new(Entry {
            record: make(),
            in_use: AtomicBool::new(true),
            next: ptr::null_mut(),
        }));
        let mut head = self.head.load(Ordering::Acquire);
        loop {
            // SAFETY: not yet published.
            unsafe { (*entry).next = head };
            match self
                .head
                .compare_exchange_weak(head, entry, Ordering::AcqRel, Ordering::Acquire)
            {
                Ok(_) => break,
                Err(actual) => head = actual,
            }
        }
        // SAFETY: entries live as long as the registry.
        (unsafe { &*entry }, true)
    }

    pub(crate) fn release(&self, e: &Entry<R>) {
        e.in_use.store(false, Ordering::Release);
    }

    pub(crate) fn iter(&self) -> Iter<'_, R> {
        Iter {
            cur: self.head.load(Ordering::Acquire),
            _registry: self,
        }
    }
}

impl<R> Drop for Registry<R> {
    fn drop(&mut self) {
        let mut cur = *self.head.get_mut();
        while !cur.is_null() {
            // SAFETY: exclusive access during drop.
            let e = unsafe { Box::from_raw(cur) };
            cur = e.next;
        }
    }
}

pub(crate) struct Iter<'a, R> {
    cur: *mut Entry<R>,
    _registry: &'a Registry<R>,
}

impl<'a, R> Iterator for Iter<'a, R> {
    type Item = &'a Entry<R>;

    fn next(&mut self) -> Option<&'a Entry<R>> {
        if self.cur.is_null() {
            return None;
        }
        // SAFETY: entries live as long as the registry borrow.
        let e = unsafe { &*self.cur };
        self.cur = e.next;
        Some(e)
    }
}

/// A lock-free stack of batches that threads hand over on exit and that
/// reclaiming threads steal wholesale, process and push back.
pub(crate) struct Orphans<B> {
    head: AtomicPtr<OrphanNode<B>>,
}

struct OrphanNode<B> {
    batch: B,
    next: *mut OrphanNode<B>,
}

// SAFETY: ownership of a batch moves with the node through the atomic head.
unsafe impl<B: Send> Send for Orphans<B> {}
unsafe impl<B: Send> Sync for Orphans<B> {}

impl<B> Default for Orphans<B> {
    fn default() -> Self {
        Orphans {
            head: AtomicPtr::new(ptr::null_mut()),
        }
    }
}

impl<B> Orphans<B> {
    pub(crate) fn push(&self, batch: B) {
        let node = Box::into_raw(Box::new(OrphanNode {
            batch,
            next: ptr::null_mut(),
        }));
        let mut head = self.head.load(Ordering::Acquire);
        loop {
            // SAFETY: not yet published.
            unsafe { (*node).next = head };
            match self
                .head
                .compare_exchange_weak(head, node, Ordering::AcqRel, Ordering::Acquire)
            {
                Ok(_) => return,
                Err(actual) => head = actual,
            }
        }
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.head.load(Ordering::Acquire).is_null()
    }

    /// Detaches every batch.
    pub(crate) fn steal(&self) -> Vec<B> {
        let mut cur = self.head.swap(ptr::null_mut(), Ordering::AcqRel);
        let mut out = Vec::new();
        while !cur.is_null() {
            // SAFETY: the swap gave us exclusive ownership of the chain.
            let node = unsafe { Box::from_raw(cur) };
            cur = node.next;
            out.push(node.batch);
        }
        out
    }

    /// Visits every batch; only valid while no other thread touches the
    /// stack.
    pub(crate) fn for_each_quiescent(&self, mut f: impl FnMut(&B)) {
        let mut cur = self.head.load(Ordering::Acquire);
        while !cur.is_null() {
            // SAFETY: caller guarantees quiescence.
            let node = unsafe { &*cur };
            f(&node.batch);
            cur = node.next;
        }
    }
}

impl<B> Drop for Orphans<B> {
    fn drop(&mut self) {
        drop(self.steal());
    }
}
