//! Quiescent state based reclamation.
//!
//! Leaving a critical region is a checkpoint: the thread bumps its counter
//! and closes the batch of nodes retired since its previous checkpoint,
//! recording every other thread's counter. A batch is reclaimed once each of
//! those threads has passed another checkpoint or exited.

use std::cell::RefCell;
use std::collections::VecDeque;
use std::sync::atomic::{fence, AtomicU64, Ordering};
use std::sync::Mutex;

use super::registry::{Entry, Orphans, Registry};
use crate::reclaim::{AllocHook, Counters, DomainCore, Retired, Scheme};

pub(crate) struct QsrRecord {
    counter: AtomicU64,
    // Bumped on every claim and release so a recycled record never looks
    // like the thread that was snapshotted.
    incarnation: AtomicU64,
}

struct Snapshot {
    entry: *const Entry<QsrRecord>,
    incarnation: u64,
    counter: u64,
}

pub struct Batch {
    nodes: Vec<Retired>,
    waits_for: Vec<Snapshot>,
}

// SAFETY: snapshot entries point into the registry, which outlives batches.
unsafe impl Send for Batch {}

impl Batch {
    fn ready(&self) -> bool {
        self.waits_for.iter().all(|s| {
            // SAFETY: entries live as long as the registry.
            let r = unsafe { &(*s.entry).record };
            r.incarnation.load(Ordering::Acquire) != s.incarnation
                || r.counter.load(Ordering::Acquire) > s.counter
        })
    }
}

pub struct Qsr {
    core: DomainCore,
    records: Registry<QsrRecord>,
    orphans: Orphans<Batch>,
    exit_lock: Mutex<()>,
}

pub struct QsrLocal {
    entry: *const Entry<QsrRecord>,
    current: RefCell<Vec<Retired>>,
    pending: RefCell<VecDeque<Batch>>,
}

impl Default for Qsr {
    fn default() -> Self {
        Self::with_hook(AllocHook::System)
    }
}

impl Qsr {
    pub fn with_hook(hook: AllocHook) -> Self {
        Qsr {
            core: DomainCore::new(hook),
            records: Registry::default(),
            orphans: Orphans::default(),
            exit_lock: Mutex::new(()),
        }
    }

    fn record<'a>(&self, local: &'a QsrLocal) -> &'a QsrRecord {
        // SAFETY: records live as long as the registry.
        unsafe { &(*local.entry).record }
    }

    fn reclaim_batch(&self, batch: Batch, counters: &Counters) {
        counters.bump_scan_steps(batch.nodes.len() as u64);
        for n in batch.nodes {
            // SAFETY: every thread has passed a checkpoint since the unlink.
            unsafe { n.reclaim(&self.core, counters) };
        }
    }

    fn close_batch(&self, local: &QsrLocal) -> Option<Batch> {
        let nodes = std::mem::take(&mut *local.current.borrow_mut());
        if nodes.is_empty() {
            return None;
        }
        fence(Ordering::SeqCst);
        let waits_for = self
            .records
            .iter()
            .filter(|e| !std::ptr::eq(*e, local.entry) && e.in_use())
            .map(|e| Snapshot {
                entry: e,
                incarnation: e.record.incarnation.load(Ordering::Acquire),
                counter: e.record.counter.load(Ordering::Acquire),
            })
            .collect();
        Some(Batch { nodes, waits_for })
    }

    fn reclaim_orphans(&self, counters: &Counters) {
        if self.orphans.is_empty() {
            return;
        }
        for batch in self.orphans.steal() {
            if batch.ready() {
                self.reclaim_batch(batch, counters);
            } else {
                self.orphans.push(batch);
            }
        }
    }

    /// Nodes waiting in closed or open batches of `local`.
    pub fn pending(&self, local: &QsrLocal) -> usize {
        local.current.borrow().len()
            + local
                .pending
                .borrow()
                .iter()
                .map(|b| b.nodes.len())
                .sum::<usize>()
    }
}

impl Scheme for Qsr {
    const NAME: &'static str = "qsr";
    const REGION_GUARDS: bool = true;
    const GUARDS_NEED_REGION: bool = true;
    const VALIDATE: bool = false;

    type Local = QsrLocal;
    type Slot = ();

    fn core(&self) -> &DomainCore {
        &self.core
    }

    fn register(&self) -> QsrLocal {
        let (entry, _) = self.records.claim(|| QsrRecord {
            counter: AtomicU64::new(0),
            incarnation: AtomicU64::new(0),
        });
        entry.record.incarnation.fetch_add(1, Ordering::AcqRel);
        fence(Ordering::SeqCst);
        QsrLocal {
            entry,
            current: RefCell::new(Vec::new()),
            pending: RefCell::new(VecDeque::new()),
        }
    }

    fn unregister(&self, local: &mut QsrLocal, counters: &Counters) {
        let _serial = self.exit_lock.lock().unwrap();
        if let Some(b) = self.close_batch(local) {
            local.pending.get_mut().push_back(b);
        }
        for b in local.pending.get_mut().drain(..) {
            self.orphans.push(b);
        }
        let record = self.record(local);
        record.incarnation.fetch_add(1, Ordering::AcqRel);
        // SAFETY: the entry outlives the handle.
        self.records.release(unsafe { &*local.entry });
        self.reclaim_orphans(counters);
    }

    fn enter(&self, _local: &QsrLocal, _counters: &Counters) {}

    fn leave(&self, local: &QsrLocal, counters: &Counters) {
        let record = self.record(local);
        let c = record.counter.load(Ordering::Relaxed);
        record.counter.store(c + 1, Ordering::Release);
        fence(Ordering::SeqCst);

        let mut pending = local.pending.borrow_mut();
        let mut i = 0;
        while i < pending.len() {
            if pending[i].ready() {
                let b = pending.remove(i).unwrap();
                self.reclaim_batch(b, counters);
            } else {
                i += 1;
            }
        }
        if let Some(b) = self.close_batch(local) {
            pending.push_back(b);
        }
        drop(pending);
        self.reclaim_orphans(counters);
    }

    fn retire(&self, local: &QsrLocal, node: Retired, _counters: &Counters) {
        local.current.borrow_mut().push(node);
    }

    fn acquire_slot(&self, _local: &QsrLocal) {}

    fn release_slot(&self, _local: &QsrLocal, _slot: ()) {}

    fn protect(&self, _slot: &(), _addr: usize) {}

    /// Orphaned nodes whose batch still waits for a live thread.
    fn residual_bound(&self) -> u64 {
        let mut n = 0;
        self.orphans.for_each_quiescent(|b| {
            if !b.ready() {
                n += b.nodes.len() as u64;
            }
        });
        n
    }
}

impl Drop for Qsr {
    fn drop(&mut self) {
        for batch in self.orphans.steal() {
            for n in batch.nodes {
                // SAFETY: no handles remain.
                unsafe { self.core.reclaim_detached(n) };
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reclaim::Handle;
    use std::sync::Arc;

    fn retire_in_region(h: &Handle<Qsr>) {
        let _r = h.region();
        let p = h.alloc(0u64);
        unsafe { h.retire(p) };
    }

    fn reclaimed(d: &Qsr) -> u64 {
        d.core().stats.snapshot().reclaimed
    }

    #[test]
    fn idle_thread_blocks_reclamation() {
        let d = Arc::new(Qsr::default());
        let a = Handle::register(&d);
        let _idle = Handle::register(&d);
        for _ in 0..10 {
            retire_in_region(&a);
        }
        assert_eq!(reclaimed(&d), 0);
        assert_eq!(d.pending(a.local()), 10);
    }

    #[test]
    fn checkpoint_by_everyone_frees_prior_generation() {
        let d = Arc::new(Qsr::default());
        let a = Handle::register(&d);
        let b = Handle::register(&d);
        retire_in_region(&a);
        assert_eq!(reclaimed(&d), 0);
        drop(b.region());
        assert_eq!(reclaimed(&d), 0);
        drop(a.region());
        assert_eq!(reclaimed(&d), 1);
    }

    #[test]
    fn retire_after_checkpoint_lands_in_next_generation() {
        let d = Arc::new(Qsr::default());
        let a = Handle::register(&d);
        let b = Handle::register(&d);
        retire_in_region(&a);
        drop(b.region());
        retire_in_region(&a);
        assert_eq!(reclaimed(&d), 1);
        assert_eq!(d.pending(a.local()), 1);
        drop(b.region());
        drop(a.region());
        assert_eq!(reclaimed(&d), 2);
    }

    #[test]
    fn exited_thread_no_longer_blocks() {
        let d = Arc::new(Qsr::default());
        let a = Handle::register(&d);
        let b = Handle::register(&d);
        retire_in_region(&a);
        drop(b);
        drop(a.region());
        assert_eq!(reclaimed(&d), 1);
        drop(a);
        assert_eq!(d.core().stats.snapshot().unreclaimed(), 0);
    }
}
