//! Epoch based reclamation.
//!
//! A global epoch advances once every active thread has observed it. Nodes
//! retired while the global epoch is `e` go to the bucket for `e` and are
//! reclaimed once the thread sees epoch `e + 2`. [`Er`] enters a critical region for every
//! guard; [`Ner`] lets region guards span many guards.

use std::cell::{Cell, RefCell};
use std::sync::atomic::{fence, AtomicU64, Ordering};
use std::sync::Mutex;

use crossbeam_utils::CachePadded;

use super::registry::{Entry, Orphans, Registry};
use crate::reclaim::{AllocHook, Counters, DomainCore, Retired, Scheme};

/// Critical region entries between attempts to advance the epoch.
pub const ADVANCE_CADENCE: u64 = 100;

pub(crate) struct EpochRecord {
    // epoch << 1 | active
    state: AtomicU64,
}

pub struct Epoch<const NEW: bool> {
    core: DomainCore,
    global: CachePadded<AtomicU64>,
    records: Registry<EpochRecord>,
    orphans: Orphans<Vec<(u64, Retired)>>,
    exit_lock: Mutex<()>,
}

/// Epoch based reclamation with one region per guard.
pub type Er = Epoch<false>;
/// Epoch based reclamation with explicit region guards.
pub type Ner = Epoch<true>;

pub struct EpochLocal {
    entry: *const Entry<EpochRecord>,
    epoch: Cell<u64>,
    entries: Cell<u64>,
    buckets: RefCell<[(u64, Vec<Retired>); 3]>,
}

impl<const NEW: bool> Default for Epoch<NEW> {
    fn default() -> Self {
        Self::with_hook(AllocHook::System)
    }
}

impl<const NEW: bool> Epoch<NEW> {
    pub fn with_hook(hook: AllocHook) -> Self {
        Epoch {
            core: DomainCore::new(hook),
            global: CachePadded::new(AtomicU64::new(0)),
            records: Registry::default(),
            orphans: Orphans::default(),
            exit_lock: Mutex::new(()),
        }
    }

    pub fn global_epoch(&self) -> u64 {
        self.global.load(Ordering::Acquire)
    }

    fn record<'a>(&self, local: &'a EpochLocal) -> &'a EpochRecord {
        // SAFETY: records live as long as the registry.
        unsafe { &(*local.entry).record }
    }

    /// Advances the global epoch if every active thread has observed it.
    pub fn try_advance(&self) -> bool {
        let g = self.global.load(Ordering::SeqCst);
        for e in self.records.iter() {
            let st = e.record.state.load(Ordering::SeqCst);
            if st & 1 == 1 && st >> 1 != g {
                return false;
            }
        }
        self.global
            .compare_exchange(g, g + 1, Ordering::SeqCst, Ordering::Relaxed)
            .is_ok()
    }

    fn reclaim_bucket(&self, bucket: &mut (u64, Vec<Retired>), counters: &Counters) {
        let n = bucket.1.len() as u64;
        for node in bucket.1.drain(..) {
            // SAFETY: two epochs have passed since the node was retired.
            unsafe { node.reclaim(&self.core, counters) };
        }
        counters.bump_scan_steps(n);
    }

    fn reclaim_orphans(&self, epoch: u64, counters: &Counters) {
        if self.orphans.is_empty() {
            return;
        }
        let mut steps = 0;
        let mut kept = Vec::new();
        for batch in self.orphans.steal() {
            for (tag, node) in batch {
                steps += 1;
                if tag + 2 <= epoch {
                    // SAFETY: as for local buckets.
                    unsafe { node.reclaim(&self.core, counters) };
                } else {
                    kept.push((tag, node));
                }
            }
        }
        if !kept.is_empty() {
            self.orphans.push(kept);
        }
        counters.bump_scan_steps(steps);
    }

    /// Nodes left in the orphan list whose epoch is one of the two most
    /// recent. Only meaningful at a quiescent point.
    pub fn recent_orphans(&self) -> (u64, u64) {
        let g = self.global_epoch();
        let (mut recent, mut total) = (0, 0);
        self.orphans.for_each_quiescent(|batch| {
            for (tag, _) in batch {
                total += 1;
                if tag + 1 >= g {
                    recent += 1;
                }
            }
        });
        (recent, total)
    }
}

impl<const NEW: bool> Scheme for Epoch<NEW> {
    const NAME: &'static str = if NEW { "ner" } else { "er" };
    const REGION_GUARDS: bool = NEW;
    const GUARDS_NEED_REGION: bool = true;
    const VALIDATE: bool = false;

    type Local = EpochLocal;
    type Slot = ();

    fn core(&self) -> &DomainCore {
        &self.core
    }

    fn register(&self) -> EpochLocal {
        let (entry, _) = self.records.claim(|| EpochRecord {
            state: AtomicU64::new(0),
        });
        EpochLocal {
            entry,
            epoch: Cell::new(self.global_epoch()),
            entries: Cell::new(0),
            buckets: RefCell::new(Default::default()),
        }
    }

    fn unregister(&self, local: &mut EpochLocal, counters: &Counters) {
        let _serial = self.exit_lock.lock().unwrap();
        let mut rest = Vec::new();
        for (tag, nodes) in local.buckets.get_mut().iter_mut() {
            rest.extend(nodes.drain(..).map(|n| (*tag, n)));
        }
        if !rest.is_empty() {
            self.orphans.push(rest);
        }
        self.record(local).state.store(0, Ordering::SeqCst);
        // SAFETY: the entry outlives the handle.
        self.records.release(unsafe { &*local.entry });
        // Both attempts succeed when no other thread is active.
        self.try_advance();
        self.try_advance();
        self.reclaim_orphans(self.global_epoch(), counters);
    }

    fn enter(&self, local: &EpochLocal, counters: &Counters) {
        let n = local.entries.get() + 1;
        local.entries.set(n);
        if n.is_multiple_of(ADVANCE_CADENCE) {
            self.try_advance();
        }
        let record = self.record(local);
        let e = loop {
            let e = self.global.load(Ordering::SeqCst);
            record.state.store(e << 1 | 1, Ordering::SeqCst);
            fence(Ordering::SeqCst);
            if self.global.load(Ordering::SeqCst) == e {
                break e;
            }
        };
        if e != local.epoch.get() {
            local.epoch.set(e);
            for bucket in local.buckets.borrow_mut().iter_mut() {
                if !bucket.1.is_empty() && bucket.0 + 2 <= e {
                    self.reclaim_bucket(bucket, counters);
                }
            }
            self.reclaim_orphans(e, counters);
        }
    }

    fn leave(&self, local: &EpochLocal, _counters: &Counters) {
        self.record(local)
            .state
            .store(local.epoch.get() << 1, Ordering::Release);
    }

    fn retire(&self, local: &EpochLocal, node: Retired, counters: &Counters) {
        // Tag with the global epoch read after the unlink: every thread that
        // could still reach the node is pinned at that epoch or earlier.
        fence(Ordering::SeqCst);
        let g = self.global.load(Ordering::SeqCst);
        let mut buckets = local.buckets.borrow_mut();
        let bucket = &mut buckets[(g % 3) as usize];
        if bucket.0 != g {
            if !bucket.1.is_empty() {
                debug_assert!(bucket.0 + 2 <= local.epoch.get());
                self.reclaim_bucket(bucket, counters);
            }
            bucket.0 = g;
        }
        bucket.1.push(node);
    }

    fn acquire_slot(&self, _local: &EpochLocal) {}

    fn release_slot(&self, _local: &EpochLocal, _slot: ()) {}

    fn protect(&self, _slot: &(), _addr: usize) {}

    /// Orphaned nodes retired in one of the two most recent epochs.
    fn residual_bound(&self) -> u64 {
        self.recent_orphans().0
    }
}

impl<const NEW: bool> Drop for Epoch<NEW> {
    fn drop(&mut self) {
        for batch in self.orphans.steal() {
            for (_, n) in batch {
                // SAFETY: no handles remain.
                unsafe { self.core.reclaim_detached(n) };
            }
        }
    }
}
