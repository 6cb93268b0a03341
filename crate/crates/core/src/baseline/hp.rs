//! Hazard pointers with a dynamic number of slots per thread.
//!
//! Every thread owns a record with two static slots and grows it in chunks
//! of 16 when it needs more guards at once. Retired nodes collect in a local
//! list that is scanned once it exceeds `100 + 2 * total_slots`.

use std::cell::RefCell;
use std::ptr;
use std::sync::atomic::{fence, AtomicPtr, AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;

use super::registry::{Entry, Orphans, Registry};
use crate::reclaim::{AllocHook, Counters, DomainCore, Retired, Scheme};

pub const STATIC_SLOTS: usize = 2;
pub const CHUNK_SLOTS: usize = 16;
pub const BASE_THRESHOLD: usize = 100;

struct Chunk {
    slots: [AtomicUsize; CHUNK_SLOTS],
    next: *mut Chunk,
}

pub(crate) struct HpRecord {
    slots: [AtomicUsize; STATIC_SLOTS],
    chunks: AtomicPtr<Chunk>,
}

impl HpRecord {
    fn new() -> Self {
        HpRecord {
            slots: Default::default(),
            chunks: AtomicPtr::new(ptr::null_mut()),
        }
    }

    fn for_each_slot(&self, mut f: impl FnMut(&AtomicUsize)) {
        self.slots.iter().for_each(&mut f);
        let mut c = self.chunks.load(Ordering::Acquire);
        while !c.is_null() {
            // SAFETY: chunks live as long as the record.
            let chunk = unsafe { &*c };
            chunk.slots.iter().for_each(&mut f);
            c = chunk.next;
        }
    }
}

impl Drop for HpRecord {
    fn drop(&mut self) {
        let mut c = *self.chunks.get_mut();
        while !c.is_null() {
            // SAFETY: exclusive access during drop.
            let chunk = unsafe { Box::from_raw(c) };
            c = chunk.next;
        }
    }
}

pub struct HazardPointers {
    core: DomainCore,
    records: Registry<HpRecord>,
    total_slots: AtomicUsize,
    base_threshold: usize,
    orphans: Orphans<Vec<Retired>>,
    exit_lock: Mutex<()>,
    scans: AtomicU64,
}

pub struct HpLocal {
    entry: *const Entry<HpRecord>,
    free: RefCell<Vec<*const AtomicUsize>>,
    retired: RefCell<Vec<Retired>>,
}

/// A hazard slot owned by one guard.
pub struct HpSlot(*const AtomicUsize);

impl Default for HazardPointers {
    fn default() -> Self {
        Self::with_hook(AllocHook::System)
    }
}

impl HazardPointers {
    pub fn with_hook(hook: AllocHook) -> Self {
        Self::new(BASE_THRESHOLD, hook)
    }

    pub fn new(base_threshold: usize, hook: AllocHook) -> Self {
        HazardPointers {
            core: DomainCore::new(hook),
            records: Registry::default(),
            total_slots: AtomicUsize::new(0),
            base_threshold,
            orphans: Orphans::default(),
            exit_lock: Mutex::new(()),
            scans: AtomicU64::new(0),
        }
    }

    /// Local retire-list length above which a scan runs.
    pub fn threshold(&self) -> usize {
        self.base_threshold + 2 * self.total_slots.load(Ordering::Relaxed)
    }

    /// Total hazard slots across all thread records.
    pub fn total_slots(&self) -> usize {
        self.total_slots.load(Ordering::Relaxed)
    }

    /// Number of scans performed so far.
    pub fn scans(&self) -> u64 {
        self.scans.load(Ordering::Relaxed)
    }

    pub fn pending(&self, local: &HpLocal) -> usize {
        local.retired.borrow().len()
    }

    fn record<'a>(&self, local: &'a HpLocal) -> &'a HpRecord {
        // SAFETY: records live as long as the registry.
        unsafe { &(*local.entry).record }
    }

    fn scan(&self, local: &HpLocal, counters: &Counters) {
        self.scans.fetch_add(1, Ordering::Relaxed);
        // Detach orphans before reading hazards, so every node examined was
        // unlinked before the read.
        let orphans = if self.orphans.is_empty() {
            Vec::new()
        } else {
            self.orphans.steal()
        };
        fence(Ordering::SeqCst);
        let mut hazards = Vec::new();
        for e in self.records.iter() {
            e.record.for_each_slot(|s| {
                let v = s.load(Ordering::Acquire);
                if v != 0 {
                    hazards.push(v);
                }
            });
        }
        hazards.sort_unstable();
        let protected = |n: &Retired| hazards.binary_search(&n.address()).is_ok();

        let mut steps = 0;
        let mut retired = local.retired.borrow_mut();
        let mut kept = Vec::with_capacity(retired.len());
        for n in retired.drain(..) {
            steps += 1;
            if protected(&n) {
                kept.push(n);
            } else {
                // SAFETY: no hazard slot holds the node and it is unlinked.
                unsafe { n.reclaim(&self.core, counters) };
            }
        }
        *retired = kept;

        if !orphans.is_empty() {
            let mut leftover = Vec::new();
            for batch in orphans {
                for n in batch {
                    steps += 1;
                    if protected(&n) {
                        leftover.push(n);
                    } else {
                        // SAFETY: as above.
                        unsafe { n.reclaim(&self.core, counters) };
                    }
                }
            }
            if !leftover.is_empty() {
                self.orphans.push(leftover);
            }
        }
        counters.bump_scan_steps(steps);
    }
}

impl Scheme for HazardPointers {
    const NAME: &'static str = "hpr";
    const REGION_GUARDS: bool = false;
    const GUARDS_NEED_REGION: bool = false;
    const VALIDATE: bool = true;

    type Local = HpLocal;
    type Slot = HpSlot;

    fn core(&self) -> &DomainCore {
        &self.core
    }

    fn register(&self) -> HpLocal {
        let (entry, fresh) = self.records.claim(HpRecord::new);
        if fresh {
            self.total_slots.fetch_add(STATIC_SLOTS, Ordering::Relaxed);
        }
        let mut free = Vec::new();
        entry
            .record
            .for_each_slot(|s| free.push(s as *const AtomicUsize));
        HpLocal {
            entry,
            free: RefCell::new(free),
            retired: RefCell::new(Vec::new()),
        }
    }

    fn unregister(&self, local: &mut HpLocal, counters: &Counters) {
        let _serial = self.exit_lock.lock().unwrap();
        self.scan(local, counters);
        let rest = std::mem::take(local.retired.get_mut());
        if !rest.is_empty() {
            self.orphans.push(rest);
        }
        // SAFETY: the entry outlives the handle.
        self.records.release(unsafe { &*local.entry });
    }

    fn enter(&self, _local: &HpLocal, _counters: &Counters) {}

    fn leave(&self, _local: &HpLocal, _counters: &Counters) {}

    fn retire(&self, local: &HpLocal, node: Retired, counters: &Counters) {
        let len = {
            let mut r = local.retired.borrow_mut();
            r.push(node);
            r.len()
        };
        if len > self.threshold() {
            self.scan(local, counters);
        }
    }

    fn acquire_slot(&self, local: &HpLocal) -> HpSlot {
        let mut free = local.free.borrow_mut();
        if let Some(s) = free.pop() {
            return HpSlot(s);
        }
        let record = self.record(local);
        let chunk = Box::into_raw(Box::new(Chunk {
            slots: Default::default(),
            next: record.chunks.load(Ordering::Relaxed),
        }));
        // Only the owner appends chunks; scanners just read the head.
        record.chunks.store(chunk, Ordering::Release);
        self.total_slots.fetch_add(CHUNK_SLOTS, Ordering::Relaxed);
        // SAFETY: just allocated, lives as long as the record.
        let slots = unsafe { &(*chunk).slots };
        free.extend(slots[1..].iter().map(|s| s as *const AtomicUsize));
        HpSlot(&slots[0])
    }

    fn release_slot(&self, local: &HpLocal, slot: HpSlot) {
        // SAFETY: slots live as long as the record.
        unsafe { (*slot.0).store(0, Ordering::Release) };
        local.free.borrow_mut().push(slot.0);
    }

    fn protect(&self, slot: &HpSlot, addr: usize) {
        // SAFETY: as above.
        unsafe { (*slot.0).store(addr, Ordering::Relaxed) };
        fence(Ordering::SeqCst);
    }

    /// `threshold * p + total_slots`, `p` being the number of records.
    fn residual_bound(&self) -> u64 {
        let p = self.records.iter().count();
        (self.threshold() * p + self.total_slots()) as u64
    }
}

impl Drop for HazardPointers {
    fn drop(&mut self) {
        for batch in self.orphans.steal() {
            for n in batch {
                // SAFETY: no handles remain.
                unsafe { self.core.reclaim_detached(n) };
            }
        }
    }
}
