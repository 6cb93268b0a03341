//! The Stamp-it reclamation scheme.
//!
//! A thread entering a critical region pushes its block into the
//! [`StampPool`] and draws a stamp. Retired nodes are tagged with the pool's
//! highest stamp and kept in a stamp-ordered local list. A node becomes
//! reclaimable once `retire_stamp <= lowest_stamp()`, i.e. once every thread
//! that could still see it has left its region.
//!
//! On leaving, a thread reclaims the reclaimable prefix of its local list.
//! The thread that leaves as the oldest one also drains the global list, a
//! lock-free stack of stamp-ordered sublists that other threads feed with
//! their local lists once those grow beyond a threshold.

use std::cell::RefCell;
use std::collections::VecDeque;
use std::ptr;
use std::sync::atomic::{fence, AtomicPtr, Ordering};

use crate::reclaim::{AllocHook, Counters, DomainCore, Retired, Scheme};
use crate::stamp_pool::{Block, StampPool, FLAGS, STAMP_INC};

pub const DEFAULT_THRESHOLD: usize = 20;

#[derive(Debug)]
pub struct StampItConfig {
    /// Local lists longer than this are handed to the global list.
    pub threshold: usize,
    /// First stamp handed out (a multiple of 4).
    pub initial_stamp: u64,
    pub hook: AllocHook,
    /// Fault injection for the verification harness: accepts nodes one
    /// stamp increment too early.
    pub off_by_one: bool,
}

impl Default for StampItConfig {
    fn default() -> Self {
        StampItConfig {
            threshold: DEFAULT_THRESHOLD,
            initial_stamp: 0,
            hook: AllocHook::System,
            off_by_one: false,
        }
    }
}

#[derive(Debug)]
struct Entry {
    stamp: u64,
    node: Retired,
}

type RetireList = VecDeque<Entry>;

struct Sublist {
    entries: RetireList,
    next: *mut Sublist,
}

pub struct StampIt {
    core: DomainCore,
    pool: StampPool,
    global: AtomicPtr<Sublist>,
    threshold: usize,
    off_by_one: bool,
}

pub struct StampItLocal {
    block: *const Block,
    list: RefCell<RetireList>,
}

// SAFETY: sublists are only reachable through the atomic head; a detached
// chain is owned exclusively by the detaching thread.
unsafe impl Send for StampIt {}
unsafe impl Sync for StampIt {}

impl Default for StampIt {
    fn default() -> Self {
        Self::new(StampItConfig::default())
    }
}

impl StampIt {
    pub fn new(cfg: StampItConfig) -> Self {
        StampIt {
            core: DomainCore::new(cfg.hook),
            pool: StampPool::new(cfg.initial_stamp),
            global: AtomicPtr::new(ptr::null_mut()),
            threshold: cfg.threshold,
            off_by_one: cfg.off_by_one,
        }
    }

    pub fn with_hook(hook: AllocHook) -> Self {
        Self::new(StampItConfig {
            hook,
            ..Default::default()
        })
    }

    pub fn pool(&self) -> &StampPool {
        &self.pool
    }

    pub fn threshold(&self) -> usize {
        self.threshold
    }

    fn reclaimable(&self, stamp: u64, lowest: u64) -> bool {
        if self.off_by_one {
            stamp <= lowest + STAMP_INC
        } else {
            stamp <= lowest
        }
    }

    /// Destroys the reclaimable prefix of `list`. Returns how many nodes were
    /// destroyed; every examined entry counts as one scan step.
    fn reclaim_prefix(&self, list: &mut RetireList, lowest: u64, counters: &Counters) -> usize {
        let mut reclaimed = 0;
        let mut steps = 0;
        while let Some(front) = list.front() {
            steps += 1;
            if !self.reclaimable(front.stamp, lowest) {
                break;
            }
            let entry = list.pop_front().unwrap();
            // SAFETY: every thread that was in a region when the node was
            // retired has since left it.
            unsafe { entry.node.reclaim(&self.core, counters) };
            reclaimed += 1;
        }
        counters.bump_scan_steps(steps);
        reclaimed
    }

    fn push_sublist(&self, entries: RetireList) {
        debug_assert!(entries
            .iter()
            .zip(entries.iter().skip(1))
            .all(|(a, b)| a.stamp <= b.stamp));
        let node = Box::into_raw(Box::new(Sublist {
            entries,
            next: ptr::null_mut(),
        }));
        self.push_chain(node, node);
    }

    fn push_chain(&self, first: *mut Sublist, last: *mut Sublist) {
        let mut head = self.global.load(Ordering::Acquire);
        loop {
            // SAFETY: the chain is exclusively ours until published.
            unsafe { (*last).next = head };
            match self.global.compare_exchange_weak(
                head,
                first,
                Ordering::AcqRel,
                Ordering::Acquire,
            ) {
                Ok(_) => return,
                Err(actual) => head = actual,
            }
        }
    }

    /// Drains the reclaimable prefixes of all global sublists, restarting
    /// while the lowest stamp keeps moving and leftovers remain.
    fn reclaim_global(&self, counters: &Counters) -> usize {
        let mut total = 0;
        let mut lowest = self.pool.lowest_stamp();
        loop {
            let mut cur = self.global.swap(ptr::null_mut(), Ordering::AcqRel);
            if cur.is_null() {
                return total;
            }
            let mut keep_first: *mut Sublist = ptr::null_mut();
            let mut keep_last: *mut Sublist = ptr::null_mut();
            while !cur.is_null() {
                // SAFETY: the swap detached the whole chain for us.
                let sub = unsafe { &mut *cur };
                let next = sub.next;
                total += self.reclaim_prefix(&mut sub.entries, lowest, counters);
                if sub.entries.is_empty() {
                    // SAFETY: allocated by `push_sublist`, now unreachable.
                    drop(unsafe { Box::from_raw(cur) });
                } else {
                    sub.next = ptr::null_mut();
                    if keep_last.is_null() {
                        keep_first = cur;
                    } else {
                        // SAFETY: chain nodes are exclusively ours.
                        unsafe { (*keep_last).next = cur };
                    }
                    keep_last = cur;
                }
                cur = next;
            }
            if keep_first.is_null() {
                return total;
            }
            self.push_chain(keep_first, keep_last);
            let now = self.pool.lowest_stamp();
            if now == lowest {
                return total;
            }
            lowest = now;
        }
    }

    /// Retire stamps of every node in the global list, one vector per
    /// sublist. Only meaningful while no other thread touches the domain.
    pub fn global_stamps(&self) -> Vec<Vec<u64>> {
        let mut out = Vec::new();
        let mut cur = self.global.load(Ordering::Acquire);
        while !cur.is_null() {
            // SAFETY: quiescent inspection.
            let sub = unsafe { &*cur };
            out.push(sub.entries.iter().map(|e| e.stamp).collect());
            cur = sub.next;
        }
        out
    }

    /// The stamp `local` drew on entering its current region, if it is
    /// inside one.
    pub fn entry_stamp(&self, local: &StampItLocal) -> Option<u64> {
        let raw = local.block().peek_stamp();
        (raw & FLAGS == 0).then(|| StampPool::public_stamp(raw))
    }

    /// Retire stamps of a thread's local list.
    pub fn local_stamps(&self, local: &StampItLocal) -> Vec<u64> {
        local.list.borrow().iter().map(|e| e.stamp).collect()
    }
}

impl StampItLocal {
    fn block(&self) -> &Block {
        // SAFETY: blocks live as long as the pool, which outlives every
        // handle (handles keep the domain alive).
        unsafe { &*self.block }
    }
}

impl Scheme for StampIt {
    const NAME: &'static str = "stamp-it";
    const REGION_GUARDS: bool = true;
    const GUARDS_NEED_REGION: bool = true;
    const VALIDATE: bool = false;

    type Local = StampItLocal;
    type Slot = ();

    fn core(&self) -> &DomainCore {
        &self.core
    }

    fn register(&self) -> StampItLocal {
        StampItLocal {
            block: self.pool.acquire_block(),
            list: RefCell::new(VecDeque::new()),
        }
    }

    fn unregister(&self, local: &mut StampItLocal, counters: &Counters) {
        let residual = std::mem::take(&mut *local.list.borrow_mut());
        if !residual.is_empty() {
            self.push_sublist(residual);
        }
        // One more pass through the pool: if we turn out to be the oldest
        // thread, this drains the global list including our residue.
        self.enter(local, counters);
        self.leave(local, counters);
        self.pool.release_block(local.block());
    }

    fn enter(&self, local: &StampItLocal, _counters: &Counters) {
        self.pool.push(local.block());
    }

    fn leave(&self, local: &StampItLocal, counters: &Counters) {
        let was_last = self.pool.remove(local.block());
        let lowest = self.pool.lowest_stamp();
        let mut list = local.list.borrow_mut();
        self.reclaim_prefix(&mut list, lowest, counters);
        if was_last {
            drop(list);
            self.reclaim_global(counters);
        } else if list.len() > self.threshold {
            let entries = std::mem::take(&mut *list);
            drop(list);
            self.push_sublist(entries);
        }
    }

    fn retire(&self, local: &StampItLocal, node: Retired, _counters: &Counters) {
        // The unlink that preceded this call must be ordered before the
        // stamp read, or a thread entering concurrently could both miss the
        // unlink and get a stamp below ours.
        fence(Ordering::SeqCst);
        let stamp = self.pool.highest_stamp();
        local.list.borrow_mut().push_back(Entry { stamp, node });
    }

    fn acquire_slot(&self, _local: &StampItLocal) {}

    fn release_slot(&self, _local: &StampItLocal, _slot: ()) {}

    fn protect(&self, _slot: &(), _addr: usize) {}
}

impl Drop for StampIt {
    fn drop(&mut self) {
        let mut cur = *self.global.get_mut();
        while !cur.is_null() {
            // SAFETY: no handles remain, so the chain is exclusively ours.
            let sub = unsafe { Box::from_raw(cur) };
            cur = sub.next;
            for e in sub.entries {
                // SAFETY: no thread can hold a reference any more.
                unsafe { self.core.reclaim_detached(e.node) };
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reclaim::Handle;
    use std::sync::{Arc, Mutex};

    struct Tracked {
        id: u32,
        log: Arc<Mutex<Vec<u32>>>,
    }

    impl Drop for Tracked {
        fn drop(&mut self) {
            self.log.lock().unwrap().push(self.id);
        }
    }

    fn domain(threshold: usize) -> Arc<StampIt> {
        Arc::new(StampIt::new(StampItConfig {
            threshold,
            ..Default::default()
        }))
    }

    fn retire(h: &Handle<StampIt>, id: u32, log: &Arc<Mutex<Vec<u32>>>) {
        let p = h.alloc(Tracked {
            id,
            log: log.clone(),
        });
        unsafe { h.retire(p) };
    }

    #[test]
    fn lone_thread_reclaims_at_leave() {
        let d = domain(20);
        let log = Arc::default();
        let h = Handle::register(&d);
        {
            let _r = h.region();
            retire(&h, 1, &log);
            assert!(log.lock().unwrap().is_empty());
        }
        assert_eq!(*log.lock().unwrap(), vec![1]);
    }

    #[test]
    fn nested_regions_draw_one_stamp() {
        let d = domain(20);
        let h = Handle::register(&d);
        let r1 = h.region();
        let before = d.pool().highest_stamp();
        let r2 = h.region();
        assert_eq!(d.pool().highest_stamp(), before);
        drop(r2);
        drop(r1);
    }

    #[test]
    fn reentry_draws_a_larger_stamp() {
        let d = domain(20);
        let h = Handle::register(&d);
        let first = {
            let _r = h.region();
            d.pool().highest_stamp()
        };
        let second = {
            let _r = h.region();
            d.pool().highest_stamp()
        };
        assert!(second > first);
    }

    #[test]
    fn reader_blocks_reclamation_until_it_leaves() {
        let d = domain(20);
        let log = Arc::default();
        let reader = Handle::register(&d);
        let writer = Handle::register(&d);
        let r = reader.region();
        {
            let _w = writer.region();
            retire(&writer, 7, &log);
        }
        assert!(log.lock().unwrap().is_empty());
        drop(r);
        assert!(log.lock().unwrap().is_empty(), "writer's list is local");
        {
            let _w = writer.region();
        }
        assert_eq!(*log.lock().unwrap(), vec![7]);
    }

    #[test]
    fn local_prefix_respects_lowest() {
        let d = domain(20);
        let counters = Counters::default();
        let mut list: RetireList = [4u64, 8, 20]
            .into_iter()
            .map(|stamp| Entry {
                stamp,
                node: unsafe { Retired::new(Box::into_raw(Box::new(0u64))) },
            })
            .collect();
        // Route reclamation through the system hook for plain boxes.
        assert_eq!(d.reclaim_prefix(&mut list, 8, &counters), 2);
        assert_eq!(list.iter().map(|e| e.stamp).collect::<Vec<_>>(), vec![20]);
        assert_eq!(d.reclaim_prefix(&mut list, 8, &counters), 0);
        let mut empty = RetireList::new();
        assert_eq!(d.reclaim_prefix(&mut empty, 100, &counters), 0);
        d.reclaim_prefix(&mut list, 20, &counters);
    }

    #[test]
    fn global_sublists_drain_prefixes() {
        let d = domain(20);
        let counters = Counters::default();
        let mk = |stamps: &[u64]| -> RetireList {
            stamps
                .iter()
                .map(|&stamp| Entry {
                    stamp,
                    node: unsafe { Retired::new(Box::into_raw(Box::new(0u64))) },
                })
                .collect()
        };
        d.push_sublist(mk(&[12, 16]));
        d.push_sublist(mk(&[4, 8]));
        // Raise lowest to 12 by cycling a block through the pool.
        let b = d.pool.acquire_block();
        while d.pool.lowest_stamp() < 12 {
            d.pool.push(b);
            d.pool.remove(b);
        }
        assert_eq!(d.pool.lowest_stamp(), 12);
        assert_eq!(d.reclaim_global(&counters), 3);
        assert_eq!(d.global_stamps(), vec![vec![16]]);
    }

    #[test]
    fn long_local_list_moves_to_global() {
        let d = domain(20);
        let log = Arc::default();
        let pin = Handle::register(&d);
        let h = Handle::register(&d);
        let _p = pin.region();
        {
            let _r = h.region();
            for i in 0..21 {
                retire(&h, i, &log);
            }
        }
        assert!(d.local_stamps(h.local()).is_empty());
        assert_eq!(d.global_stamps().len(), 1);
        {
            let _r = h.region();
            for i in 0..20 {
                retire(&h, 100 + i, &log);
            }
        }
        assert_eq!(d.local_stamps(h.local()).len(), 20);
        drop(_p);
        assert_eq!(log.lock().unwrap().len(), 21);
    }

    #[test]
    fn exit_flushes_everything() {
        let d = domain(20);
        let log = Arc::default();
        let a = Handle::register(&d);
        let b = Handle::register(&d);
        {
            let _ra = a.region();
            let _rb = b.region();
            retire(&a, 1, &log);
            retire(&b, 2, &log);
            retire(&b, 3, &log);
        }
        drop(a);
        drop(b);
        assert_eq!(log.lock().unwrap().len(), 3);
        assert_eq!(d.core().stats.snapshot().unreclaimed(), 0);
    }

    #[test]
    fn domain_drop_reclaims_leftovers() {
        let log: Arc<Mutex<Vec<u32>>> = Arc::default();
        {
            let d = domain(20);
            let entries = (0..3)
                .map(|id| Entry {
                    stamp: 1 << 40,
                    node: unsafe {
                        Retired::new(Box::into_raw(Box::new(Tracked {
                            id,
                            log: log.clone(),
                        })))
                    },
                })
                .collect();
            d.push_sublist(entries);
        }
        assert_eq!(*log.lock().unwrap(), vec![0, 1, 2]);
    }
}
