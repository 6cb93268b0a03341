//! The stamp pool: a lock-free doubly-linked list of per-thread blocks
//! ordered by the stamp each thread drew when it entered its critical region.
//!
//! `head` and `tail` are dummy blocks. `head.stamp` is the next stamp to be
//! handed out; `tail.stamp` is a lower bound on the stamp of every block in
//! the list. Following `prev` links from `head` always yields a consistent
//! list ending at `tail`; `next` links are only hints.
//!
//! Internally every stamp is offset by [`BIAS`] so the pending encoding
//! `stamp - (INC - PENDING_PUSH)` never underflows. Public accessors return
//! unbiased values.

mod link;

pub use link::{Link, LinkVal, TAG_BITS, TAG_MASK};

use std::fmt;
use std::sync::atomic::{fence, AtomicU64, Ordering};
use std::sync::Mutex;

use crate::sched::yield_point;

pub const PENDING_PUSH: u64 = 1;
pub const NOT_IN_LIST: u64 = 2;
pub const FLAGS: u64 = PENDING_PUSH | NOT_IN_LIST;
pub const STAMP_INC: u64 = 4;
pub const BIAS: u64 = STAMP_INC;

/// A thread's entry in the pool. Blocks are owned by the pool, live as long
/// as it does and are recycled between threads.
#[repr(align(128))]
pub struct Block {
    prev: Link,
    next: Link,
    stamp: AtomicU64,
    id: usize,
}

const _: () = assert!(std::mem::align_of::<Block>() == 1 << link::ALIGN_SHIFT);

impl Block {
    fn detached() -> Self {
        Block {
            prev: Link::default(),
            next: Link::default(),
            stamp: AtomicU64::new(NOT_IN_LIST),
            id: usize::MAX,
        }
    }

    fn load_stamp(&self) -> u64 {
        yield_point();
        self.stamp.load(Ordering::Acquire)
    }

    fn store_stamp(&self, v: u64) {
        yield_point();
        self.stamp.store(v, Ordering::Release)
    }

    fn cas_stamp(&self, expected: u64, desired: u64) -> Result<u64, u64> {
        yield_point();
        self.stamp
            .compare_exchange(expected, desired, Ordering::AcqRel, Ordering::Acquire)
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Raw (biased, flagged) stamp word, without a yield point.
    pub fn peek_stamp(&self) -> u64 {
        self.stamp.load(Ordering::Acquire)
    }

    pub fn peek_prev(&self) -> LinkVal {
        self.prev.peek()
    }

    pub fn peek_next(&self) -> LinkVal {
        self.next.peek()
    }

    fn addr(&self) -> *const Block {
        self
    }
}

impl fmt::Debug for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Block")
            .field("id", &self.id)
            .field("stamp", &self.peek_stamp())
            .field("prev", &self.prev)
            .field("next", &self.next)
            .finish()
    }
}

/// The four legal block states, decided from the flags and the two marks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockState {
    Inserting,
    InQueue,
    Removing,
    Removed,
}

/// Classifies a `(stamp word, prev, next)` triple, or returns `None` if the
/// combination is not a legal state.
pub fn classify(stamp: u64, prev: LinkVal, next: LinkVal) -> Option<BlockState> {
    let pending = stamp & PENDING_PUSH != 0;
    let not_in_list = stamp & NOT_IN_LIST != 0;
    match (pending, not_in_list) {
        (true, true) => None,
        (true, false) => (!next.is_marked()).then_some(BlockState::Inserting),
        (false, true) => prev.is_marked().then_some(BlockState::Removed),
        (false, false) if prev.is_marked() => Some(BlockState::Removing),
        (false, false) => (!next.is_marked()).then_some(BlockState::InQueue),
    }
}

pub struct StampPool {
    head: Box<Block>,
    tail: Box<Block>,
    // Boxed so block addresses stay stable while the vector grows.
    #[allow(clippy::vec_box)]
    arena: Mutex<Vec<Box<Block>>>,
    free: Mutex<Vec<usize>>,
}

// SAFETY: all shared state is atomics or behind mutexes.
unsafe impl Send for StampPool {}
unsafe impl Sync for StampPool {}

impl Default for StampPool {
    fn default() -> Self {
        Self::new(0)
    }
}

impl StampPool {
    /// A pool whose first assigned stamp is `initial` (a multiple of 4).
    pub fn new(initial: u64) -> Self {
        assert_eq!(
            initial % STAMP_INC,
            0,
            "initial stamp must be a multiple of 4"
        );
        let pool = StampPool {
            head: Box::new(Block::detached()),
            tail: Box::new(Block::detached()),
            arena: Mutex::new(Vec::new()),
            free: Mutex::new(Vec::new()),
        };
        let s = initial + BIAS;
        pool.head.stamp.store(s, Ordering::Relaxed);
        pool.tail.stamp.store(s, Ordering::Relaxed);
        pool.head.prev.init(LinkVal::new(pool.tail(), 0, false));
        pool.tail.next.init(LinkVal::new(pool.head(), 0, false));
        pool
    }

    pub fn head(&self) -> &Block {
        &self.head
    }

    pub fn tail(&self) -> &Block {
        &self.tail
    }

    /// Hands out a fully removed block, recycling parked ones first.
    pub fn acquire_block(&self) -> &Block {
        let mut arena = self.arena.lock().unwrap();
        if let Some(i) = self.free.lock().unwrap().pop() {
            let b: *const Block = &*arena[i];
            // SAFETY: boxed blocks are never moved or freed while the pool lives.
            return unsafe { &*b };
        }
        let mut b = Box::new(Block::detached());
        b.id = arena.len();
        b.prev.init(LinkVal::new(self.tail(), 0, true));
        b.next.init(LinkVal::new(self.head(), 0, true));
        let p: *const Block = &*b;
        arena.push(b);
        // SAFETY: as above.
        unsafe { &*p }
    }

    /// Parks a fully removed block for reuse by another thread.
    pub fn release_block(&self, b: &Block) {
        debug_assert_ne!(b.peek_stamp() & NOT_IN_LIST, 0);
        self.free.lock().unwrap().push(b.id);
    }

    /// All blocks ever created, for inspection.
    pub fn blocks(&self) -> Vec<&Block> {
        let arena = self.arena.lock().unwrap();
        arena
            .iter()
            .map(|b| {
                let p: *const Block = &**b;
                // SAFETY: as in `acquire_block`.
                unsafe { &*p }
            })
            .collect()
    }

    /// The next stamp to be assigned.
    pub fn highest_stamp(&self) -> u64 {
        yield_point();
        self.head.stamp.load(Ordering::Acquire) - BIAS
    }

    /// A lower bound on the stamps of all blocks in the list.
    pub fn lowest_stamp(&self) -> u64 {
        yield_point();
        (self.tail.stamp.load(Ordering::Acquire) & !FLAGS) - BIAS
    }

    /// Unbiased stamp of a block with flags masked.
    pub fn public_stamp(raw: u64) -> u64 {
        (raw & !FLAGS).saturating_sub(BIAS)
    }

    /// Inserts `b` right after `head` and returns its stamp.
    pub fn push(&self, b: &Block) -> u64 {
        let head = self.head();
        b.next.store(head);
        let mut head_prev = head.prev.load();
        let (stamp, my_prev, my_prev_link) = loop {
            let head_prev2 = head.prev.load();
            if head_prev != head_prev2 {
                head_prev = head_prev2;
                continue;
            }
            yield_point();
            let stamp = head.stamp.fetch_add(STAMP_INC, Ordering::SeqCst);
            b.store_stamp(stamp - (STAMP_INC - PENDING_PUSH));
            if head.prev.load() != head_prev {
                continue;
            }
            let written = b.prev.store(head_prev.get());
            if head.prev.cas(head_prev, b).is_ok() {
                break (stamp, head_prev, written);
            }
        };
        b.store_stamp(stamp);

        let pred = my_prev.block();
        let mut link = pred.next.load();
        loop {
            if link.get() == b.addr() || link.is_marked() || b.prev.load() != my_prev_link {
                break;
            }
            match pred.next.cas(link, b) {
                Ok(_) => break,
                Err(actual) => link = actual,
            }
        }
        // Entering a region: later loads of shared data must not move above
        // the publication of our stamp.
        fence(Ordering::SeqCst);
        stamp - BIAS
    }

    /// Unlinks `b` and reports whether it was the oldest block.
    pub fn remove(&self, b: &Block) -> bool {
        let mut prev = b.prev.set_mark();
        let mut next = b.next.set_mark();
        let fully_removed = self.remove_from_prev_list(&mut prev, b, &mut next);
        if !fully_removed {
            self.remove_from_next_list(prev, b, next);
        }
        let stamp = b.load_stamp();
        b.store_stamp(stamp + NOT_IN_LIST);
        let was_last = b.prev.load().get() == self.tail().addr();
        if was_last {
            self.update_tail_stamp(stamp + STAMP_INC);
        }
        was_last
    }

    fn remove_from_prev_list(&self, prev: &mut LinkVal, b: &Block, next: &mut LinkVal) -> bool {
        let my_stamp = b.load_stamp();
        let mut last = LinkVal::default();
        loop {
            if next.get() == prev.get() {
                *next = b.next.load();
                return false;
            }
            let prev_prev = prev.block().prev.load();
            let prev_stamp = prev.block().load_stamp();
            if prev_stamp > my_stamp || prev_stamp & NOT_IN_LIST != 0 {
                return true;
            }
            if prev_prev.is_marked() {
                if !self.mark_next(prev.block(), prev_stamp) {
                    return true;
                }
                *prev = prev.block().prev.load();
                continue;
            }
            let next_prev = next.block().prev.load();
            let next_stamp = next.block().load_stamp();
            if next_prev != next.block().prev.load() {
                continue;
            }
            if next_stamp < my_stamp {
                *next = b.next.load();
                return false;
            }
            if next_stamp & (NOT_IN_LIST | PENDING_PUSH) != 0 {
                if !last.is_null() {
                    *next = last;
                    last = LinkVal::default();
                } else {
                    *next = next.block().next.load();
                }
                continue;
            }
            if self.remove_or_skip_marked_block(next, &mut last, next_prev, next_stamp) {
                continue;
            }
            if next_prev.get() != b.addr() {
                self.move_next(next_prev, next, &mut last);
                continue;
            }
            if next.block().prev.cas(next_prev, prev.get()).is_ok() {
                return false;
            }
        }
    }

    fn remove_from_next_list(&self, mut prev: LinkVal, removed: &Block, mut next: LinkVal) {
        let my_stamp = removed.load_stamp();
        let mut last = LinkVal::default();
        loop {
            let next_prev = next.block().prev.load();
            let next_stamp = next.block().load_stamp();
            if next_prev != next.block().prev.load() {
                continue;
            }
            if next_stamp & (NOT_IN_LIST | PENDING_PUSH) != 0 {
                if !last.is_null() {
                    next = last;
                    last = LinkVal::default();
                } else {
                    next = next.block().next.load();
                }
                continue;
            }
            let prev_next = prev.block().next.load();
            let prev_stamp = prev.block().load_stamp();
            if prev_stamp > my_stamp || prev_stamp & NOT_IN_LIST != 0 {
                return;
            }
            if prev_next.is_marked() {
                prev = prev.block().prev.load();
                continue;
            }
            if next.get() == prev.get() {
                return;
            }
            if self.remove_or_skip_marked_block(&mut next, &mut last, next_prev, next_stamp) {
                continue;
            }
            if next_prev.get() != prev.get() {
                self.move_next(next_prev, &mut next, &mut last);
                continue;
            }
            if next_stamp <= my_stamp || prev_next.get() == next.get() {
                return;
            }
            if next.block().prev.load() == next_prev
                && prev.block().next.cas(prev_next, next.get()).is_ok()
                && !next.block().next.load().is_marked()
            {
                return;
            }
        }
    }

    /// Marks `b.next` as long as `b` still carries `stamp`. Returns false
    /// once the stamp has changed.
    fn mark_next(&self, b: &Block, stamp: u64) -> bool {
        let mut link = b.next.load();
        while b.load_stamp() == stamp {
            if link.is_marked() {
                return true;
            }
            match b.next.try_mark(link) {
                Ok(_) => return true,
                Err(actual) => link = actual,
            }
        }
        false
    }

    fn move_next(&self, next_prev: LinkVal, next: &mut LinkVal, last: &mut LinkVal) {
        let target = next_prev.block();
        let s = target.load_stamp();
        if s & PENDING_PUSH != 0 && next_prev == next.block().prev.load() {
            let desired = s + STAMP_INC - PENDING_PUSH;
            if let Err(actual) = target.cas_stamp(s, desired) {
                if actual != desired {
                    return;
                }
            }
        }
        *last = *next;
        *next = next_prev;
    }

    fn remove_or_skip_marked_block(
        &self,
        next: &mut LinkVal,
        last: &mut LinkVal,
        next_prev: LinkVal,
        next_stamp: u64,
    ) -> bool {
        if !next_prev.is_marked() {
            return false;
        }
        if !last.is_null() {
            if self.mark_next(next.block(), next_stamp) && last.block().prev.load() == *next {
                let _ = last.block().prev.cas(*next, next_prev.get());
            }
            *next = *last;
            *last = LinkVal::default();
        } else {
            *next = next.block().next.load();
        }
        true
    }

    fn update_tail_stamp(&self, fallback: u64) {
        let head = self.head();
        let tail = self.tail();
        let mut stamp = fallback;
        let last = tail.next.load();
        let last_prev = last.block().prev.load();
        let last_stamp = last.block().load_stamp();
        if last_stamp > stamp
            && last_stamp & FLAGS == 0
            && last_prev.get() == tail.addr()
            && tail.next.load() == last
        {
            if last.get() != head.addr() {
                stamp = last_stamp;
            } else if stamp < last_stamp - STAMP_INC && head.prev.bump(last_prev) {
                // The bump fails any push that read `head.prev` before it,
                // so no block can slip in below `last_stamp`.
                stamp = last_stamp;
            }
        }
        let mut current = tail.load_stamp();
        while current < stamp {
            match tail.cas_stamp(current, stamp) {
                Ok(_) => break,
                Err(actual) => current = actual,
            }
        }
    }

    /// Stamps along the `prev` direction from `head` to `tail`, excluding
    /// both dummies. Only meaningful while the pool is quiescent.
    pub fn prev_chain(&self) -> Result<Vec<&Block>, String> {
        let mut out = Vec::new();
        let mut cur = self.head.prev.peek();
        let limit = self.arena.lock().unwrap().len() + 1;
        while cur.get() != self.tail().addr() {
            if cur.is_null() || out.len() > limit {
                return Err("prev chain does not reach tail".into());
            }
            let b = cur.block();
            out.push(b);
            cur = b.prev.peek();
        }
        Ok(out)
    }
}

impl fmt::Debug for StampPool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StampPool")
            .field("highest", &(self.head.peek_stamp() - BIAS))
            .field("lowest", &Self::public_stamp(self.tail.peek_stamp()))
            .finish()
    }
}

#[cfg(test)]
mod tests;
