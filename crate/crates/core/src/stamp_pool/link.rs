//! Versioned, markable links between pool blocks.
//!
//! A link is one 64-bit word: `[payload:46 | tag:17 | mark:1]`, where the
//! payload is the block address shifted right by the block alignment. Every
//! successful update bumps the tag, so a CAS armed with a stale value fails
//! even if the address has come back.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use super::Block;
use crate::sched::yield_point;

pub const TAG_BITS: u32 = 17;
pub const TAG_MASK: u64 = (1 << TAG_BITS) - 1;
const MARK: u64 = 1;
const PAYLOAD_SHIFT: u32 = TAG_BITS + 1;
pub(super) const ALIGN_SHIFT: u32 = 7;

#[derive(Clone, Copy, PartialEq, Eq, Default)]
pub struct LinkVal(u64);

impl LinkVal {
    pub fn new(target: *const Block, tag: u64, marked: bool) -> Self {
        let addr = target as u64;
        debug_assert_eq!(addr & ((1 << ALIGN_SHIFT) - 1), 0, "misaligned block");
        debug_assert!(
            addr >> (ALIGN_SHIFT + 64 - PAYLOAD_SHIFT) == 0,
            "address too wide"
        );
        LinkVal(((addr >> ALIGN_SHIFT) << PAYLOAD_SHIFT) | ((tag & TAG_MASK) << 1) | marked as u64)
    }

    pub fn from_raw(raw: u64) -> Self {
        LinkVal(raw)
    }

    pub fn raw(self) -> u64 {
        self.0
    }

    pub fn get(self) -> *const Block {
        ((self.0 >> PAYLOAD_SHIFT) << ALIGN_SHIFT) as *const Block
    }

    pub fn tag(self) -> u64 {
        (self.0 >> 1) & TAG_MASK
    }

    pub fn is_marked(self) -> bool {
        self.0 & MARK != 0
    }

    pub fn is_null(self) -> bool {
        self.get().is_null()
    }

    /// The block this link targets. Pool blocks are never freed while the
    /// pool is alive, so the reference is always valid for a pool access.
    pub(super) fn block<'a>(self) -> &'a Block {
        debug_assert!(!self.is_null());
        // SAFETY: see above; callers only follow links of a live pool.
        unsafe { &*self.get() }
    }

    /// The value a successful CAS from `self` installs when retargeting to
    /// `target`: unmarked, tag advanced.
    fn successor(self, target: *const Block, marked: bool) -> Self {
        LinkVal::new(target, self.tag().wrapping_add(1), marked)
    }
}

impl fmt::Debug for LinkVal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:p}#{}{}",
            self.get(),
            self.tag(),
            if self.is_marked() { "*" } else { "" }
        )
    }
}

#[derive(Default)]
pub struct Link(AtomicU64);

impl Link {
    pub fn new(v: LinkVal) -> Self {
        Link(AtomicU64::new(v.0))
    }

    pub fn load(&self) -> LinkVal {
        yield_point();
        LinkVal(self.0.load(Ordering::Acquire))
    }

    /// Reads without a yield point; for inspection while all threads are
    /// parked.
    pub fn peek(&self) -> LinkVal {
        LinkVal(self.0.load(Ordering::Acquire))
    }

    /// Retargets from exactly `expected` (address, tag and mark) to an
    /// unmarked link to `target`.
    pub fn cas(&self, expected: LinkVal, target: *const Block) -> Result<LinkVal, LinkVal> {
        self.cas_raw(expected, expected.successor(target, false))
    }

    fn cas_raw(&self, expected: LinkVal, desired: LinkVal) -> Result<LinkVal, LinkVal> {
        yield_point();
        self.0
            .compare_exchange(expected.0, desired.0, Ordering::AcqRel, Ordering::Acquire)
            .map(LinkVal)
            .map_err(LinkVal)
    }

    /// Same target, tag advanced. Used to invalidate concurrent CASes armed
    /// with `expected`.
    pub fn bump(&self, expected: LinkVal) -> bool {
        self.cas_raw(
            expected,
            expected.successor(expected.get(), expected.is_marked()),
        )
        .is_ok()
    }

    /// Unconditional retarget; still advances the tag so concurrent CASes
    /// fail. Returns the value written.
    pub fn store(&self, target: *const Block) -> LinkVal {
        let mut cur = self.load();
        loop {
            let desired = cur.successor(target, false);
            match self.cas_raw(cur, desired) {
                Ok(_) => return desired,
                Err(actual) => cur = actual,
            }
        }
    }

    /// Sets the delete mark. Returns the value observed before marking.
    pub fn set_mark(&self) -> LinkVal {
        let mut cur = self.load();
        loop {
            if cur.is_marked() {
                return cur;
            }
            match self.cas_raw(cur, cur.successor(cur.get(), true)) {
                Ok(_) => return cur,
                Err(actual) => cur = actual,
            }
        }
    }

    /// One attempt at setting the mark on `expected`; the failure value
    /// reports what was found instead.
    pub fn try_mark(&self, expected: LinkVal) -> Result<LinkVal, LinkVal> {
        self.cas_raw(expected, expected.successor(expected.get(), true))
    }

    /// Initialisation only: writes without a version bump.
    pub(super) fn init(&self, v: LinkVal) {
        self.0.store(v.0, Ordering::Release)
    }
}

impl fmt::Debug for Link {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.peek().fmt(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block() -> Box<Block> {
        Box::new(Block::detached())
    }

    #[test]
    fn layout_round_trip() {
        let b = block();
        let v = LinkVal::new(&*b, 5, true);
        assert_eq!(v.get(), &*b as *const Block);
        assert_eq!(v.tag(), 5);
        assert!(v.is_marked());
    }

    #[test]
    fn tag_wraps_after_full_cycle() {
        let b = block();
        let link = Link::new(LinkVal::new(&*b, 0, false));
        let initial = link.peek();
        for _ in 0..(1u64 << TAG_BITS) {
            let cur = link.peek();
            assert!(link.cas(cur, &*b).is_ok());
        }
        assert_eq!(link.peek(), initial);
    }

    #[test]
    fn stale_tag_cas_fails() {
        let a = block();
        let b = block();
        let link = Link::new(LinkVal::new(&*a, 0, false));
        let stale = link.peek();
        assert!(link.cas(stale, &*b).is_ok());
        assert!(link.cas(link.peek(), &*a).is_ok());
        assert_eq!(link.peek().get(), stale.get());
        assert!(link.cas(stale, &*b).is_err());
    }

    #[test]
    fn set_mark_is_idempotent_and_keeps_target() {
        let a = block();
        let link = Link::new(LinkVal::new(&*a, 3, false));
        let before = link.set_mark();
        assert!(!before.is_marked());
        let again = link.set_mark();
        assert!(again.is_marked());
        assert_eq!(link.peek().get(), &*a as *const Block);
    }

    #[test]
    fn store_clears_mark_and_bumps_tag() {
        let a = block();
        let link = Link::new(LinkVal::new(&*a, TAG_MASK, true));
        let written = link.store(&*a);
        assert!(!written.is_marked());
        assert_eq!(written.tag(), 0);
        assert_eq!(link.peek(), written);
    }
}
