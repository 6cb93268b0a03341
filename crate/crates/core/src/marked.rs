//! Marked references: node addresses with borrowed low-order mark bits.

use std::fmt;
use std::marker::PhantomData;
use std::sync::atomic::{AtomicUsize, Ordering};

/// A node address packed together with `N` low-order mark bits.
///
/// The pointee must be aligned to at least `2^N` bytes so the borrowed bits
/// are always zero in a real address.
pub struct MarkedPtr<T, const N: u32> {
    raw: usize,
    _marker: PhantomData<*mut T>,
}

impl<T, const N: u32> MarkedPtr<T, N> {
    /// Mask covering the mark bits.
    pub const MARK_MASK: usize = (1 << N) - 1;

    const ALIGN_OK: () = assert!(
        std::mem::align_of::<T>() >= (1 << N),
        "pointee alignment too small for the requested mark bits"
    );

    pub const fn null() -> Self {
        MarkedPtr {
            raw: 0,
            _marker: PhantomData,
        }
    }

    /// Packs `ptr` with `mark`. Bits of `mark` above `N` are truncated.
    pub fn new(ptr: *mut T, mark: usize) -> Self {
        #[allow(clippy::let_unit_value)]
        let _ = Self::ALIGN_OK;
        debug_assert_eq!(ptr as usize & Self::MARK_MASK, 0, "misaligned pointer");
        MarkedPtr {
            raw: (ptr as usize) | (mark & Self::MARK_MASK),
            _marker: PhantomData,
        }
    }

    pub fn from_raw(raw: usize) -> Self {
        MarkedPtr {
            raw,
            _marker: PhantomData,
        }
    }

    pub fn into_raw(self) -> usize {
        self.raw
    }

    /// The address with mark bits cleared.
    pub fn get(self) -> *mut T {
        (self.raw & !Self::MARK_MASK) as *mut T
    }

    pub fn mark(self) -> usize {
        self.raw & Self::MARK_MASK
    }

    pub fn is_null(self) -> bool {
        self.get().is_null()
    }

    pub fn with_mark(self, mark: usize) -> Self {
        Self::new(self.get(), mark)
    }

    pub fn unmarked(self) -> Self {
        Self::from_raw(self.raw & !Self::MARK_MASK)
    }

    /// # Safety
    /// The address must be null or point to a live `T` for `'a`.
    pub unsafe fn as_ref<'a>(self) -> Option<&'a T> {
        self.get().as_ref()
    }
}

impl<T, const N: u32> Clone for MarkedPtr<T, N> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T, const N: u32> Copy for MarkedPtr<T, N> {}

impl<T, const N: u32> PartialEq for MarkedPtr<T, N> {
    fn eq(&self, other: &Self) -> bool {
        self.raw == other.raw
    }
}

impl<T, const N: u32> Eq for MarkedPtr<T, N> {}

impl<T, const N: u32> Default for MarkedPtr<T, N> {
    fn default() -> Self {
        Self::null()
    }
}

impl<T, const N: u32> fmt::Debug for MarkedPtr<T, N> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MarkedPtr")
            .field("ptr", &self.get())
            .field("mark", &self.mark())
            .finish()
    }
}

// SAFETY: a marked pointer is a plain word; dereferencing it is unsafe anyway.
unsafe impl<T, const N: u32> Send for MarkedPtr<T, N> {}
unsafe impl<T, const N: u32> Sync for MarkedPtr<T, N> {}

/// An atomic cell holding a [`MarkedPtr`]. Accesses are single-word atomics.
pub struct Atomic<T, const N: u32> {
    cell: AtomicUsize,
    _marker: PhantomData<*mut T>,
}

// SAFETY: only the packed word is shared; the pointee is managed by a scheme.
unsafe impl<T: Send + Sync, const N: u32> Send for Atomic<T, N> {}
unsafe impl<T: Send + Sync, const N: u32> Sync for Atomic<T, N> {}

impl<T, const N: u32> Atomic<T, N> {
    pub const fn null() -> Self {
        Atomic {
            cell: AtomicUsize::new(0),
            _marker: PhantomData,
        }
    }

    pub fn new(value: MarkedPtr<T, N>) -> Self {
        Atomic {
            cell: AtomicUsize::new(value.into_raw()),
            _marker: PhantomData,
        }
    }

    pub fn load(&self, order: Ordering) -> MarkedPtr<T, N> {
        MarkedPtr::from_raw(self.cell.load(order))
    }

    pub fn store(&self, value: MarkedPtr<T, N>, order: Ordering) {
        self.cell.store(value.into_raw(), order)
    }

    pub fn swap(&self, value: MarkedPtr<T, N>, order: Ordering) -> MarkedPtr<T, N> {
        MarkedPtr::from_raw(self.cell.swap(value.into_raw(), order))
    }

    /// Compares the full packed word (address and marks).
    pub fn compare_exchange(
        &self,
        current: MarkedPtr<T, N>,
        new: MarkedPtr<T, N>,
        success: Ordering,
        failure: Ordering,
    ) -> Result<MarkedPtr<T, N>, MarkedPtr<T, N>> {
        self.cell
            .compare_exchange(current.into_raw(), new.into_raw(), success, failure)
            .map(MarkedPtr::from_raw)
            .map_err(MarkedPtr::from_raw)
    }

    pub fn compare_exchange_weak(
        &self,
        current: MarkedPtr<T, N>,
        new: MarkedPtr<T, N>,
        success: Ordering,
        failure: Ordering,
    ) -> Result<MarkedPtr<T, N>, MarkedPtr<T, N>> {
        self.cell
            .compare_exchange_weak(current.into_raw(), new.into_raw(), success, failure)
            .map(MarkedPtr::from_raw)
            .map_err(MarkedPtr::from_raw)
    }
}

impl<T, const N: u32> Default for Atomic<T, N> {
    fn default() -> Self {
        Self::null()
    }
}

impl<T, const N: u32> fmt::Debug for Atomic<T, N> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.load(Ordering::Relaxed).fmt(f)
    }
}
