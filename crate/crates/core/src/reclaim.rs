//! The scheme-agnostic reclamation interface.
//!
//! A reclamation scheme is an `Arc`-shared domain implementing [`Scheme`].
//! Every participating thread registers a [`Handle`] with the domain and uses
//! it to create [`Guard`]s (which pin a single node against reclamation) and
//! [`RegionGuard`]s (which keep the thread inside a critical region so that
//! guards created within it can share the region instead of entering their
//! own).
//!
//! Nodes handed to a scheme must be allocated through [`Handle::alloc`] so the
//! domain can route their destruction through its allocator hook and keep the
//! allocated/reclaimed counters consistent.

use std::alloc::Layout;
use std::cell::Cell;
use std::fmt;
use std::marker::PhantomData;
use std::ops::Deref;
use std::ptr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crossbeam_utils::CachePadded;

use crate::marked::{Atomic, MarkedPtr};

/// A node that has been unlinked and handed over for deferred destruction.
pub struct Retired {
    ptr: *mut u8,
    layout: Layout,
    drop_fn: unsafe fn(*mut u8),
}

// SAFETY: once retired, a node is owned by the scheme; its payload is only
// dropped by whichever thread reclaims it.
unsafe impl Send for Retired {}

unsafe fn drop_erased<T>(p: *mut u8) {
    ptr::drop_in_place(p.cast::<T>())
}

impl Retired {
    /// # Safety
    /// `ptr` must come from [`Handle::alloc`] of the same domain, must be
    /// unlinked from every shared structure and must not be retired twice.
    pub unsafe fn new<T>(ptr: *mut T) -> Self {
        Retired {
            ptr: ptr.cast(),
            layout: Layout::new::<T>(),
            drop_fn: drop_erased::<T>,
        }
    }

    pub fn address(&self) -> usize {
        self.ptr as usize
    }

    /// Runs the deleter and returns the memory to the allocator hook.
    ///
    /// # Safety
    /// No thread may still reference the node.
    pub(crate) unsafe fn reclaim(self, core: &DomainCore, counters: &Counters) {
        (self.drop_fn)(self.ptr);
        core.hook.release(self.ptr, self.layout);
        counters.bump_reclaimed(1);
    }
}

impl fmt::Debug for Retired {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Retired({:p})", self.ptr)
    }
}

/// Pluggable allocation strategy for nodes managed by a domain.
#[derive(Debug, Default)]
pub enum AllocHook {
    /// The global allocator.
    #[default]
    System,
    /// Destroys nodes on reclaim but parks their memory until the domain is
    /// dropped, so a use-after-reclaim reads a poisoned canary instead of
    /// recycled memory.
    Quarantine(Quarantine),
}

#[derive(Debug, Default)]
pub struct Quarantine {
    parked: Mutex<Vec<(usize, Layout)>>,
}

impl AllocHook {
    pub fn quarantine() -> Self {
        AllocHook::Quarantine(Quarantine::default())
    }

    pub fn tag(&self) -> &'static str {
        match self {
            AllocHook::System => "system",
            AllocHook::Quarantine(_) => "quarantine",
        }
    }

    fn allocate(&self, layout: Layout) -> *mut u8 {
        assert!(layout.size() > 0, "zero-sized nodes are not supported");
        // SAFETY: non-zero size checked above.
        let p = unsafe { std::alloc::alloc(layout) };
        if p.is_null() {
            std::alloc::handle_alloc_error(layout);
        }
        p
    }

    unsafe fn release(&self, p: *mut u8, layout: Layout) {
        match self {
            AllocHook::System => std::alloc::dealloc(p, layout),
            AllocHook::Quarantine(q) => q.parked.lock().unwrap().push((p as usize, layout)),
        }
    }
}

impl Drop for Quarantine {
    fn drop(&mut self) {
        for (p, layout) in self.parked.get_mut().unwrap().drain(..) {
            // SAFETY: allocated by `AllocHook::allocate` with this layout.
            unsafe { std::alloc::dealloc(p as *mut u8, layout) };
        }
    }
}

/// Per-thread performance counters. Each handle owns one instance and is its
/// only writer; the domain keeps a shared instance for nodes destroyed outside
/// any handle (structure teardown, domain drop).
#[derive(Debug, Default)]
pub struct Counters {
    allocated: AtomicU64,
    reclaimed: AtomicU64,
    retired: AtomicU64,
    scan_steps: AtomicU64,
    acquisitions: AtomicU64,
    violations: AtomicU64,
    operations: AtomicU64,
}

impl Counters {
    // Writers use RMW so the shared instance stays correct under concurrent
    // teardown; readers pair with the release increments.
    fn bump(cell: &AtomicU64, n: u64) {
        cell.fetch_add(n, Ordering::Release);
    }

    pub(crate) fn bump_allocated(&self, n: u64) {
        Self::bump(&self.allocated, n)
    }

    pub(crate) fn bump_reclaimed(&self, n: u64) {
        Self::bump(&self.reclaimed, n)
    }

    pub(crate) fn bump_retired(&self, n: u64) {
        Self::bump(&self.retired, n)
    }

    pub(crate) fn bump_scan_steps(&self, n: u64) {
        if n > 0 {
            Self::bump(&self.scan_steps, n)
        }
    }

    fn bump_acquisitions(&self) {
        Self::bump(&self.acquisitions, 1)
    }

    fn bump_violations(&self) {
        Self::bump(&self.violations, 1)
    }

    /// Records completed benchmark operations.
    pub fn add_operations(&self, n: u64) {
        Self::bump(&self.operations, n)
    }

    pub fn operations(&self) -> u64 {
        self.operations.load(Ordering::Acquire)
    }
}

/// Aggregated counter values for a domain.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StatsSnapshot {
    pub allocated: u64,
    pub reclaimed: u64,
    pub retired: u64,
    pub scan_steps: u64,
    pub acquisitions: u64,
    pub violations: u64,
    pub operations: u64,
}

impl StatsSnapshot {
    pub fn unreclaimed(&self) -> u64 {
        self.allocated.saturating_sub(self.reclaimed)
    }
}

/// Registry of all counters ever attached to a domain.
#[derive(Debug, Default)]
pub struct Stats {
    registry: Mutex<Vec<Arc<CachePadded<Counters>>>>,
    detached: CachePadded<Counters>,
}

impl Stats {
    fn attach(&self) -> Arc<CachePadded<Counters>> {
        let c = Arc::new(CachePadded::new(Counters::default()));
        self.registry.lock().unwrap().push(c.clone());
        c
    }

    /// Counters for work done outside any handle.
    pub fn detached(&self) -> &Counters {
        &self.detached
    }

    /// Sums all counters. Reclaimed counts are read before allocated counts,
    /// so a concurrent sample never reports more reclaimed than allocated.
    pub fn snapshot(&self) -> StatsSnapshot {
        let registry = self.registry.lock().unwrap();
        let all = || registry.iter().map(|c| &***c).chain(Some(&*self.detached));
        let sum = |f: fn(&Counters) -> &AtomicU64| -> u64 {
            all().map(|c| f(c).load(Ordering::Acquire)).sum()
        };
        let reclaimed = sum(|c| &c.reclaimed);
        let retired = sum(|c| &c.retired);
        let allocated = sum(|c| &c.allocated);
        StatsSnapshot {
            allocated,
            reclaimed,
            retired,
            scan_steps: sum(|c| &c.scan_steps),
            acquisitions: sum(|c| &c.acquisitions),
            violations: sum(|c| &c.violations),
            operations: sum(|c| &c.operations),
        }
    }
}

/// State every scheme carries regardless of its algorithm.
#[derive(Debug, Default)]
pub struct DomainCore {
    pub stats: Stats,
    pub hook: AllocHook,
}

impl DomainCore {
    pub fn new(hook: AllocHook) -> Self {
        DomainCore {
            stats: Stats::default(),
            hook,
        }
    }

    /// Destroys a node while no handle exists (domain teardown).
    ///
    /// # Safety
    /// No thread may still reference the node.
    pub(crate) unsafe fn reclaim_detached(&self, node: Retired) {
        node.reclaim(self, &self.stats.detached);
    }
}

/// A concurrent memory reclamation scheme.
///
/// Implementations are selected statically; data structures are generic over
/// the scheme and talk to it only through [`Handle`], [`Guard`] and
/// [`RegionGuard`].
pub trait Scheme: Send + Sync + Sized + 'static {
    const NAME: &'static str;
    /// Whether a [`RegionGuard`] opens a critical region for this scheme.
    const REGION_GUARDS: bool;
    /// Whether a guard must live inside a critical region (entering one
    /// implicitly when none is active).
    const GUARDS_NEED_REGION: bool;
    /// Whether acquisition must publish the target and re-validate it.
    const VALIDATE: bool;

    /// Thread-confined state owned by a handle.
    type Local;
    /// Per-guard protection record.
    type Slot;

    fn core(&self) -> &DomainCore;
    fn register(&self) -> Self::Local;
    /// Called once when the owning handle is dropped.
    fn unregister(&self, local: &mut Self::Local, counters: &Counters);
    fn enter(&self, local: &Self::Local, counters: &Counters);
    fn leave(&self, local: &Self::Local, counters: &Counters);
    fn retire(&self, local: &Self::Local, node: Retired, counters: &Counters);

    fn acquire_slot(&self, local: &Self::Local) -> Self::Slot;
    fn release_slot(&self, local: &Self::Local, slot: Self::Slot);
    /// Publishes `addr` in `slot`. Must order the publication before any
    /// subsequent load (a full fence for hazard-style schemes).
    fn protect(&self, slot: &Self::Slot, addr: usize);

    /// Upper bound on nodes that may stay unreclaimed once no handle is
    /// registered.
    fn residual_bound(&self) -> u64 {
        0
    }
}

/// A thread's registration with a domain.
pub struct Handle<S: Scheme> {
    domain: Arc<S>,
    local: S::Local,
    depth: Cell<usize>,
    counters: Arc<CachePadded<Counters>>,
    _not_send: PhantomData<*mut ()>,
}

impl<S: Scheme> Handle<S> {
    pub fn register(domain: &Arc<S>) -> Self {
        let counters = domain.core().stats.attach();
        Handle {
            local: domain.register(),
            domain: domain.clone(),
            depth: Cell::new(0),
            counters,
            _not_send: PhantomData,
        }
    }

    pub fn domain(&self) -> &Arc<S> {
        &self.domain
    }

    pub fn local(&self) -> &S::Local {
        &self.local
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    pub fn in_region(&self) -> bool {
        self.depth.get() > 0
    }

    pub(crate) fn enter_nested(&self) {
        let d = self.depth.get();
        if d == 0 {
            self.domain.enter(&self.local, &self.counters);
        }
        self.depth.set(d + 1);
    }

    pub(crate) fn leave_nested(&self) {
        let d = self.depth.get();
        debug_assert!(d > 0, "unbalanced region exit");
        self.depth.set(d - 1);
        if d == 1 {
            self.domain.leave(&self.local, &self.counters);
        }
    }

    /// Opens a critical region spanning the returned guard's lifetime.
    /// Nested region guards collapse into the outermost one.
    pub fn region(&self) -> RegionGuard<'_, S> {
        if S::REGION_GUARDS {
            self.enter_nested();
        }
        RegionGuard { handle: self }
    }

    /// An empty guard.
    pub fn guard<T, const N: u32>(&self) -> Guard<'_, T, S, N> {
        Guard {
            handle: self,
            target: MarkedPtr::null(),
            slot: None,
            in_region: false,
        }
    }

    pub fn acquire<T, const N: u32>(&self, src: &Atomic<T, N>) -> Guard<'_, T, S, N> {
        let mut g: Guard<'_, T, S, N> = self.guard();
        g.acquire(src);
        g
    }

    /// Allocates a node that may later be retired through this domain.
    pub fn alloc<T>(&self, value: T) -> *mut T {
        let p = self
            .domain
            .core()
            .hook
            .allocate(Layout::new::<T>())
            .cast::<T>();
        // SAFETY: fresh allocation with T's layout.
        unsafe { p.write(value) };
        self.counters.bump_allocated(1);
        p
    }

    /// Destroys a node that was never published to other threads.
    ///
    /// # Safety
    /// `p` must come from [`Handle::alloc`] on this domain and be unshared.
    pub unsafe fn free_unpublished<T>(&self, p: *mut T) {
        Retired::new(p).reclaim(self.domain.core(), &self.counters);
    }

    /// Hands an unlinked node to the scheme.
    ///
    /// # Safety
    /// Same contract as [`Retired::new`].
    pub unsafe fn retire<T>(&self, p: *mut T) {
        self.retire_node(Retired::new(p));
    }

    pub(crate) fn retire_node(&self, node: Retired) {
        self.counters.bump_retired(1);
        if S::GUARDS_NEED_REGION {
            self.enter_nested();
            self.domain.retire(&self.local, node, &self.counters);
            self.leave_nested();
        } else {
            self.domain.retire(&self.local, node, &self.counters);
        }
    }

    /// Checks a canary on a guarded node, recording a violation if it has
    /// been poisoned by a deleter.
    pub fn check(&self, canary: &Canary) -> bool {
        let ok = canary.is_alive();
        if !ok {
            self.counters.bump_violations();
        }
        ok
    }
}

impl<S: Scheme> Drop for Handle<S> {
    fn drop(&mut self) {
        debug_assert_eq!(self.depth.get(), 0);
        self.domain.unregister(&mut self.local, &self.counters);
    }
}

impl<S: Scheme> fmt::Debug for Handle<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Handle")
            .field("scheme", &S::NAME)
            .field("depth", &self.depth.get())
            .finish()
    }
}

/// Keeps the owning thread inside a critical region while alive.
pub struct RegionGuard<'h, S: Scheme> {
    handle: &'h Handle<S>,
}

impl<S: Scheme> Drop for RegionGuard<'_, S> {
    fn drop(&mut self) {
        if S::REGION_GUARDS {
            self.handle.leave_nested();
        }
    }
}

/// Pins one node against reclamation while it holds a target.
///
/// Moving a guard moves its protection; `save = cur` in a traversal is a
/// plain Rust move.
pub struct Guard<'h, T, S: Scheme, const N: u32 = 1> {
    handle: &'h Handle<S>,
    target: MarkedPtr<T, N>,
    slot: Option<S::Slot>,
    in_region: bool,
}

impl<'h, T, S: Scheme, const N: u32> Guard<'h, T, S, N> {
    fn prepare(&mut self) {
        if S::GUARDS_NEED_REGION && !self.in_region {
            self.handle.enter_nested();
            self.in_region = true;
        }
        if S::VALIDATE && self.slot.is_none() {
            self.slot = Some(self.handle.domain.acquire_slot(&self.handle.local));
        }
        self.handle.counters.bump_acquisitions();
    }

    fn publish(&self, addr: usize) {
        if let Some(slot) = &self.slot {
            self.handle.domain.protect(slot, addr);
        }
    }

    /// Takes a protected snapshot of `src`; loops until the snapshot is
    /// stable under schemes that need validation.
    pub fn acquire(&mut self, src: &Atomic<T, N>) -> MarkedPtr<T, N> {
        self.prepare();
        let mut value = src.load(Ordering::Acquire);
        if S::VALIDATE {
            loop {
                self.publish(value.get() as usize);
                let again = src.load(Ordering::Acquire);
                if again == value {
                    break;
                }
                value = again;
            }
        }
        self.target = value;
        value
    }

    /// Protects `expected` if `src` holds exactly that packed word (address
    /// and marks). Bounded: gives up instead of retrying.
    pub fn acquire_if_equal(&mut self, src: &Atomic<T, N>, expected: MarkedPtr<T, N>) -> bool {
        self.prepare();
        if src.load(Ordering::Acquire) != expected {
            self.clear_target();
            return false;
        }
        if S::VALIDATE {
            self.publish(expected.get() as usize);
            if src.load(Ordering::Acquire) != expected {
                self.clear_target();
                return false;
            }
        }
        self.target = expected;
        true
    }

    /// Takes protection of a node the caller allocated and has not published
    /// yet (so it cannot have been retired).
    ///
    /// # Safety
    /// `p` must be a live, unpublished node of this domain.
    pub unsafe fn adopt(&mut self, p: MarkedPtr<T, N>) {
        self.prepare();
        self.publish(p.get() as usize);
        self.target = p;
    }

    fn clear_target(&mut self) {
        if self.slot.is_some() {
            self.publish(0);
        }
        self.target = MarkedPtr::null();
    }

    pub fn get(&self) -> MarkedPtr<T, N> {
        self.target
    }

    pub fn is_null(&self) -> bool {
        self.target.is_null()
    }

    pub fn as_ref(&self) -> Option<&T> {
        // SAFETY: a non-null target is protected for as long as we hold it.
        unsafe { self.target.as_ref() }
    }

    pub fn handle(&self) -> &'h Handle<S> {
        self.handle
    }

    /// Withdraws protection and leaves the implicit region if this guard
    /// opened one. Idempotent.
    pub fn reset(&mut self) {
        self.clear_target();
        if let Some(slot) = self.slot.take() {
            self.handle.domain.release_slot(&self.handle.local, slot);
        }
        if self.in_region {
            self.in_region = false;
            self.handle.leave_nested();
        }
    }

    /// Retires the target and resets the guard.
    ///
    /// # Safety
    /// The caller must have unlinked the target from all shared structures
    /// and must be the only thread retiring it.
    ///
    /// # Panics
    /// Panics if the guard is empty.
    pub unsafe fn reclaim(&mut self) {
        assert!(!self.target.is_null(), "reclaim on an empty guard");
        let node = Retired::new(self.target.get());
        self.clear_target();
        // Retire while our own region (if any) is still open.
        self.handle.retire_node(node);
        self.reset();
    }

    /// Moves the protection out, leaving `self` empty.
    pub fn take(&mut self) -> Self {
        std::mem::replace(self, self.handle.guard())
    }
}

impl<T, S: Scheme, const N: u32> Deref for Guard<'_, T, S, N> {
    type Target = T;

    fn deref(&self) -> &T {
        self.as_ref().expect("dereferenced an empty guard")
    }
}

impl<T, S: Scheme, const N: u32> Drop for Guard<'_, T, S, N> {
    fn drop(&mut self) {
        self.reset();
    }
}

impl<T, S: Scheme, const N: u32> fmt::Debug for Guard<'_, T, S, N> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Guard")
            .field("target", &self.target)
            .finish()
    }
}

const CANARY_ALIVE: u64 = 0x5AFE_C0DE_A11C_E000;
const CANARY_POISON: u64 = 0xDEAD_BEEF_DEAD_BEEF;

/// Sentinel word embedded in every structure node. Dropping the node poisons
/// it; reading a poisoned canary through a guard is a use-after-reclaim.
#[derive(Debug)]
pub struct Canary(AtomicU64);

impl Canary {
    pub fn new() -> Self {
        Canary(AtomicU64::new(CANARY_ALIVE))
    }

    pub fn is_alive(&self) -> bool {
        self.0.load(Ordering::Relaxed) == CANARY_ALIVE
    }
}

impl Default for Canary {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for Canary {
    fn drop(&mut self) {
        self.0.store(CANARY_POISON, Ordering::Relaxed);
    }
}
