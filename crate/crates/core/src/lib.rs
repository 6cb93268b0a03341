//! Stamp-it: lock-free concurrent memory reclamation with amortized constant
//! reclamation cost, plus hazard-pointer, epoch and quiescent-state baselines
//! and the lock-free structures used to exercise them.

pub mod baseline;
pub mod ds;
pub mod kind;
pub mod marked;
pub mod reclaim;
pub mod sched;
pub mod stamp_it;
pub mod stamp_pool;
pub mod verify;

pub use marked::{Atomic, MarkedPtr};
pub use reclaim::{
    AllocHook, Canary, Counters, DomainCore, Guard, Handle, RegionGuard, Retired, Scheme,
    StatsSnapshot,
};
