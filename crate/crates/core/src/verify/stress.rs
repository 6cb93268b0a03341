//! Randomized multi-threaded stress runs with canary checks.
//!
//! Every structure node carries a [`Canary`](crate::Canary) that its
//! destructor poisons, and every guarded dereference checks it. Run with
//! [`AllocHook::quarantine`] so reclaimed memory is never handed out again
//! during the run: a use-after-reclaim then reads a poisoned canary instead
//! of recycled memory.

use std::collections::HashMap as StdHashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Barrier, Mutex};
use std::thread;
use std::time::Duration;

use rand::rngs::SmallRng;
use rand::{Rng, SeedableRng};

use crate::ds::{HashMap, List, Queue};
use crate::reclaim::{Canary, Handle, Scheme, StatsSnapshot};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Structure {
    Queue,
    List,
    HashMap,
}

impl Structure {
    pub const ALL: [Structure; 3] = [Structure::Queue, Structure::List, Structure::HashMap];

    pub fn name(self) -> &'static str {
        match self {
            Structure::Queue => "queue",
            Structure::List => "list",
            Structure::HashMap => "hashmap",
        }
    }
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error)]
#[error("unknown structure `{0}` (expected queue, list or hashmap)")]
pub struct UnknownStructure(String);

impl FromStr for Structure {
    type Err = UnknownStructure;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "q" | "queue" => Ok(Structure::Queue),
            "l" | "list" => Ok(Structure::List),
            "h" | "hashmap" | "map" => Ok(Structure::HashMap),
            other => Err(UnknownStructure(other.to_string())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StressConfig {
    pub threads: usize,
    pub ops_per_thread: u64,
    pub seed: u64,
    /// Keys are drawn from `0..key_range` (list and hash map).
    pub key_range: u64,
    /// Operations per region guard.
    pub region_span: u64,
    pub map_capacity: usize,
    /// One in `pause_every` operations yields the thread, one in
    /// `64 * pause_every` sleeps briefly.
    pub pause_every: u64,
}

impl Default for StressConfig {
    fn default() -> Self {
        StressConfig {
            threads: 4,
            ops_per_thread: 10_000,
            seed: 1,
            key_range: 256,
            region_span: 100,
            map_capacity: 100,
            pause_every: 256,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StressReport {
    pub scheme: &'static str,
    pub structure: Structure,
    pub config: StressConfig,
    pub ops: u64,
    pub acquisitions: u64,
    pub violations: u64,
    pub invariant_errors: Vec<String>,
    /// Counters after the structure was torn down and every thread exited.
    pub after_exit: StatsSnapshot,
    pub residual_bound: u64,
}

impl StressReport {
    pub fn is_clean(&self) -> bool {
        self.violations == 0 && self.invariant_errors.is_empty()
    }

    /// Scan steps per completed operation.
    pub fn steps_per_op(&self) -> f64 {
        self.after_exit.scan_steps as f64 / self.ops.max(1) as f64
    }
}

impl fmt::Display for StressReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} threads={} ops={} acquisitions={} violations={} invariant_errors={} unreclaimed={} bound={} steps/op={:.3} seed={}",
            self.scheme,
            self.structure,
            self.config.threads,
            self.ops,
            self.acquisitions,
            self.violations,
            self.invariant_errors.len(),
            self.after_exit.unreclaimed(),
            self.residual_bound,
            self.steps_per_op(),
            self.config.seed,
        )
    }
}

/// Extra check run inside a region every few operations.
pub type Sweep<S> = dyn Fn(&S, &Handle<S>) -> Option<String> + Sync;

/// Checks that the pool's lowest stamp does not exceed the caller's entry
/// stamp.
pub fn stamp_sweep(
    d: &crate::stamp_it::StampIt,
    h: &Handle<crate::stamp_it::StampIt>,
) -> Option<String> {
    let stamp = d.entry_stamp(h.local())?;
    let lowest = d.pool().lowest_stamp();
    (lowest > stamp).then(|| format!("lowest stamp {lowest} above live entry stamp {stamp}"))
}

struct Payload {
    canary: Canary,
    key: u64,
    data: Vec<u8>,
}

struct Worker<'a, S: Scheme> {
    h: &'a Handle<S>,
    rng: SmallRng,
    cfg: &'a StressConfig,
    errors: Vec<String>,
}

impl<S: Scheme> Worker<'_, S> {
    fn pause(&mut self) {
        if self.cfg.pause_every == 0 {
            return;
        }
        if self.rng.gen_range(0..self.cfg.pause_every) == 0 {
            if self.rng.gen_range(0..64) == 0 {
                thread::sleep(Duration::from_micros(50));
            } else {
                thread::yield_now();
            }
        }
    }

    fn run(&mut self, domain: &S, sweep: Option<&Sweep<S>>, mut op: impl FnMut(&mut Self)) {
        let mut done = 0;
        while done < self.cfg.ops_per_thread {
            let _region = self.h.region();
            let span = self.cfg.region_span.min(self.cfg.ops_per_thread - done);
            for i in 0..span {
                op(self);
                self.pause();
                if i % 16 == 0 {
                    if let Some(e) = sweep.and_then(|f| f(domain, self.h)) {
                        self.errors.push(e);
                    }
                }
            }
            done += span;
            self.h.counters().add_operations(span);
        }
    }
}

fn spawn_workers<S: Scheme, R: Send>(
    domain: &Arc<S>,
    cfg: &StressConfig,
    body: impl Fn(usize, &mut Worker<'_, S>) -> R + Sync,
) -> Vec<(R, Vec<String>)> {
    let barrier = Barrier::new(cfg.threads);
    thread::scope(|s| {
        let handles: Vec<_> = (0..cfg.threads)
            .map(|t| {
                let barrier = &barrier;
                let body = &body;
                s.spawn(move || {
                    let h = Handle::register(domain);
                    let mut w = Worker {
                        h: &h,
                        rng: SmallRng::seed_from_u64(cfg.seed.wrapping_add(t as u64)),
                        cfg,
                        errors: Vec::new(),
                    };
                    barrier.wait();
                    let r = body(t, &mut w);
                    (r, w.errors)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    })
}

fn queue_run<S: Scheme>(
    domain: &Arc<S>,
    cfg: &StressConfig,
    sweep: Option<&Sweep<S>>,
    errors: &mut Vec<String>,
) {
    let q: Queue<u64, S> = {
        let h = Handle::register(domain);
        Queue::new(&h)
    };
    let results = spawn_workers(domain, cfg, |t, w| {
        let mut seq = 0u64;
        let mut out = Vec::new();
        w.run(domain, sweep, |w| {
            if w.rng.gen_bool(0.5) {
                q.enqueue(w.h, (t as u64) << 40 | seq);
                seq += 1;
            } else if let Some(v) = q.dequeue(w.h) {
                out.push(v);
            }
        });
        (seq, out)
    });
    let mut q = q;
    let mut seen: Vec<u64> = q.drain_quiescent();
    let mut expected = 0u64;
    let mut per_thread_order_ok = true;
    for ((enqueued, out), errs) in results {
        expected += enqueued;
        errors.extend(errs);
        seen.extend(out);
    }
    let n = seen.len() as u64;
    seen.sort_unstable();
    seen.dedup();
    if seen.len() as u64 != n {
        errors.push(format!(
            "queue: {} values dequeued twice",
            n - seen.len() as u64
        ));
    }
    if n != expected {
        errors.push(format!("queue: {expected} enqueued but {n} accounted for"));
    }
    let mut next = StdHashMap::new();
    for v in &seen {
        let (t, i) = (v >> 40, v & ((1 << 40) - 1));
        let e = next.entry(t).or_insert(0u64);
        per_thread_order_ok &= *e == i;
        *e = i + 1;
    }
    if !per_thread_order_ok {
        errors.push("queue: lost or foreign values".into());
    }
    drop(q);
}

fn list_run<S: Scheme>(
    domain: &Arc<S>,
    cfg: &StressConfig,
    sweep: Option<&Sweep<S>>,
    errors: &mut Vec<String>,
) {
    let l: List<u64, S> = List::new(domain);
    let range = cfg.key_range.max(1);
    let results = spawn_workers(domain, cfg, |_, w| {
        let mut net = vec![0i64; range as usize];
        w.run(domain, sweep, |w| {
            let key = w.rng.gen_range(0..range);
            match w.rng.gen_range(0..3) {
                0 => {
                    if l.insert(w.h, key) {
                        net[key as usize] += 1;
                    }
                }
                1 => {
                    if l.remove(w.h, key) {
                        net[key as usize] -= 1;
                    }
                }
                _ => {
                    l.contains(w.h, key);
                }
            }
        });
        net
    });
    let mut net = vec![0i64; range as usize];
    for (n, errs) in results {
        errors.extend(errs);
        for (a, b) in net.iter_mut().zip(n) {
            *a += b;
        }
    }
    let snap = l.snapshot_quiescent();
    if snap.iter().any(|(_, marked)| *marked) {
        errors.push("list: delete-marked node left at quiescence".into());
    }
    if !snap.windows(2).all(|w| w[0].0 < w[1].0) {
        errors.push("list: keys not strictly sorted".into());
    }
    let present: std::collections::HashSet<u64> = snap.iter().map(|(k, _)| *k).collect();
    for (k, n) in net.iter().enumerate() {
        let expect = present.contains(&(k as u64)) as i64;
        if *n != expect {
            errors.push(format!(
                "list: key {k} has net {n} successful updates but presence {expect}"
            ));
            break;
        }
    }
    drop(l);
}

fn map_run<S: Scheme>(
    domain: &Arc<S>,
    cfg: &StressConfig,
    sweep: Option<&Sweep<S>>,
    errors: &mut Vec<String>,
) {
    let m: HashMap<Payload, S> = {
        let h = Handle::register(domain);
        HashMap::new(&h, cfg.map_capacity)
    };
    let range = cfg.key_range.max(1);
    let bad = Mutex::new(0u64);
    let results = spawn_workers(domain, cfg, |_, w| {
        w.run(domain, sweep, |w| {
            let key = w.rng.gen_range(0..range);
            let h = w.h;
            let compute = || Payload {
                canary: Canary::new(),
                key,
                data: vec![key as u8; 32],
            };
            let ok = m
                .get_or_compute(h, key, compute, |p| {
                    // Pause with the entry guarded so other threads can
                    // evict and retire it meanwhile.
                    w.pause();
                    h.check(&p.canary) && p.key == key && p.data.iter().all(|b| *b == key as u8)
                })
                .0;
            if !ok {
                *bad.lock().unwrap() += 1;
            }
        });
    });
    for (_, errs) in results {
        errors.extend(errs);
    }
    let bad = bad.into_inner().unwrap();
    if bad > 0 {
        errors.push(format!("hashmap: {bad} payloads did not match their key"));
    }
    if m.len() > m.capacity() {
        errors.push(format!(
            "hashmap: {} entries exceed capacity {}",
            m.len(),
            m.capacity()
        ));
    }
    if m.count_quiescent() != m.len() {
        errors.push(format!(
            "hashmap: {} linked entries but count {}",
            m.count_quiescent(),
            m.len()
        ));
    }
    drop(m);
}

/// Runs a randomized workload on `structure` and reports canary violations
/// and invariant breaches. The domain should use a quarantine hook.
pub fn stress_run<S: Scheme>(
    domain: &Arc<S>,
    structure: Structure,
    cfg: &StressConfig,
    sweep: Option<&Sweep<S>>,
) -> StressReport {
    let mut errors = Vec::new();
    match structure {
        Structure::Queue => queue_run(domain, cfg, sweep, &mut errors),
        Structure::List => list_run(domain, cfg, sweep, &mut errors),
        Structure::HashMap => map_run(domain, cfg, sweep, &mut errors),
    }
    let after_exit = domain.core().stats.snapshot();
    StressReport {
        scheme: S::NAME,
        structure,
        config: cfg.clone(),
        ops: after_exit.operations,
        acquisitions: after_exit.acquisitions,
        violations: after_exit.violations,
        invariant_errors: errors,
        after_exit,
        residual_bound: domain.residual_bound(),
    }
}

/// Halves the operation count while the run keeps failing and returns the
/// smallest failing report, or `None` if the first run is clean.
pub fn shrink<S: Scheme>(
    make: impl Fn() -> Arc<S>,
    structure: Structure,
    cfg: &StressConfig,
    sweep: Option<&Sweep<S>>,
) -> Option<StressReport> {
    let mut failing: Option<StressReport> = None;
    let mut cfg = cfg.clone();
    loop {
        let r = stress_run(&make(), structure, &cfg, sweep);
        if r.is_clean() {
            return failing;
        }
        failing = Some(r);
        if cfg.ops_per_thread <= 1 {
            return failing;
        }
        cfg.ops_per_thread /= 2;
    }
}

/// Deterministic use-after-reclaim probe for the stamp-it predicate.
///
/// Thread `c` enters, then `a` enters and guards a node that `c` unlinks
/// and retires. When `c` leaves, `a` is the oldest thread in the pool and
/// the node's retire stamp is exactly one increment above `a`'s stamp. A
/// correct predicate keeps the node; one that accepts nodes an increment
/// early frees it under `a`'s guard. Returns the number of canary
/// violations observed.
pub fn stamp_mutation_probe(off_by_one: bool) -> u64 {
    use crate::marked::{Atomic, MarkedPtr};
    use crate::reclaim::AllocHook;
    use crate::stamp_it::{StampIt, StampItConfig};
    use std::sync::atomic::Ordering;

    struct Node {
        canary: Canary,
    }

    let d = Arc::new(StampIt::new(StampItConfig {
        threshold: 0,
        hook: AllocHook::quarantine(),
        off_by_one,
        ..Default::default()
    }));
    let c = Handle::register(&d);
    let a = Handle::register(&d);
    let node = c.alloc(Node {
        canary: Canary::new(),
    });
    let cell: Atomic<Node, 0> = Atomic::new(MarkedPtr::new(node, 0));
    let rc = c.region();
    let ra = a.region();
    let g = a.acquire(&cell);
    cell.store(MarkedPtr::null(), Ordering::SeqCst);
    // SAFETY: unlinked above; `a` still guards it, which is the point.
    unsafe { c.retire(node) };
    drop(rc);
    a.check(&g.canary);
    drop(g);
    drop(ra);
    let violations = d.core().stats.snapshot().violations;
    drop(a);
    drop(c);
    violations
}
