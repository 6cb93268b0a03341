//! Throughput and reclamation-efficiency benchmarks over the queue, list and
//! hash map, with CSV rows ready for plotting.
//!
//! Each trial registers fresh worker handles, releases them together from a
//! barrier and stops them with a shared flag once the trial time elapses.
//! Structures and domains live across all trials of a run, so the hash map
//! warms up over time. Efficiency samples read the per-thread counters while
//! the workers run; those reads are racy but every counter is monotonic.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Barrier};
use std::thread;
use std::time::{Duration, Instant};

use rand::rngs::SmallRng;
use rand::{Rng, SeedableRng};
use serde::Serialize;

use stampit::ds::{HashMap, List, Queue};
use stampit::kind::{FromHook, SchemeKind};
use stampit::verify::stress::Structure;
use stampit::{with_scheme, AllocHook, Handle, Scheme, StatsSnapshot};

pub const THROUGHPUT_COLUMNS: [&str; 8] = [
    "benchmark",
    "scheme",
    "threads",
    "trial",
    "thread_id",
    "ops",
    "runtime_ns",
    "ns_per_op",
];

pub const EFFICIENCY_COLUMNS: [&str; 9] = [
    "benchmark",
    "scheme",
    "threads",
    "run",
    "trial",
    "sample",
    "unreclaimed",
    "allocated",
    "reclaimed",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Allocator {
    System,
    Quarantine,
}

impl Allocator {
    pub fn hook(self) -> AllocHook {
        match self {
            Allocator::System => AllocHook::System,
            Allocator::Quarantine => AllocHook::quarantine(),
        }
    }
}

/// Hash map simulation sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MapConfig {
    /// Distinct partial results.
    pub key_space: u64,
    /// Partial results computed or reused per simulation.
    pub keys_per_sim: u64,
    pub payload_bytes: usize,
    pub capacity: usize,
}

impl Default for MapConfig {
    fn default() -> Self {
        MapConfig {
            key_space: 3000,
            keys_per_sim: 100,
            payload_bytes: 256,
            capacity: 1000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub benchmark: Structure,
    pub scheme: SchemeKind,
    pub threads: usize,
    pub trial_seconds: f64,
    pub trials: usize,
    pub runs: usize,
    /// Percentage of list operations that are updates.
    pub workload: u32,
    /// Initial list size; list keys are drawn from twice this range.
    pub list_size: u64,
    /// Operations per region guard.
    pub region_span: u64,
    pub samples: usize,
    pub seed: u64,
    pub allocator: Allocator,
    pub map: MapConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            benchmark: Structure::Queue,
            scheme: SchemeKind::StampIt,
            threads: 4,
            trial_seconds: 1.0,
            trials: 5,
            runs: 3,
            workload: 20,
            list_size: 10,
            region_span: 100,
            samples: 50,
            seed: 1,
            allocator: Allocator::System,
            map: MapConfig::default(),
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("threads must be at least 1")]
    NoThreads,
    #[error("trial_seconds must be positive and finite, got {0}")]
    TrialSeconds(f64),
    #[error("trials and runs must be at least 1")]
    NoTrials,
    #[error("workload must be within 0..=100, got {0}")]
    Workload(u32),
    #[error("list_size must be at least 1")]
    EmptyList,
    #[error("region_span must be at least 1")]
    RegionSpan,
    #[error("samples must be at least 1")]
    NoSamples,
    #[error(
        "hash map needs a non-empty key space, at least one key per simulation and a capacity"
    )]
    Map,
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.threads == 0 {
            return Err(ConfigError::NoThreads);
        }
        if !(self.trial_seconds.is_finite() && self.trial_seconds > 0.0) {
            return Err(ConfigError::TrialSeconds(self.trial_seconds));
        }
        if self.trials == 0 || self.runs == 0 {
            return Err(ConfigError::NoTrials);
        }
        if self.workload > 100 {
            return Err(ConfigError::Workload(self.workload));
        }
        if self.list_size == 0 {
            return Err(ConfigError::EmptyList);
        }
        if self.region_span == 0 {
            return Err(ConfigError::RegionSpan);
        }
        if self.samples == 0 {
            return Err(ConfigError::NoSamples);
        }
        let m = &self.map;
        if m.key_space == 0 || m.keys_per_sim == 0 || m.capacity == 0 {
            return Err(ConfigError::Map);
        }
        Ok(())
    }

    pub fn key_range(&self) -> u64 {
        2 * self.list_size
    }

    fn trial_duration(&self) -> Duration {
        Duration::from_secs_f64(self.trial_seconds)
    }
}

/// Operation mix performed by one worker in one trial.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpMix {
    pub inserts: u64,
    pub removes: u64,
    pub searches: u64,
    pub enqueues: u64,
    pub dequeues: u64,
    pub hits: u64,
    pub misses: u64,
}

impl OpMix {
    fn add(&mut self, o: &OpMix) {
        self.inserts += o.inserts;
        self.removes += o.removes;
        self.searches += o.searches;
        self.enqueues += o.enqueues;
        self.dequeues += o.dequeues;
        self.hits += o.hits;
        self.misses += o.misses;
    }

    pub fn hit_rate(&self) -> f64 {
        self.hits as f64 / (self.hits + self.misses).max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThroughputRow {
    pub benchmark: &'static str,
    pub scheme: &'static str,
    pub threads: usize,
    pub trial: usize,
    pub thread_id: usize,
    pub ops: u64,
    pub runtime_ns: u64,
    pub ns_per_op: f64,
}

#[derive(Debug, Clone)]
pub struct TrialReport {
    pub trial: usize,
    pub rows: Vec<ThroughputRow>,
    pub mix: OpMix,
}

impl TrialReport {
    /// Mean of the per-thread average runtimes per operation.
    pub fn avg_ns_per_op(&self) -> f64 {
        self.rows.iter().map(|r| r.ns_per_op).sum::<f64>() / self.rows.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EfficiencyRow {
    pub benchmark: &'static str,
    pub scheme: &'static str,
    pub threads: usize,
    pub run: usize,
    pub trial: usize,
    pub sample: usize,
    pub unreclaimed: u64,
    pub allocated: u64,
    pub reclaimed: u64,
    #[serde(skip)]
    pub retired: u64,
}

#[derive(Debug, Clone, Default)]
pub struct EfficiencyReport {
    pub rows: Vec<EfficiencyRow>,
    /// Per run: the scheme's residual bound once every handle is gone.
    pub residual_bounds: Vec<u64>,
    /// Per run and trial: operation mix summed over workers.
    pub mixes: Vec<Vec<OpMix>>,
}

/// A structure under benchmark. Hash map values are partial results.
enum Target<S: Scheme> {
    Queue(Queue<u64, S>),
    List(List<u64, S>),
    Map(HashMap<Box<[u8]>, S>),
}

impl<S: Scheme> Target<S> {
    fn build(domain: &Arc<S>, cfg: &BenchConfig) -> Self {
        let h = Handle::register(domain);
        match cfg.benchmark {
            Structure::Queue => Target::Queue(Queue::new(&h)),
            Structure::List => {
                let l = List::new(domain);
                let mut rng = SmallRng::seed_from_u64(cfg.seed ^ 0x5eed);
                let mut keys = BTreeSet::new();
                while (keys.len() as u64) < cfg.list_size {
                    keys.insert(rng.gen_range(0..cfg.key_range()));
                }
                let _r = h.region();
                for k in keys {
                    l.insert(&h, k);
                }
                Target::List(l)
            }
            Structure::HashMap => Target::Map(HashMap::new(&h, cfg.map.capacity)),
        }
    }

    fn op(
        &self,
        h: &Handle<S>,
        rng: &mut SmallRng,
        cfg: &BenchConfig,
        tid: usize,
        seq: &mut u64,
        mix: &mut OpMix,
    ) {
        match self {
            Target::Queue(q) => {
                if seq.is_multiple_of(2) {
                    q.enqueue(h, (tid as u64) << 40 | *seq);
                    mix.enqueues += 1;
                } else {
                    q.dequeue(h);
                    mix.dequeues += 1;
                }
                *seq += 1;
            }
            Target::List(l) => {
                let key = rng.gen_range(0..cfg.key_range());
                if rng.gen_range(0..100) < cfg.workload {
                    if rng.gen_bool(0.5) {
                        l.insert(h, key);
                        mix.inserts += 1;
                    } else {
                        l.remove(h, key);
                        mix.removes += 1;
                    }
                } else {
                    l.contains(h, key);
                    mix.searches += 1;
                }
            }
            Target::Map(m) => {
                let key = rng.gen_range(0..cfg.map.key_space);
                let (_, hit) = m.get_or_compute(
                    h,
                    key,
                    || partial_result(key, cfg.map.payload_bytes),
                    |p| p[0],
                );
                if hit {
                    mix.hits += 1;
                } else {
                    mix.misses += 1;
                }
            }
        }
    }

    /// Structure calls per benchmark operation: a hash map operation is one
    /// simulation.
    fn ops_per_round(&self, cfg: &BenchConfig) -> u64 {
        match self {
            Target::Map(_) => cfg.map.keys_per_sim,
            _ => 1,
        }
    }
}

/// Deterministic stand-in for an expensive computation.
pub fn partial_result(key: u64, bytes: usize) -> Box<[u8]> {
    let mut x = key.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    (0..bytes.max(1))
        .map(|_| {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            x as u8
        })
        .collect()
}

struct WorkerResult {
    ops: u64,
    runtime: Duration,
    mix: OpMix,
}

/// Runs one trial and calls `during` on the coordinating thread while the
/// workers run. Returns per-thread results in thread order.
fn trial<S: Scheme>(
    domain: &Arc<S>,
    target: &Target<S>,
    cfg: &BenchConfig,
    seed: u64,
    during: impl FnOnce(),
) -> Vec<WorkerResult> {
    let stop = AtomicBool::new(false);
    let barrier = Barrier::new(cfg.threads + 1);
    let round = target.ops_per_round(cfg);
    thread::scope(|s| {
        let workers: Vec<_> = (0..cfg.threads)
            .map(|tid| {
                let (stop, barrier) = (&stop, &barrier);
                s.spawn(move || {
                    let h = Handle::register(domain);
                    let mut rng = SmallRng::seed_from_u64(seed.wrapping_add(tid as u64));
                    let mut mix = OpMix::default();
                    let mut seq = 0;
                    let mut ops = 0;
                    barrier.wait();
                    let start = Instant::now();
                    while !stop.load(Ordering::Relaxed) {
                        let _r = h.region();
                        for _ in 0..cfg.region_span {
                            for _ in 0..round {
                                target.op(&h, &mut rng, cfg, tid, &mut seq, &mut mix);
                            }
                        }
                        ops += cfg.region_span;
                    }
                    let runtime = start.elapsed();
                    h.counters().add_operations(ops);
                    drop(h);
                    WorkerResult { ops, runtime, mix }
                })
            })
            .collect();
        barrier.wait();
        during();
        stop.store(true, Ordering::Relaxed);
        workers.into_iter().map(|w| w.join().unwrap()).collect()
    })
}

fn trial_seed(cfg: &BenchConfig, run: usize, trial: usize) -> u64 {
    cfg.seed
        .wrapping_add((run as u64) << 32)
        .wrapping_add((trial as u64) << 16)
}

fn throughput_for<S: FromHook>(cfg: &BenchConfig) -> Vec<TrialReport> {
    let domain = Arc::new(S::from_hook(cfg.allocator.hook()));
    let target = Target::build(&domain, cfg);
    let dur = cfg.trial_duration();
    (0..cfg.trials)
        .map(|t| {
            let results = trial(&domain, &target, cfg, trial_seed(cfg, 0, t), || {
                thread::sleep(dur)
            });
            let mut mix = OpMix::default();
            let rows = results
                .iter()
                .enumerate()
                .map(|(tid, r)| {
                    mix.add(&r.mix);
                    let runtime_ns = r.runtime.as_nanos() as u64;
                    ThroughputRow {
                        benchmark: cfg.benchmark.name(),
                        scheme: S::NAME,
                        threads: cfg.threads,
                        trial: t,
                        thread_id: tid,
                        ops: r.ops,
                        runtime_ns,
                        ns_per_op: runtime_ns as f64 / r.ops.max(1) as f64,
                    }
                })
                .collect();
            TrialReport {
                trial: t,
                rows,
                mix,
            }
        })
        .collect()
}

/// Runs `cfg.trials` timed trials and reports per-thread throughput.
pub fn run_throughput(cfg: &BenchConfig) -> Result<Vec<TrialReport>, ConfigError> {
    cfg.validate()?;
    Ok(with_scheme!(cfg.scheme, S => throughput_for::<S>(cfg)))
}

fn sample_row(
    cfg: &BenchConfig,
    scheme: &'static str,
    run: usize,
    trial: usize,
    sample: usize,
    s: StatsSnapshot,
) -> EfficiencyRow {
    EfficiencyRow {
        benchmark: cfg.benchmark.name(),
        scheme,
        threads: cfg.threads,
        run,
        trial,
        sample,
        unreclaimed: s.unreclaimed(),
        allocated: s.allocated,
        reclaimed: s.reclaimed,
        retired: s.retired,
    }
}

fn efficiency_for<S: FromHook>(cfg: &BenchConfig) -> EfficiencyReport {
    let mut report = EfficiencyReport::default();
    let period = cfg.trial_duration() / cfg.samples as u32;
    for run in 0..cfg.runs {
        let domain = Arc::new(S::from_hook(cfg.allocator.hook()));
        let mut target = Some(Target::build(&domain, cfg));
        let mut mixes = Vec::new();
        for t in 0..cfg.trials {
            let mut rows = Vec::with_capacity(cfg.samples);
            let results = trial(
                &domain,
                target.as_ref().unwrap(),
                cfg,
                trial_seed(cfg, run, t),
                || {
                    for i in 0..cfg.samples - 1 {
                        thread::sleep(period);
                        rows.push(sample_row(
                            cfg,
                            S::NAME,
                            run,
                            t,
                            i,
                            domain.core().stats.snapshot(),
                        ));
                    }
                    thread::sleep(period);
                },
            );
            let mut mix = OpMix::default();
            for r in &results {
                mix.add(&r.mix);
            }
            mixes.push(mix);
            if t + 1 == cfg.trials {
                target = None;
            }
            let last = sample_row(
                cfg,
                S::NAME,
                run,
                t,
                cfg.samples - 1,
                domain.core().stats.snapshot(),
            );
            rows.push(last);
            report.rows.extend(rows);
        }
        drop(target);
        report.residual_bounds.push(domain.residual_bound());
        report.mixes.push(mixes);
    }
    report
}

/// Samples unreclaimed nodes `cfg.samples` times per trial, for
/// `cfg.trials` trials per run and `cfg.runs` runs. The last sample of a
/// trial is taken after its workers exited; in the last trial of a run the
/// structure is torn down first, so that sample counts only nodes the scheme
/// failed to reclaim.
pub fn run_efficiency(cfg: &BenchConfig) -> Result<EfficiencyReport, ConfigError> {
    cfg.validate()?;
    Ok(with_scheme!(cfg.scheme, S => efficiency_for::<S>(cfg)))
}

/// Writes rows with a header line.
pub fn write_csv<W: std::io::Write, R: Serialize>(out: W, rows: &[R]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Checks a CSV header and that every record has the header's arity.
pub fn check_schema(data: &str, columns: &[&str]) -> Result<usize, String> {
    let mut r = csv::Reader::from_reader(data.as_bytes());
    let header = r.headers().map_err(|e| e.to_string())?.clone();
    if header.iter().ne(columns.iter().copied()) {
        return Err(format!("header {header:?} does not match {columns:?}"));
    }
    let mut n = 0;
    for rec in r.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        if rec.len() != columns.len() {
            return Err(format!("record {n} has {} fields", rec.len()));
        }
        n += 1;
    }
    Ok(n)
}

/// Counter conservation: reclaimed never exceeds allocated and unreclaimed
/// is their difference.
pub fn conserves(r: &EfficiencyRow) -> bool {
    r.reclaimed <= r.allocated && r.allocated - r.reclaimed == r.unreclaimed
}
