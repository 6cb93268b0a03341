//! Bounded exhaustive exploration of stamp pool interleavings.
//!
//! Every logical thread runs on its own OS thread but only moves when the
//! controller hands it the turn; it gives the turn back at the next yield
//! point, i.e. before its next shared access. One step is therefore exactly
//! one shared access, and between steps the pool is frozen, so the
//! controller can inspect it without races.
//!
//! Schedules are explored depth first by replaying prefixes. A preemption
//! (switching away from a thread that could continue) costs one unit of a
//! configurable budget; switching after a thread finishes is free.

use std::collections::HashSet;
use std::sync::{Arc, Condvar, Mutex};
use std::thread;

use rand::rngs::SmallRng;
use rand::{Rng, SeedableRng};

use crate::sched;
use crate::stamp_pool::{
    classify, Block, BlockState, StampPool, BIAS, FLAGS, PENDING_PUSH, STAMP_INC,
};

#[derive(Debug, Clone)]
pub struct InterleaveConfig {
    pub threads: usize,
    /// Operations per thread, alternating push and remove starting with
    /// push. Odd counts are rounded up so every thread ends outside.
    pub ops: usize,
    /// Maximum number of preemptions per schedule.
    pub preemptions: usize,
    /// Stop after this many schedules.
    pub max_runs: u64,
}

impl Default for InterleaveConfig {
    fn default() -> Self {
        InterleaveConfig {
            threads: 2,
            ops: 4,
            preemptions: 2,
            max_runs: u64::MAX,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Violation {
    pub schedule: Vec<usize>,
    pub message: String,
}

#[derive(Debug, Default)]
pub struct InterleaveReport {
    pub runs: u64,
    pub steps: u64,
    pub longest: usize,
    /// Whether the bounded schedule space was fully explored.
    pub exhausted: bool,
    pub violations: Vec<Violation>,
    /// Schedules that left a `next` hint pointing at a removed block. Hints
    /// are advisory, so these are reported separately.
    pub stale_hints: u64,
    /// Schedules in which some remove helped finish another thread's push.
    pub helped_pushes: u64,
}

impl InterleaveReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

struct Ctl {
    turn: Option<usize>,
    parked: Vec<bool>,
    done: Vec<bool>,
    /// Stamp of every thread currently inside its region.
    inside: Vec<Option<u64>>,
    stamps: Vec<u64>,
    panicked: Option<String>,
}

struct Shared {
    ctl: Mutex<Ctl>,
    cv: Condvar,
}

impl Shared {
    fn park(&self, me: usize) {
        let mut c = self.ctl.lock().unwrap();
        c.parked[me] = true;
        c.turn = None;
        self.cv.notify_all();
        while c.turn != Some(me) {
            c = self.cv.wait(c).unwrap();
        }
        c.parked[me] = false;
    }

    fn finish(&self, me: usize, panic: Option<String>) {
        let mut c = self.ctl.lock().unwrap();
        c.done[me] = true;
        if panic.is_some() {
            c.panicked = panic;
        }
        c.turn = None;
        self.cv.notify_all();
    }

    /// Runs thread `t` until it parks again or finishes.
    fn step(&self, t: usize) {
        let mut c = self.ctl.lock().unwrap();
        c.turn = Some(t);
        self.cv.notify_all();
        while c.turn == Some(t) {
            c = self.cv.wait(c).unwrap();
        }
    }

    fn wait_all_parked(&self) {
        let mut c = self.ctl.lock().unwrap();
        while !c.parked.iter().zip(&c.done).all(|(p, d)| *p || *d) {
            c = self.cv.wait(c).unwrap();
        }
    }
}

enum Chooser<'a> {
    Replay(&'a mut Vec<Frame>),
    Random(&'a mut SmallRng),
}

struct Frame {
    options: Vec<usize>,
    idx: usize,
}

struct RunOutcome {
    schedule: Vec<usize>,
    violation: Option<String>,
    stale_hint: bool,
    helped: bool,
}

fn options(runnable: &[usize], last: Option<usize>, preemptions_left: bool) -> Vec<usize> {
    match last {
        Some(l) if runnable.contains(&l) => {
            let mut v = vec![l];
            if preemptions_left {
                v.extend(runnable.iter().copied().filter(|&t| t != l));
            }
            v
        }
        _ => runnable.to_vec(),
    }
}

fn state_step_ok(from: BlockState, to: BlockState) -> bool {
    use BlockState::*;
    from == to
        || matches!(
            (from, to),
            (Removed, Inserting) | (Inserting, InQueue) | (InQueue, Removing) | (Removing, Removed)
        )
}

/// The stamp a block holds or is about to hold once its push completes.
fn effective_stamp(raw: u64) -> u64 {
    if raw & PENDING_PUSH != 0 {
        raw + (STAMP_INC - PENDING_PUSH)
    } else {
        raw & !FLAGS
    }
}

struct Monitor {
    states: Vec<BlockState>,
    lowest: u64,
    helped: bool,
}

impl Monitor {
    fn new(blocks: &[&Block]) -> Self {
        Monitor {
            states: vec![BlockState::Removed; blocks.len()],
            lowest: 0,
            helped: false,
        }
    }

    /// Checks the frozen pool between two steps.
    fn check(
        &mut self,
        pool: &StampPool,
        blocks: &[&Block],
        ctl: &Ctl,
        stepped: usize,
    ) -> Result<(), String> {
        for (i, b) in blocks.iter().enumerate() {
            let state = classify(b.peek_stamp(), b.peek_prev(), b.peek_next())
                .ok_or_else(|| format!("block {i} in illegal state {b:?}"))?;
            let from = self.states[i];
            if !state_step_ok(from, state) {
                return Err(format!("block {i} jumped from {from:?} to {state:?}"));
            }
            if from != state && i != stepped {
                // Only a push can be finished by another thread.
                if (from, state) != (BlockState::Inserting, BlockState::InQueue) {
                    return Err(format!(
                        "thread {stepped} moved block {i} from {from:?} to {state:?}"
                    ));
                }
                self.helped = true;
            }
            self.states[i] = state;
        }
        let lowest = StampPool::public_stamp(pool.tail().peek_stamp());
        if lowest < self.lowest {
            return Err(format!(
                "tail stamp decreased from {} to {lowest}",
                self.lowest
            ));
        }
        self.lowest = lowest;
        for (t, s) in ctl.inside.iter().enumerate() {
            if let Some(s) = s {
                if lowest > *s {
                    return Err(format!(
                        "tail stamp {lowest} above live stamp {s} of thread {t}"
                    ));
                }
            }
        }
        let chain = pool.prev_chain()?;
        let mut prev_stamp = u64::MAX;
        for b in &chain {
            let s = effective_stamp(b.peek_stamp());
            if s >= prev_stamp {
                return Err("prev chain stamps not strictly decreasing".into());
            }
            prev_stamp = s;
        }
        if let Some(b) = chain.last() {
            if b.peek_stamp() & FLAGS == 0 && StampPool::public_stamp(b.peek_stamp()) < lowest {
                return Err(format!("oldest linked block below tail stamp {lowest}"));
            }
        }
        Ok(())
    }

    fn check_final(&self, pool: &StampPool, blocks: &[&Block], ctl: &Ctl) -> Result<bool, String> {
        if let Some(p) = &ctl.panicked {
            return Err(format!("worker panicked: {p}"));
        }
        for (i, _) in blocks.iter().enumerate() {
            if self.states[i] != BlockState::Removed {
                return Err(format!("block {i} ended in {:?}", self.states[i]));
            }
        }
        let chain = pool.prev_chain()?;
        if !chain.is_empty() {
            return Err(format!("{} blocks still in the prev list", chain.len()));
        }
        let mut seen = HashSet::new();
        if !ctl.stamps.iter().all(|s| seen.insert(*s) && s % 4 == 0) {
            return Err(format!(
                "stamps not distinct multiples of 4: {:?}",
                ctl.stamps
            ));
        }
        let highest = pool.head().peek_stamp() - BIAS;
        if self.lowest > highest {
            return Err(format!(
                "tail stamp {} above head stamp {highest}",
                self.lowest
            ));
        }
        let stale = !std::ptr::eq(pool.tail().peek_next().get(), pool.head());
        Ok(stale)
    }
}

fn run_once(cfg: &InterleaveConfig, chooser: Chooser<'_>) -> RunOutcome {
    let pool = Arc::new(StampPool::new(0));
    let blocks: Vec<&Block> = (0..cfg.threads).map(|_| pool.acquire_block()).collect();
    let ids: Vec<usize> = blocks.iter().map(|b| b.id()).collect();
    let ops = cfg.ops + cfg.ops % 2;
    let shared = Arc::new(Shared {
        ctl: Mutex::new(Ctl {
            turn: None,
            parked: vec![false; cfg.threads],
            done: vec![false; cfg.threads],
            inside: vec![None; cfg.threads],
            stamps: Vec::new(),
            panicked: None,
        }),
        cv: Condvar::new(),
    });

    let mut schedule = Vec::new();
    let mut violation = None;
    let mut monitor = Monitor::new(&blocks);
    let mut chooser = chooser;

    thread::scope(|s| {
        for (me, &id) in ids.iter().enumerate() {
            let pool = pool.clone();
            let shared = shared.clone();
            s.spawn(move || {
                let hook_shared = shared.clone();
                sched::install(move || hook_shared.park(me));
                shared.park(me);
                let block = pool.blocks()[id];
                let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
                    for op in 0..ops {
                        if op % 2 == 0 {
                            let stamp = pool.push(block);
                            let mut c = shared.ctl.lock().unwrap();
                            c.inside[me] = Some(stamp);
                            c.stamps.push(stamp);
                        } else {
                            shared.ctl.lock().unwrap().inside[me] = None;
                            pool.remove(block);
                        }
                    }
                }));
                sched::uninstall();
                let panic = result.err().map(|e| {
                    e.downcast_ref::<String>()
                        .cloned()
                        .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                        .unwrap_or_default()
                });
                shared.finish(me, panic);
            });
        }

        shared.wait_all_parked();
        let mut last = None;
        let mut preemptions = 0;
        loop {
            let runnable: Vec<usize> = {
                let c = shared.ctl.lock().unwrap();
                (0..cfg.threads).filter(|&t| !c.done[t]).collect()
            };
            if runnable.is_empty() || violation.is_some() {
                break;
            }
            let opts = options(&runnable, last, preemptions < cfg.preemptions);
            let depth = schedule.len();
            let t = match &mut chooser {
                Chooser::Replay(stack) => {
                    if depth == stack.len() {
                        stack.push(Frame {
                            options: opts,
                            idx: 0,
                        });
                    }
                    let f = &stack[depth];
                    f.options[f.idx]
                }
                Chooser::Random(rng) => {
                    // Mostly keep running the current thread so that the
                    // preemption budget is spread over the whole run.
                    if opts.len() > 1 && rng.gen_bool(0.15) {
                        opts[rng.gen_range(1..opts.len())]
                    } else {
                        opts[0]
                    }
                }
            };
            if let Some(l) = last {
                if l != t && runnable.contains(&l) {
                    preemptions += 1;
                }
            }
            last = Some(t);
            schedule.push(t);
            shared.step(t);
            let c = shared.ctl.lock().unwrap();
            if let Err(e) = monitor.check(&pool, &blocks, &c, t) {
                violation = Some(e);
            }
        }
        if violation.is_some() {
            // Let the remaining threads run to completion unobserved.
            loop {
                let next = {
                    let c = shared.ctl.lock().unwrap();
                    (0..cfg.threads).find(|&t| !c.done[t])
                };
                match next {
                    Some(t) => shared.step(t),
                    None => break,
                }
            }
        }
    });

    let c = shared.ctl.lock().unwrap();
    let mut stale_hint = false;
    if violation.is_none() {
        match monitor.check_final(&pool, &blocks, &c) {
            Ok(stale) => stale_hint = stale,
            Err(e) => violation = Some(e),
        }
    }
    RunOutcome {
        schedule,
        violation,
        stale_hint,
        helped: monitor.helped,
    }
}

fn record(report: &mut InterleaveReport, out: RunOutcome) {
    report.runs += 1;
    report.steps += out.schedule.len() as u64;
    report.longest = report.longest.max(out.schedule.len());
    report.stale_hints += out.stale_hint as u64;
    report.helped_pushes += out.helped as u64;
    if let Some(message) = out.violation {
        report.violations.push(Violation {
            schedule: out.schedule,
            message,
        });
    }
}

/// Explores every schedule within the preemption bound, stopping at the
/// first violation or after `max_runs` schedules.
pub fn explore(cfg: &InterleaveConfig) -> InterleaveReport {
    let mut report = InterleaveReport::default();
    let mut stack: Vec<Frame> = Vec::new();
    loop {
        let out = run_once(cfg, Chooser::Replay(&mut stack));
        let failed = out.violation.is_some();
        record(&mut report, out);
        if failed || report.runs >= cfg.max_runs {
            return report;
        }
        loop {
            match stack.last_mut() {
                None => {
                    report.exhausted = true;
                    return report;
                }
                Some(f) if f.idx + 1 < f.options.len() => {
                    f.idx += 1;
                    break;
                }
                Some(_) => {
                    stack.pop();
                }
            }
        }
    }
}

/// Runs `runs` random schedules within the preemption bound.
pub fn random(cfg: &InterleaveConfig, runs: u64, seed: u64) -> InterleaveReport {
    let mut rng = SmallRng::seed_from_u64(seed);
    let mut report = InterleaveReport::default();
    for _ in 0..runs {
        let out = run_once(cfg, Chooser::Random(&mut rng));
        let failed = out.violation.is_some();
        record(&mut report, out);
        if failed {
            break;
        }
    }
    report
}

/// Replays one schedule, e.g. a counterexample.
pub fn replay(cfg: &InterleaveConfig, schedule: &[usize]) -> Option<String> {
    let mut stack: Vec<Frame> = schedule
        .iter()
        .map(|&t| Frame {
            options: vec![t],
            idx: 0,
        })
        .collect();
    run_once(cfg, Chooser::Replay(&mut stack)).violation
}
