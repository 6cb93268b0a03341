//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.

use std::collections::HashSet;
use std::io::Write;
use std::sync::{Arc, Barrier, Mutex};
use std::thread;
use std::time::Instant;

use rand::rngs::SmallRng;
use rand::{Rng, SeedableRng};

use stampit::baseline::Hp;
use stampit::kind::{FromHook, SchemeKind};
use stampit::stamp_it::StampIt;
use stampit::stamp_pool::{Link, LinkVal, TAG_BITS};
use stampit::verify::interleave::{self, InterleaveConfig};
use stampit::verify::oracle::{self, Event};
use stampit::verify::stress::{self, StressConfig, StressReport, Structure};
use stampit::{with_scheme, AllocHook, Handle};
use stampit_bench::{
    check_schema, conserves, run_efficiency, run_throughput, write_csv, BenchConfig,
    EFFICIENCY_COLUMNS, THROUGHPUT_COLUMNS,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn stress_cfg(structure: Structure, seed: u64) -> StressConfig {
    let ops_per_thread = match structure {
        Structure::Queue => 100_000,
        Structure::List => 20_000,
        Structure::HashMap => 40_000,
    };
    StressConfig {
        threads: 8,
        ops_per_thread,
        seed,
        key_range: 64,
        map_capacity: 16,
        ..Default::default()
    }
}

fn stress_quarantined<S: FromHook>(structure: Structure, cfg: &StressConfig) -> StressReport {
    let d = Arc::new(S::from_hook(AllocHook::quarantine()));
    stress::stress_run(&d, structure, cfg, None)
}

fn safety() -> Outcome {
    let mut min_acq = u64::MAX;
    for scheme in SchemeKind::ALL {
        for structure in Structure::ALL {
            let cfg = stress_cfg(structure, 42);
            let r = with_scheme!(scheme, S => stress_quarantined::<S>(structure, &cfg));
            ensure(r.violations == 0, || format!("{r}"))?;
            ensure(r.invariant_errors.is_empty(), || {
                format!("{r}: {:?}", r.invariant_errors)
            })?;
            ensure(r.acquisitions >= 1_000_000, || {
                format!("too few acquisitions: {r}")
            })?;
            min_acq = min_acq.min(r.acquisitions);
        }
    }
    let probe_ok =
        stress::stamp_mutation_probe(false) == 0 && stress::stamp_mutation_probe(true) > 0;
    ensure(probe_ok, || {
        "mutation probe did not separate the predicates".into()
    })?;
    Ok(format!(
        "5 schemes x 3 structures at 8 threads, >= {min_acq} acquisitions each, 0 violations; off-by-one probe detected"
    ))
}

fn oracle_equivalence() -> Outcome {
    let mut rng = SmallRng::seed_from_u64(2024);
    let n = 10_000;
    for i in 0..n {
        let len = rng.gen_range(1..=200);
        let threshold = [0, 1, 20][i % 3];
        let h = oracle::random_history(&mut rng, len, 4);
        let expected = oracle::predict(&h, 4, threshold).map_err(|e| e.to_string())?;
        let actual = oracle::replay(&h, threshold);
        ensure(actual == expected, || {
            format!("history {i} diverges: {h:?}")
        })?;
    }
    let timeline = oracle::timeline_history();
    let unit = oracle::predict(&timeline, 1, 0).map_err(|e| e.to_string())?;
    let reclaimed_at = |id: u64| unit.iter().position(|o| o.reclaimed.contains(&id));
    let (n1, n2) = (reclaimed_at(0), reclaimed_at(1));
    ensure(n1.is_some_and(|i| unit[i].lowest == 2), || {
        format!("n1 at {n1:?}")
    })?;
    ensure(n2.is_some_and(|i| unit[i].lowest == 3), || {
        format!("n2 at {n2:?}")
    })?;
    ensure(
        timeline
            .iter()
            .filter(|e| matches!(e, Event::Retire(_)))
            .count()
            == 2,
        || "timeline shape".into(),
    )?;
    ensure(
        oracle::replay(&timeline, 0) == oracle::predict(&timeline, 4, 0).unwrap(),
        || "timeline diverges from the scheme".into(),
    )?;
    Ok(format!(
        "{n} random histories of length 1..=200 match; timeline reclaims n1 at lowest 2 and n2 at lowest 3"
    ))
}

fn amortized_cost() -> Outcome {
    let list = |threads: usize, ops_per_thread: u64| {
        let cfg = StressConfig {
            threads,
            ops_per_thread,
            seed: 7,
            key_range: 64,
            ..Default::default()
        };
        stress_quarantined::<StampIt>(Structure::List, &cfg)
    };
    let big = list(8, 125_000);
    ensure(big.ops >= 1_000_000, || format!("{big}"))?;
    let per_op = big.steps_per_op();
    ensure(per_op < 10.0, || {
        format!("{per_op:.3} scan steps per operation")
    })?;
    let mut per_reclaim = Vec::new();
    for threads in [1, 2, 4, 8] {
        let r = list(threads, 200_000 / threads as u64);
        let s = &r.after_exit;
        per_reclaim.push(s.scan_steps as f64 / s.reclaimed.max(1) as f64);
    }
    let (lo, hi) = per_reclaim
        .iter()
        .fold((f64::MAX, 0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    ensure(hi <= 2.0 * lo.max(1.0), || {
        format!("per-reclaim steps {per_reclaim:?}")
    })?;
    Ok(format!(
        "{per_op:.3} scan steps/op over {} list ops at 8 threads; per-reclaim steps at 1/2/4/8 threads {:.2?}",
        big.ops, per_reclaim
    ))
}

fn exhaustive_interleavings() -> Outcome {
    let t = Instant::now();
    let mut parts = Vec::new();
    let exhaustive = [(2, 6, 1), (2, 4, 2), (3, 2, 1), (3, 4, 1)];
    for (threads, ops, preemptions) in exhaustive {
        let cfg = InterleaveConfig {
            threads,
            ops,
            preemptions,
            max_runs: u64::MAX,
        };
        let r = interleave::explore(&cfg);
        ensure(r.is_clean(), || {
            format!("{threads}x{ops}: {:?}", r.violations.first())
        })?;
        ensure(r.exhausted, || format!("{threads}x{ops} not exhausted"))?;
        parts.push(format!(
            "{threads}t x {ops} ops, {preemptions} preemptions: {} schedules",
            r.runs
        ));
    }
    let cfg = InterleaveConfig {
        threads: 3,
        ops: 6,
        preemptions: usize::MAX,
        max_runs: u64::MAX,
    };
    let r = interleave::random(&cfg, 2_000, 9);
    ensure(r.is_clean(), || {
        format!("random 3x6: {:?}", r.violations.first())
    })?;
    parts.push(format!("3t x 6 ops: {} random schedules", r.runs));
    Ok(format!(
        "{}; 0 violations in {:.0}s",
        parts.join(", "),
        t.elapsed().as_secs_f64()
    ))
}

fn stamp_monotonicity() -> Outcome {
    let d = Arc::new(StampIt::default());
    let stamps = Mutex::new(Vec::new());
    let barrier = Barrier::new(8);
    thread::scope(|s| {
        for _ in 0..8 {
            s.spawn(|| {
                let h = Handle::register(&d);
                let mut mine = Vec::with_capacity(10_000);
                barrier.wait();
                for _ in 0..10_000 {
                    let _r = h.region();
                    mine.push(d.entry_stamp(h.local()));
                }
                stamps.lock().unwrap().extend(mine);
            });
        }
    });
    let stamps = stamps.into_inner().unwrap();
    let got: Vec<u64> = stamps.iter().flatten().copied().collect();
    ensure(got.len() == 80_000, || {
        format!("{} of 80000 entries had a stamp", got.len())
    })?;
    ensure(got.iter().all(|s| s % 4 == 0), || {
        "stamp not a multiple of 4".into()
    })?;
    let distinct: HashSet<u64> = got.iter().copied().collect();
    ensure(distinct.len() == got.len(), || {
        format!("{} duplicate stamps", got.len() - distinct.len())
    })?;
    Ok("80000 region entries on 8 threads drew distinct multiples of 4".into())
}

fn quiescence() -> Outcome {
    let mut parts = Vec::new();
    for scheme in SchemeKind::ALL {
        let cfg = BenchConfig {
            benchmark: Structure::HashMap,
            scheme,
            threads: 4,
            trial_seconds: 0.5,
            trials: 5,
            runs: 1,
            ..Default::default()
        };
        let r = run_efficiency(&cfg).map_err(|e| e.to_string())?;
        let last = r.rows.last().unwrap();
        let bound = r.residual_bounds[0];
        if scheme == SchemeKind::StampIt {
            ensure(last.unreclaimed == 0, || {
                format!("stamp-it left {}", last.unreclaimed)
            })?;
        }
        ensure(last.unreclaimed <= bound, || {
            format!("{scheme} left {} above bound {bound}", last.unreclaimed)
        })?;
        parts.push(format!("{scheme} {}<={bound}", last.unreclaimed));
    }
    Ok(format!("final hash map samples: {}", parts.join(", ")))
}

fn hp_threshold() -> Outcome {
    let d = Arc::new(Hp::default());
    let handles: Vec<_> = (0..4).map(|_| Handle::register(&d)).collect();
    ensure(d.threshold() == 116, || {
        format!("threshold {}", d.threshold())
    })?;
    let h = &handles[0];
    let retire = |n: usize| {
        for _ in 0..n {
            let p = h.alloc(0u64);
            // SAFETY: never shared.
            unsafe { h.retire(p) };
        }
    };
    retire(116);
    ensure(d.scans() == 0, || "scan before 117 retires".into())?;
    retire(1);
    ensure(d.scans() == 1, || "no scan at 117 retires".into())?;
    Ok("p=4, K=2 gives 116; no scan at 116 retired nodes, one at 117".into())
}

fn tag_wrap() -> Outcome {
    let start = LinkVal::new(std::ptr::null(), 0, false);
    let link = Link::new(start);
    let mut stale = link.load();
    for i in 1..=(1u64 << TAG_BITS) {
        let cur = link.load();
        ensure(link.bump(cur), || format!("bump {i} failed"))?;
        if i < 1 << TAG_BITS {
            ensure(link.cas(stale, std::ptr::null()).is_err(), || {
                format!("stale CAS succeeded after {i} updates")
            })?;
        }
        stale = cur;
    }
    let end = link.load();
    ensure(end.tag() == start.tag() && end.raw() == start.raw(), || {
        format!("tag {} after 2^{TAG_BITS} updates", end.tag())
    })?;
    let fresh = link.load();
    link.bump(fresh);
    ensure(link.cas(fresh, std::ptr::null()).is_err(), || {
        "stale CAS succeeded".into()
    })?;
    Ok(format!(
        "tag returns to its initial value after exactly 2^{TAG_BITS} updates; stale CAS fails"
    ))
}

fn harness_smoke() -> Outcome {
    let mut samples = 0;
    for benchmark in Structure::ALL {
        for scheme in SchemeKind::ALL {
            let cfg = BenchConfig {
                benchmark,
                scheme,
                threads: 2,
                trial_seconds: 1.0,
                trials: 1,
                runs: 1,
                ..Default::default()
            };
            let rows: Vec<_> = run_throughput(&cfg)
                .map_err(|e| e.to_string())?
                .into_iter()
                .flat_map(|t| t.rows)
                .collect();
            let mut buf = Vec::new();
            write_csv(&mut buf, &rows).map_err(|e| e.to_string())?;
            let n = check_schema(std::str::from_utf8(&buf).unwrap(), &THROUGHPUT_COLUMNS)?;
            ensure(n == 2 && rows.iter().all(|r| r.ops > 0), || {
                format!("{benchmark} {scheme}: {rows:?}")
            })?;

            let eff = run_efficiency(&cfg).map_err(|e| e.to_string())?;
            ensure(eff.rows.iter().all(conserves), || {
                format!("{benchmark} {scheme}: conservation")
            })?;
            let mut buf = Vec::new();
            write_csv(&mut buf, &eff.rows).map_err(|e| e.to_string())?;
            let n = check_schema(std::str::from_utf8(&buf).unwrap(), &EFFICIENCY_COLUMNS)?;
            ensure(n == cfg.samples, || {
                format!("{benchmark} {scheme}: {n} samples")
            })?;
            samples += n;
        }
    }
    Ok(format!(
        "15 combinations at 2 threads x 1 s; schemas valid, {samples} samples conserve counters"
    ))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("safety suite", safety),
        ("oracle equivalence", oracle_equivalence),
        ("amortized reclamation cost", amortized_cost),
        ("exhaustive small-model check", exhaustive_interleavings),
        ("strict stamp monotonicity", stamp_monotonicity),
        ("quiescence efficiency", quiescence),
        ("hazard pointer threshold", hp_threshold),
        ("tag wrap", tag_wrap),
        ("harness smoke", harness_smoke),
    ];
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    let mut out = std::io::stdout();
    for (name, check) in criteria {
        if filter.as_deref().is_some_and(|f| !name.contains(f)) {
            continue;
        }
        let t = Instant::now();
        let r = check();
        let secs = t.elapsed().as_secs_f64();
        let line = match &r {
            Ok(d) => format!("PASS {name}: {d} [{secs:.1}s]"),
            Err(e) => {
                failed += 1;
                format!("FAIL {name}: {e} [{secs:.1}s]")
            }
        };
        writeln!(out, "{line}").unwrap();
        out.flush().unwrap();
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
