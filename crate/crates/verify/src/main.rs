use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand};
use rand::rngs::SmallRng;
use rand::{Rng, SeedableRng};

use stampit::kind::{FromHook, SchemeKind};
use stampit::stamp_it::{StampIt, StampItConfig};
use stampit::verify::interleave::{self, InterleaveConfig, InterleaveReport};
use stampit::verify::oracle;
use stampit::verify::stress::{self, StressConfig, StressReport, Structure};
use stampit::{with_scheme, AllocHook};

/// Safety checks for the reclamation schemes.
#[derive(Debug, Parser)]
#[command(name = "verify", version)]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Randomized multi-threaded run with canary checks.
    Stress {
        #[arg(long, value_parser = parse_scheme)]
        scheme: SchemeKind,
        #[arg(long, value_parser = parse_structure)]
        structure: Structure,
        #[arg(long, default_value_t = 4)]
        threads: usize,
        /// Operations per thread.
        #[arg(long, default_value_t = 100_000)]
        ops: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 256)]
        key_range: u64,
        #[arg(long, default_value_t = 100)]
        region_span: u64,
        #[arg(long, default_value_t = 100)]
        map_capacity: usize,
        /// Accept stamp-it nodes one increment early (stamp-it only).
        #[arg(long)]
        mutation: bool,
    },
    /// Explore stamp pool interleavings under the controlled stepper.
    Interleave {
        #[arg(long, default_value_t = 2)]
        threads: usize,
        /// Operations per thread, alternating push and remove.
        #[arg(long, default_value_t = 4)]
        ops: usize,
        #[arg(long, default_value_t = 2)]
        preemptions: usize,
        #[arg(long, default_value_t = u64::MAX)]
        max_runs: u64,
        /// Sample this many random schedules instead of exploring.
        #[arg(long)]
        random: Option<u64>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Replay one schedule given as comma separated thread indices.
        #[arg(long, value_delimiter = ',')]
        replay: Option<Vec<usize>>,
    },
    /// Compare random serialized histories against the sequential oracle.
    Oracle {
        #[arg(long, default_value_t = 10_000)]
        histories: usize,
        #[arg(long, default_value_t = 200)]
        max_len: usize,
        #[arg(long, default_value_t = 4)]
        max_threads: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Run the deterministic use-after-reclaim probe with both predicates.
    Mutation,
}

fn parse_structure(s: &str) -> Result<Structure, String> {
    s.parse()
        .map_err(|e: stress::UnknownStructure| e.to_string())
}

fn parse_scheme(s: &str) -> Result<SchemeKind, String> {
    s.parse()
        .map_err(|e: stampit::kind::UnknownScheme| e.to_string())
}

fn stress_one<S: FromHook>(
    structure: Structure,
    cfg: &StressConfig,
) -> (StressReport, Option<StressReport>) {
    let make = || Arc::new(S::from_hook(AllocHook::quarantine()));
    let r = stress::stress_run(&make(), structure, cfg, None);
    let shrunk = (!r.is_clean())
        .then(|| stress::shrink(make, structure, cfg, None))
        .flatten();
    (r, shrunk)
}

fn stress_mutated(structure: Structure, cfg: &StressConfig) -> StressReport {
    let d = Arc::new(StampIt::new(StampItConfig {
        hook: AllocHook::quarantine(),
        off_by_one: true,
        ..Default::default()
    }));
    stress::stress_run(&d, structure, cfg, Some(&stress::stamp_sweep))
}

fn print_interleave(r: &InterleaveReport, secs: f64) {
    println!(
        "runs={} steps={} longest={} exhausted={} violations={} stale_hints={} helped_pushes={} secs={secs:.1}",
        r.runs,
        r.steps,
        r.longest,
        r.exhausted,
        r.violations.len(),
        r.stale_hints,
        r.helped_pushes
    );
    for v in r.violations.iter().take(5) {
        let s: Vec<String> = v.schedule.iter().map(|t| t.to_string()).collect();
        println!(
            "violation: {}\n  replay with --replay {}",
            v.message,
            s.join(",")
        );
    }
}

fn run(cmd: Cmd) -> Result<bool> {
    Ok(match cmd {
        Cmd::Stress {
            scheme,
            structure,
            threads,
            ops,
            seed,
            key_range,
            region_span,
            map_capacity,
            mutation,
        } => {
            let cfg = StressConfig {
                threads,
                ops_per_thread: ops,
                seed,
                key_range,
                region_span,
                map_capacity,
                ..Default::default()
            };
            if mutation {
                if scheme != SchemeKind::StampIt {
                    bail!("--mutation applies to stamp-it only");
                }
                let r = stress_mutated(structure, &cfg);
                println!("{r}");
                for e in &r.invariant_errors {
                    println!("invariant: {e}");
                }
                // Finding the injected fault counts as success.
                !r.is_clean()
            } else {
                let (r, shrunk) = with_scheme!(scheme, S => stress_one::<S>(structure, &cfg));
                println!("{r}");
                for e in &r.invariant_errors {
                    println!("invariant: {e}");
                }
                if let Some(s) = shrunk {
                    println!("smallest failing run: {s}");
                }
                r.is_clean()
            }
        }
        Cmd::Interleave {
            threads,
            ops,
            preemptions,
            max_runs,
            random,
            seed,
            replay,
        } => {
            let cfg = InterleaveConfig {
                threads,
                ops,
                preemptions,
                max_runs,
            };
            if let Some(schedule) = replay {
                match interleave::replay(&cfg, &schedule) {
                    Some(msg) => {
                        println!("violation: {msg}");
                        false
                    }
                    None => {
                        println!("schedule is clean");
                        true
                    }
                }
            } else {
                let t = Instant::now();
                let r = match random {
                    Some(n) => interleave::random(&cfg, n, seed),
                    None => interleave::explore(&cfg),
                };
                print_interleave(&r, t.elapsed().as_secs_f64());
                r.is_clean()
            }
        }
        Cmd::Oracle {
            histories,
            max_len,
            max_threads,
            seed,
        } => {
            let mut rng = SmallRng::seed_from_u64(seed);
            let mut mismatches = 0;
            for i in 0..histories {
                let len = rng.gen_range(1..=max_len);
                let threshold = [0, 1, 20][i % 3];
                let h = oracle::random_history(&mut rng, len, max_threads);
                let expected = oracle::predict(&h, 4, threshold)?;
                if oracle::replay(&h, threshold) != expected {
                    mismatches += 1;
                    if mismatches <= 3 {
                        println!("mismatch on history {i}: {h:?}");
                    }
                }
            }
            println!("histories={histories} mismatches={mismatches}");
            mismatches == 0
        }
        Cmd::Mutation => {
            let correct = stress::stamp_mutation_probe(false);
            let broken = stress::stamp_mutation_probe(true);
            println!("violations: correct predicate {correct}, off-by-one predicate {broken}");
            correct == 0 && broken > 0
        }
    })
}

fn main() -> Result<ExitCode> {
    let args = Args::parse();
    Ok(if run(args.cmd)? {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}
