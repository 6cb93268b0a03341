use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, ValueEnum};

use stampit::kind::SchemeKind;
use stampit::verify::stress::Structure;
use stampit_bench::{run_efficiency, run_throughput, write_csv, Allocator, BenchConfig, MapConfig};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Throughput,
    Efficiency,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AllocatorArg {
    System,
    Quarantine,
}

/// Reclamation scheme benchmarks with CSV output.
#[derive(Debug, Parser)]
#[command(name = "bench", version)]
struct Args {
    /// q, l or h (queue, list, hashmap).
    #[arg(long, value_parser = parse_structure)]
    benchmark: Structure,
    /// stamp-it, hpr, er, ner or qsr.
    #[arg(long, value_parser = parse_scheme)]
    scheme: SchemeKind,
    #[arg(long, value_enum, default_value_t = Mode::Throughput)]
    mode: Mode,
    #[arg(long, default_value_t = 4)]
    threads: usize,
    #[arg(long, default_value_t = 1.0)]
    trial_seconds: f64,
    #[arg(long, default_value_t = 5)]
    trials: usize,
    /// Efficiency mode only.
    #[arg(long, default_value_t = 3)]
    runs: usize,
    /// Percentage of list operations that insert or remove.
    #[arg(long, default_value_t = 20)]
    workload: u32,
    #[arg(long, default_value_t = 10)]
    list_size: u64,
    #[arg(long, default_value_t = 100)]
    region_span: u64,
    /// Efficiency samples per trial.
    #[arg(long, default_value_t = 50)]
    samples: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = AllocatorArg::System)]
    allocator: AllocatorArg,
    #[arg(long, default_value_t = 3000)]
    map_keys: u64,
    #[arg(long, default_value_t = 100)]
    sim_keys: u64,
    #[arg(long, default_value_t = 256)]
    payload: usize,
    #[arg(long, default_value_t = 1000)]
    capacity: usize,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_structure(s: &str) -> Result<Structure, String> {
    s.parse()
        .map_err(|e: stampit::verify::stress::UnknownStructure| e.to_string())
}

fn parse_scheme(s: &str) -> Result<SchemeKind, String> {
    s.parse()
        .map_err(|e: stampit::kind::UnknownScheme| e.to_string())
}

fn main() -> Result<()> {
    let a = Args::parse();
    let cfg = BenchConfig {
        benchmark: a.benchmark,
        scheme: a.scheme,
        threads: a.threads,
        trial_seconds: a.trial_seconds,
        trials: a.trials,
        runs: a.runs,
        workload: a.workload,
        list_size: a.list_size,
        region_span: a.region_span,
        samples: a.samples,
        seed: a.seed,
        allocator: match a.allocator {
            AllocatorArg::System => Allocator::System,
            AllocatorArg::Quarantine => Allocator::Quarantine,
        },
        map: MapConfig {
            key_space: a.map_keys,
            keys_per_sim: a.sim_keys,
            payload_bytes: a.payload,
            capacity: a.capacity,
        },
    };
    let out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(io::stdout().lock()),
    };
    match a.mode {
        Mode::Throughput => {
            let trials = run_throughput(&cfg)?;
            for t in &trials {
                eprintln!(
                    "{} {} threads={} trial={} avg_ns_per_op={:.1}",
                    cfg.benchmark,
                    cfg.scheme,
                    cfg.threads,
                    t.trial,
                    t.avg_ns_per_op()
                );
            }
            let rows: Vec<_> = trials.into_iter().flat_map(|t| t.rows).collect();
            write_csv(out, &rows)?;
        }
        Mode::Efficiency => {
            let report = run_efficiency(&cfg)?;
            write_csv(out, &report.rows)?;
        }
    }
    Ok(())
}
