use stampit::kind::SchemeKind;
use stampit::verify::stress::Structure;
use stampit_bench::*;

fn quick(benchmark: Structure, scheme: SchemeKind, threads: usize) -> BenchConfig {
    BenchConfig {
        benchmark,
        scheme,
        threads,
        trial_seconds: 0.05,
        trials: 2,
        runs: 1,
        samples: 5,
        ..Default::default()
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let ok = BenchConfig::default();
    assert_eq!(ok.validate(), Ok(()));
    assert_eq!(ok.key_range(), 20);
    let cases = [
        (
            BenchConfig {
                threads: 0,
                ..ok.clone()
            },
            ConfigError::NoThreads,
        ),
        (
            BenchConfig {
                workload: 101,
                ..ok.clone()
            },
            ConfigError::Workload(101),
        ),
        (
            BenchConfig {
                trials: 0,
                ..ok.clone()
            },
            ConfigError::NoTrials,
        ),
        (
            BenchConfig {
                list_size: 0,
                ..ok.clone()
            },
            ConfigError::EmptyList,
        ),
        (
            BenchConfig {
                samples: 0,
                ..ok.clone()
            },
            ConfigError::NoSamples,
        ),
    ];
    for (cfg, err) in cases {
        assert_eq!(run_throughput(&cfg).unwrap_err(), err);
    }
    let nan = BenchConfig {
        trial_seconds: f64::NAN,
        ..ok
    };
    assert!(matches!(nan.validate(), Err(ConfigError::TrialSeconds(_))));
}

#[test]
fn queue_single_thread_reports_one_row_per_trial() {
    let cfg = BenchConfig {
        trials: 1,
        ..quick(Structure::Queue, SchemeKind::StampIt, 1)
    };
    let trials = run_throughput(&cfg).unwrap();
    assert_eq!(trials.len(), 1);
    let rows = &trials[0].rows;
    assert_eq!(rows.len(), 1);
    assert!(rows[0].ops > 0);
    assert!(rows[0].ns_per_op > 0.0);
    assert_eq!(trials[0].avg_ns_per_op(), rows[0].ns_per_op);
}

#[test]
fn list_workload_controls_the_mix() {
    let mut cfg = quick(Structure::List, SchemeKind::Hpr, 2);
    cfg.workload = 0;
    for t in run_throughput(&cfg).unwrap() {
        assert_eq!(t.mix.inserts + t.mix.removes, 0);
        assert!(t.mix.searches > 0);
    }
    cfg.workload = 100;
    for t in run_throughput(&cfg).unwrap() {
        assert_eq!(t.mix.searches, 0);
        assert!(t.mix.inserts > 0 && t.mix.removes > 0);
    }
}

#[test]
fn throughput_csv_has_the_schema_and_row_count() {
    let cfg = quick(Structure::List, SchemeKind::Qsr, 3);
    let rows: Vec<_> = run_throughput(&cfg)
        .unwrap()
        .into_iter()
        .flat_map(|t| t.rows)
        .collect();
    let mut buf = Vec::new();
    write_csv(&mut buf, &rows).unwrap();
    let n = check_schema(std::str::from_utf8(&buf).unwrap(), &THROUGHPUT_COLUMNS).unwrap();
    assert_eq!(n, cfg.trials * cfg.threads);
}

#[test]
fn efficiency_rows_conserve_and_have_fixed_shape() {
    for benchmark in Structure::ALL {
        let cfg = quick(benchmark, SchemeKind::Ner, 2);
        let r = run_efficiency(&cfg).unwrap();
        assert_eq!(r.rows.len(), cfg.runs * cfg.trials * cfg.samples);
        assert!(r.rows.iter().all(conserves));
        let mut buf = Vec::new();
        write_csv(&mut buf, &r.rows).unwrap();
        check_schema(std::str::from_utf8(&buf).unwrap(), &EFFICIENCY_COLUMNS).unwrap();
    }
}

#[test]
fn single_thread_trials_end_with_nothing_pending() {
    for scheme in SchemeKind::ALL {
        for benchmark in Structure::ALL {
            let cfg = BenchConfig {
                trials: 3,
                ..quick(benchmark, scheme, 1)
            };
            let r = run_efficiency(&cfg).unwrap();
            let trial_ends = r.rows.iter().filter(|r| r.sample == cfg.samples - 1);
            for row in trial_ends.filter(|r| r.trial + 1 < cfg.trials) {
                assert_eq!(row.retired, row.reclaimed, "{scheme} {benchmark} {row:?}");
            }
            assert_eq!(
                r.rows.last().unwrap().unreclaimed,
                0,
                "{scheme} {benchmark}"
            );
        }
    }
}

#[test]
fn hashmap_quiescent_residue_respects_each_bound() {
    for scheme in SchemeKind::ALL {
        let cfg = quick(Structure::HashMap, scheme, 4);
        let r = run_efficiency(&cfg).unwrap();
        let last = r.rows.last().unwrap();
        assert!(
            last.unreclaimed <= r.residual_bounds[0],
            "{scheme}: {last:?}"
        );
        if scheme == SchemeKind::StampIt {
            assert_eq!(last.unreclaimed, 0);
        }
    }
}

#[test]
fn warm_map_hit_rate_rises_across_trials() {
    let cfg = BenchConfig {
        trials: 4,
        trial_seconds: 0.003,
        region_span: 1,
        map: MapConfig {
            key_space: 3000,
            keys_per_sim: 100,
            payload_bytes: 64,
            capacity: 3000,
        },
        ..quick(Structure::HashMap, SchemeKind::StampIt, 1)
    };
    let r = run_efficiency(&cfg).unwrap();
    let rates: Vec<f64> = r.mixes[0].iter().map(OpMix::hit_rate).collect();
    assert!(rates.windows(2).all(|w| w[1] >= w[0] - 0.02), "{rates:?}");
    assert!(rates[rates.len() - 1] > rates[0], "{rates:?}");
}

#[test]
fn cold_map_misses_every_first_lookup() {
    let cfg = BenchConfig {
        trials: 1,
        region_span: 1,
        map: MapConfig {
            key_space: 1_000_000_000,
            ..MapConfig::default()
        },
        ..quick(Structure::HashMap, SchemeKind::Er, 1)
    };
    let t = &run_throughput(&cfg).unwrap()[0];
    assert!(t.mix.misses > 0);
    assert!(t.mix.hits <= t.mix.misses / 1000);
}

#[test]
fn partial_results_are_deterministic() {
    assert_eq!(partial_result(7, 32), partial_result(7, 32));
    assert_ne!(partial_result(7, 32), partial_result(8, 32));
    assert_eq!(partial_result(1, 256).len(), 256);
}
