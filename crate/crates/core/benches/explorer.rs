//! Sequential vs parallel bounded exploration on the standard two-proposer
//! configurations. The visited state set is identical in both modes; the
//! comparison is pure wall-clock.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use opaxos::checker::{explore, ExploreConfig, Protocol};

fn configs() -> Vec<(&'static str, ExploreConfig)> {
    let single_attempt = |protocol| ExploreConfig {
        attempts: 1,
        crashes: 0,
        ..ExploreConfig::new(protocol)
    };
    let capped = |protocol| ExploreConfig {
        budget: 400_000,
        ..ExploreConfig::new(protocol)
    };
    vec![
        (
            "streamlined-1-attempt",
            single_attempt(Protocol::Streamlined),
        ),
        ("refpaxos-1-attempt", single_attempt(Protocol::RefPaxos)),
        ("streamlined-400k-budget", capped(Protocol::Streamlined)),
    ]
}

fn bench_explorer(c: &mut Criterion) {
    let mut group = c.benchmark_group("explore");
    group.sample_size(10);
    for (name, cfg) in configs() {
        let sequential = ExploreConfig {
            parallel: false,
            ..cfg.clone()
        };
        group.bench_with_input(
            BenchmarkId::new("sequential", name),
            &sequential,
            |b, cfg| {
                b.iter(|| {
                    let report = explore(cfg);
                    assert!(report.ok());
                    report.states
                })
            },
        );
        let parallel = ExploreConfig {
            parallel: true,
            ..cfg
        };
        group.bench_with_input(BenchmarkId::new("parallel", name), &parallel, |b, cfg| {
            b.iter(|| {
                let report = explore(cfg);
                assert!(report.ok());
                report.states
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_explorer);
criterion_main!(benches);
