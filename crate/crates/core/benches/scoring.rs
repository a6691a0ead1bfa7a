use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use igr_core::enumerate::Mechanism;
use igr_core::fitness::score_metric;
use igr_core::genetic::{evolve, GaConfig};
use igr_core::inference::Statistic;
use igr_core::metrics::{DesignContext, Metric};
use igr_core::pipeline::{frac_expo, interference_fitness};
use igr_core::simgen::{gen_settlements, gen_students, GenderMode, SettlementParams};
use igr_core::{par, RngSpec};

fn modes() -> [(&'static str, bool); 2] {
    [("parallel", false), ("sequential", true)]
}

fn run<R>(seq: bool, f: impl FnOnce() -> R) -> R {
    if seq {
        par::sequential(f)
    } else {
        f()
    }
}

fn bench_scoring(c: &mut Criterion) {
    let students = gen_students(120, GenderMode::FixedHalf, RngSpec::new(1)).unwrap();
    let ctx = DesignContext::new(students.covariates.clone());
    let pool = Mechanism::Complete { n: 120, arms: 2 }
        .draw(5_000, RngSpec::new(2))
        .unwrap();
    let villages = gen_settlements(&SettlementParams::new(400, 20, 0.5), RngSpec::new(3)).unwrap();
    let vctx = villages.context();
    let vpool = Mechanism::Cluster {
        n_clusters: 20,
        arms: 2,
    }
    .draw(5_000, RngSpec::new(4))
    .unwrap();

    let mut g = c.benchmark_group("score_metric");
    g.sample_size(10);
    for (name, seq) in modes() {
        g.bench_with_input(
            BenchmarkId::new("max_mahalanobis", name),
            &seq,
            |b, &seq| {
                let m = Metric::MaxMahalanobis {
                    exclude_salient: false,
                };
                b.iter(|| run(seq, || score_metric(&pool.candidates, &m, &ctx).unwrap()))
            },
        );
        g.bench_with_input(
            BenchmarkId::new("sum_max_abs_smd", name),
            &seq,
            |b, &seq| {
                let m = Metric::SumMaxAbsSmd {
                    exclude_salient: false,
                };
                b.iter(|| run(seq, || score_metric(&pool.candidates, &m, &ctx).unwrap()))
            },
        );
        g.bench_with_input(
            BenchmarkId::new("frac_ctrl_exposed", name),
            &seq,
            |b, &seq| {
                let m = frac_expo();
                b.iter(|| run(seq, || score_metric(&vpool.candidates, &m, &vctx).unwrap()))
            },
        );
        g.bench_with_input(
            BenchmarkId::new("inv_min_euclidean", name),
            &seq,
            |b, &seq| {
                b.iter(|| {
                    run(seq, || {
                        score_metric(&vpool.candidates, &Metric::InvMinEuclidean, &vctx).unwrap()
                    })
                })
            },
        );
    }
    g.finish();

    let mut g = c.benchmark_group("evolve");
    g.sample_size(10);
    let ga = GaConfig {
        generations: 10,
        population: Some(200),
        ..GaConfig::default()
    };
    let fitness = interference_fitness(0.5, frac_expo());
    for (name, seq) in modes() {
        g.bench_with_input(BenchmarkId::new("interference", name), &seq, |b, &seq| {
            b.iter(|| {
                run(seq, || {
                    evolve(&vpool, &fitness, &vctx, &ga, RngSpec::new(5)).unwrap()
                })
            })
        });
    }
    g.finish();

    let mut g = c.benchmark_group("fisher_null");
    g.sample_size(10);
    let refs: Vec<_> = pool.candidates.iter().take(500).collect();
    let prepared = Statistic::default().prepare(&refs, &ctx).unwrap();
    let y = students.exam().to_vec();
    for (name, seq) in modes() {
        g.bench_with_input(BenchmarkId::new("m500", name), &seq, |b, &seq| {
            b.iter(|| run(seq, || prepared.test(&y, 0)))
        });
    }
    g.finish();
}

criterion_group!(benches, bench_scoring);
criterion_main!(benches);
