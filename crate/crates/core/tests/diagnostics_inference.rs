use igr_core::design::{AcceptedDesign, MirrorGroup};
use igr_core::diagnostics::{
    diagnose, pairwise_assignment_correlation, score_spread, tradeoff_grid, CorrelationKind,
};
use igr_core::enumerate::enumerate_complete;
use igr_core::fitness::{extend_scores, score_pool, FitnessConfig, PoolScores, RestrictionRule};
use igr_core::inference::{fisher_test, Statistic};
use igr_core::metrics::{DesignContext, Metric};
use igr_core::simgen::{gen_students, GenderMode};
use igr_core::{dedup, Allocation, AllocationPool, Candidate, Error, Level, Provenance, RngSpec};
use rand::seq::SliceRandom;
use rand::Rng;

fn prov(n: usize) -> Provenance {
    Provenance {
        mechanism: "test".into(),
        rng: None,
        parameters: serde_json::Value::Null,
        drawn: n,
        before_dedup: None,
        after_dedup: None,
        appended_mirrors: 0,
        replayable: false,
    }
}

/// All balanced binary allocations of `n` units.
fn exhaustive(n: usize) -> Vec<Candidate> {
    (0u32..1 << n)
        .filter(|b| b.count_ones() as usize == n / 2)
        .map(|b| {
            let z = (0..n).map(|i| ((b >> i) & 1) as u8).collect();
            Candidate::Labels(Allocation::new(z, 2, Level::Unit).unwrap())
        })
        .collect()
}

#[test]
fn full_complete_randomization_hits_closed_form() {
    for n in [4usize, 6, 8] {
        let all = exhaustive(n);
        let refs: Vec<&Candidate> = all.iter().collect();
        let r = pairwise_assignment_correlation(&refs).unwrap();
        let expect = -1.0 / (n as f64 - 1.0);
        assert_eq!(r.kind, CorrelationKind::Pearson);
        assert_eq!(r.pairs, n * (n - 1) / 2);
        assert!(
            (r.min - expect).abs() < 1e-12 && (r.max - expect).abs() < 1e-12,
            "n={n}: {r:?}"
        );
        assert!(!r.flagged);
    }
}

#[test]
fn n4_brute_force_minus_one_third() {
    let all = exhaustive(4);
    assert_eq!(all.len(), 6);
    // direct Pearson on indicator columns
    let z: Vec<Vec<f64>> = all
        .iter()
        .map(|c| {
            c.as_labels()
                .unwrap()
                .labels
                .iter()
                .map(|&v| v as f64)
                .collect()
        })
        .collect();
    let col = |i: usize| -> Vec<f64> { z.iter().map(|r| r[i]).collect() };
    let pearson = |a: &[f64], b: &[f64]| {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    };
    let refs: Vec<&Candidate> = all.iter().collect();
    let (_, vals, _) = igr_core::diagnostics::pair_values(&refs).unwrap();
    let mut k = 0;
    for i in 0..4 {
        for j in i + 1..4 {
            let p = pearson(&col(i), &col(j));
            assert!((p + 1.0 / 3.0).abs() < 1e-12);
            assert!((vals[k] - p).abs() < 1e-12);
            k += 1;
        }
    }
}

#[test]
fn mirror_pair_only_is_flagged() {
    let z = vec![1, 0, 1, 0, 0, 1];
    let a = Candidate::Labels(Allocation::new(z.clone(), 2, Level::Unit).unwrap());
    let b = Candidate::Labels(
        Allocation::new(z.iter().map(|v| 1 - v).collect(), 2, Level::Unit).unwrap(),
    );
    let r = pairwise_assignment_correlation(&[&a, &b]).unwrap();
    assert!(r.flagged);
    assert_eq!(r.min.abs(), 1.0);
    assert_eq!(r.max.abs(), 1.0);
}

#[test]
fn score_spread_cases() {
    let s = score_spread(&(1..=100).map(f64::from).collect::<Vec<_>>()).unwrap();
    assert!((s.q1 - 25.75).abs() < 1e-12 && (s.q3 - 75.25).abs() < 1e-12);
    assert!((49.5..=74.5).contains(&s.iqr));
    assert!(!s.low_discrimination);
    assert_eq!(s.histogram.total(), 100);
    assert!(score_spread(&[2.0; 30]).unwrap().low_discrimination);
    assert!(score_spread(&[f64::INFINITY; 3]).is_err());
    let mixed = score_spread(&[1.0, 2.0, f64::INFINITY]).unwrap();
    assert_eq!(mixed.infinite_count, 1);
}

#[test]
fn anti_correlated_metrics_fill_anti_diagonal() {
    let a: Vec<f64> = (0..100).map(f64::from).collect();
    let b: Vec<f64> = a.iter().map(|v| 99.0 - v).collect();
    let g = tradeoff_grid(&a, &b, 5, None).unwrap();
    for (i, row) in g.counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if i + j == 4 {
                assert_eq!(c, 20);
            } else {
                assert_eq!(c, 0);
            }
        }
    }
    let same = tradeoff_grid(&[3.0; 7], &[1.0; 7], 4, None).unwrap();
    assert_eq!(same.counts.iter().flatten().filter(|&&c| c > 0).count(), 1);
}

fn student_design(
    seed: u64,
    n: usize,
    pool: usize,
    m: usize,
) -> (AcceptedDesign, DesignContext, Vec<f64>, PoolScores) {
    let s = gen_students(n, GenderMode::FixedHalf, RngSpec::new(seed)).unwrap();
    let y = s.exam().to_vec();
    let ctx = DesignContext::new(s.covariates);
    let p = dedup(enumerate_complete(n, 2, pool, RngSpec::new(seed + 1)).unwrap());
    let cfg = FitnessConfig::weighted(vec![
        (
            Metric::MaxMahalanobis {
                exclude_salient: false,
            },
            0.5,
        ),
        (
            Metric::SumMaxAbsSmd {
                exclude_salient: false,
            },
            0.5,
        ),
    ]);
    let scores = score_pool(&p, &cfg, &ctx).unwrap();
    let d = AcceptedDesign::restrict_orbits(
        p,
        &scores,
        cfg,
        RestrictionRule::top_m(m),
        MirrorGroup::Cyclic,
        &ctx,
    )
    .unwrap();
    (d, ctx, y, scores)
}

#[test]
fn diagnostics_report_shape() {
    let (d, ctx, _, scores) = student_design(1, 30, 1000, 50);
    assert!(diagnose(&d, Some(&scores), 10).is_err() || scores.fitness.len() == d.pool.len());
    let scores = extend_scores(&scores, &d.pool.candidates, &d.fitness, &ctx).unwrap();
    assert_eq!(scores.fitness, d.scores);
    let r = diagnose(&d, Some(&scores), 10).unwrap();
    assert_eq!(r.scores.n, d.pool.len());
    assert_eq!(
        r.scores.histogram.total() + r.scores.infinite_count,
        d.pool.len()
    );
    assert_eq!(r.acceptance.accepted, 50);
    assert_eq!(r.tradeoffs.len(), 1);
    let t = &r.tradeoffs[0].grid;
    assert_eq!(t.counts.iter().flatten().sum::<usize>(), d.pool.len());
    assert_eq!(
        t.accepted_counts
            .as_ref()
            .unwrap()
            .iter()
            .flatten()
            .sum::<usize>(),
        50
    );
    let c = r.correlation.as_ref().unwrap();
    assert!(c.min >= -1.0 && c.max <= 1.0);
    let json = serde_json::to_value(&r).unwrap();
    assert!(json["scores"]["histogram"]["edges"].is_array());
}

#[test]
fn fisher_is_exact_at_three_levels() {
    // mirrored accepted sets pair T with -T, so P(p <= a) = floor(100a)/100
    let mut hits = [0usize; 3];
    let alphas = [0.01, 0.05, 0.1];
    let mut total = 0;
    for dset in 0..10u64 {
        let (d, ctx, y, _) = student_design(100 + dset, 40, 3000, 200);
        let acc: Vec<Candidate> = d.accepted().into_iter().cloned().collect();
        let mut r = RngSpec::new(dset).rng();
        for _ in 0..300 {
            let z = &acc[r.random_range(0..acc.len())];
            let t = fisher_test(&d, &ctx, &y, z, &Statistic::default()).unwrap();
            assert!(t.p_value >= 1.0 / 200.0 && t.p_value <= 1.0);
            for (h, &a) in hits.iter_mut().zip(&alphas) {
                *h += t.rejects(a) as usize;
            }
            total += 1;
        }
    }
    for (h, a) in hits.iter().zip(alphas) {
        let rate = *h as f64 / total as f64;
        let sd = (a * (1.0 - a) / total as f64).sqrt();
        assert!(rate <= a + 3.0 * sd, "alpha {a}: rate {rate}");
    }
}

#[test]
fn p_value_ignores_pool_order() {
    let (d, ctx, y, _) = student_design(7, 24, 500, 40);
    let z = d.accepted()[3].clone();
    let base = fisher_test(&d, &ctx, &y, &z, &Statistic::default()).unwrap();
    let mut idx: Vec<usize> = (0..d.pool.len()).collect();
    idx.shuffle(&mut RngSpec::new(3).rng());
    let cands: Vec<Candidate> = idx.iter().map(|&i| d.pool.candidates[i].clone()).collect();
    let scores: Vec<f64> = idx.iter().map(|&i| d.scores[i]).collect();
    let pool = AllocationPool::new(cands, prov(idx.len())).unwrap();
    let ps = igr_core::fitness::combine(
        vec![scores],
        &FitnessConfig::identity(Metric::InvMinEuclidean),
    )
    .unwrap();
    // same accepted set in a different order
    let mut shuffled =
        AcceptedDesign::restrict(pool, &ps, d.fitness.clone(), RestrictionRule::top_m(40)).unwrap();
    shuffled.accept_mask = idx.iter().map(|&i| d.accept_mask[i]).collect();
    let again = fisher_test(&shuffled, &ctx, &y, &z, &Statistic::default()).unwrap();
    assert_eq!(base.p_value, again.p_value);
    assert_eq!(base.observed, again.observed);
}

#[test]
fn fisher_edge_cases() {
    let (d, ctx, y, _) = student_design(9, 20, 200, 2);
    let acc = d.accepted()[0].clone();
    let single = {
        let mut s = d.clone();
        let keep = d.accepted_indices()[0];
        s.accept_mask = (0..s.pool.len()).map(|i| i == keep).collect();
        s
    };
    assert_eq!(
        fisher_test(&single, &ctx, &y, &acc, &Statistic::default())
            .unwrap()
            .p_value,
        1.0
    );
    let outside = (0..d.pool.len()).find(|&i| !d.accept_mask[i]).unwrap();
    let err = fisher_test(
        &d,
        &ctx,
        &y,
        &d.pool.candidates[outside],
        &Statistic::default(),
    )
    .unwrap_err();
    assert!(matches!(err, Error::NotAccepted));
}
