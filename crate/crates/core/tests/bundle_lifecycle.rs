use std::fs;

use igr_core::bundle::{
    append_draw, load_bundle, preregister, read_audit, verify_bundle, BundleMode,
};
use igr_core::design::{add_mirrors, AcceptedDesign, MirrorGroup};
use igr_core::enumerate::{enumerate_complete, enumerate_group_formation};
use igr_core::fitness::{score_pool, FitnessConfig, RestrictionRule};
use igr_core::metrics::{DesignContext, Metric};
use igr_core::simgen::{gen_students, GenderMode};
use igr_core::{dedup, Error, RngSpec};

fn unit_design(seed: u64) -> (AcceptedDesign, DesignContext) {
    let s = gen_students(24, GenderMode::FixedHalf, RngSpec::new(seed)).unwrap();
    let ctx = DesignContext::new(s.covariates);
    let pool = dedup(enumerate_complete(24, 2, 400, RngSpec::new(seed + 1)).unwrap());
    let cfg = FitnessConfig::identity(Metric::MaxMahalanobis {
        exclude_salient: false,
    });
    let scores = score_pool(&pool, &cfg, &ctx).unwrap();
    let d = AcceptedDesign::restrict(pool, &scores, cfg, RestrictionRule::top_m(20)).unwrap();
    (d, ctx)
}

#[test]
fn preregister_load_draw_audit() {
    let (d, ctx) = unit_design(3);
    let mut d = add_mirrors(d, &ctx, MirrorGroup::Cyclic, false).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let digest = preregister(&mut d, dir.path(), BundleMode::Matrix).unwrap();
    assert!(d.is_locked());
    assert_eq!(d.bundle_hash.as_deref(), Some(digest.as_str()));

    let loaded = load_bundle(dir.path()).unwrap();
    loaded.verify_digest().unwrap();
    assert_eq!(loaded.design().unwrap(), d);

    let mut official = loaded.design().unwrap();
    let z = official.draw_official(RngSpec::with_stream(42, 0)).unwrap();
    assert!(official.contains(&z));
    let rec = official.audit.last().unwrap().clone();
    append_draw(dir.path(), &rec).unwrap();
    assert_eq!(read_audit(dir.path()).unwrap(), vec![rec]);
    // the audit trail is outside the digest
    let report = verify_bundle(dir.path(), true).unwrap();
    assert!(report.ok(), "{report:?}");
    assert_eq!(
        load_bundle(dir.path())
            .unwrap()
            .design()
            .unwrap()
            .audit
            .len(),
        1
    );

    assert!(matches!(
        preregister(&mut d, dir.path(), BundleMode::Matrix),
        Err(Error::AlreadyLocked)
    ));
    assert!(matches!(
        add_mirrors(d, &ctx, MirrorGroup::Cyclic, false),
        Err(Error::AlreadyLocked)
    ));
}

#[test]
fn code_reference_bundle_replays_pool() {
    let (mut d, _) = unit_design(5);
    let dir = tempfile::tempdir().unwrap();
    preregister(&mut d, dir.path(), BundleMode::CodeReference).unwrap();
    let loaded = load_bundle(dir.path()).unwrap();
    assert_eq!(loaded.rows.len(), 20);
    let rebuilt = loaded.design().unwrap();
    assert_eq!(rebuilt.pool.candidates, d.pool.candidates);
    assert_eq!(rebuilt.accept_mask, d.accept_mask);
    assert!(verify_bundle(dir.path(), true).unwrap().ok());
}

#[test]
fn group_design_bundle_round_trips() {
    let s = gen_students(120, GenderMode::FixedHalf, RngSpec::new(9)).unwrap();
    let ctx = DesignContext::new(s.covariates.clone());
    let pool = dedup(
        enumerate_group_formation(&s.covariates, &[0.3, 0.5, 0.7], 20, 300, RngSpec::new(10))
            .unwrap(),
    );
    let cfg = FitnessConfig::identity(Metric::SumMaxAbsSmd {
        exclude_salient: true,
    });
    let scores = score_pool(&pool, &cfg, &ctx).unwrap();
    let mut d = AcceptedDesign::restrict(pool, &scores, cfg, RestrictionRule::top_m(30)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    preregister(&mut d, dir.path(), BundleMode::Matrix).unwrap();
    assert_eq!(load_bundle(dir.path()).unwrap().design().unwrap(), d);
    assert!(verify_bundle(dir.path(), true).unwrap().ok());
}

#[test]
fn edited_csv_fails_digest() {
    let (mut d, _) = unit_design(7);
    let dir = tempfile::tempdir().unwrap();
    preregister(&mut d, dir.path(), BundleMode::Matrix).unwrap();
    let p = dir.path().join("allocations.csv");
    let mut csv = fs::read(&p).unwrap();
    let last = csv.len() - 2;
    csv[last] = if csv[last] == b'0' { b'1' } else { b'0' };
    fs::write(&p, csv).unwrap();
    let report = verify_bundle(dir.path(), false).unwrap();
    assert!(!report.ok());
    let digest = report.checks.iter().find(|c| c.name == "digest").unwrap();
    assert!(!digest.passed);
}
