use lmt_core::cohort::{extract_pairs, generate_cohort, load_cohort, save_cohort, CohortConfig, Split};
use lmt_core::diffcore::{load_checkpoint, save_checkpoint};
use lmt_core::training::{evaluate_next_visit, train_grading, train_setup, GradingMethod, LmtConfig, PropagatorKind, Setup, Task};
use lmt_core::Error;

fn small() -> CohortConfig {
    CohortConfig { n_patients: 80, feature_dim: 8, ..CohortConfig::default() }
}

fn quick(setup: Setup, model: PropagatorKind) -> LmtConfig {
    LmtConfig {
        setup,
        model,
        epochs: 2,
        batch_size: 32,
        encoder_widths: vec![16, 16, 8, 8],
        node_hidden: 8,
        ..LmtConfig::default()
    }
}

#[test]
fn cohort_is_a_function_of_its_seed() {
    let a = generate_cohort(&small(), 7).unwrap();
    assert_eq!(a, generate_cohort(&small(), 7).unwrap());
    assert_ne!(a, generate_cohort(&small(), 8).unwrap());
}

#[test]
fn cohort_file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.bin");
    let c = generate_cohort(&small(), 3).unwrap();
    save_cohort(&c, &path).unwrap();
    assert_eq!(load_cohort(&path).unwrap(), c);

    std::fs::write(&path, b"not a cohort").unwrap();
    assert!(matches!(load_cohort(&path), Err(Error::Format(_))));
}

#[test]
fn pairs_never_cross_patients_or_splits() {
    let c = generate_cohort(&small(), 5).unwrap();
    let all = extract_pairs(&c, None);
    let by_split: usize = [Split::Train, Split::Val, Split::Test].iter().map(|&s| extract_pairs(&c, Some(s)).len()).sum();
    assert_eq!(all.len(), by_split);
    for p in &all {
        assert!(p.first.time().value() < p.second.time().value());
        assert!(p.first.patient == p.patient && p.second.patient == p.patient);
        assert!(p.first.eye == p.eye && p.second.eye == p.eye);
    }
}

#[test]
fn every_setup_trains_and_scores() {
    let c = generate_cohort(&small(), 11).unwrap();
    let test = extract_pairs(&c, Some(Split::Test));
    for (setup, model) in [
        (Setup::S1, PropagatorKind::Node),
        (Setup::S2, PropagatorKind::Node),
        (Setup::S3, PropagatorKind::Node),
        (Setup::S1, PropagatorKind::TLstm),
        (Setup::S2, PropagatorKind::TLstm),
    ] {
        let cfg = quick(setup, model);
        let t = train_setup(&c, &cfg).unwrap();
        assert!(t.history.failure.is_none(), "{setup} {model:?}: {:?}", t.history.failure);
        assert_eq!(t.history.epochs.len(), 2);
        let auc = evaluate_next_visit(&t.model, &cfg, &test, Task::SeverePlus).unwrap();
        assert!((0.0..=1.0).contains(&auc));
    }
}

#[test]
fn tlstm_with_s3_is_rejected() {
    let c = generate_cohort(&small(), 11).unwrap();
    assert!(train_setup(&c, &quick(Setup::S3, PropagatorKind::TLstm)).is_err());
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let c = generate_cohort(&small(), 2).unwrap();
    let cfg = quick(Setup::S3, PropagatorKind::Node);
    let a = train_setup(&c, &cfg).unwrap();
    let b = train_setup(&c, &cfg).unwrap();
    assert_eq!(a.model.params, b.model.params);

    let path = dir.path().join("m.ckpt");
    save_checkpoint(&a.model.params, &path).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), a.model.params);

    let g1 = train_grading(&c, &cfg, GradingMethod::Lmm).unwrap();
    let g2 = train_grading(&c, &cfg, GradingMethod::Lmm).unwrap();
    assert_eq!(g1.kappa.to_bits(), g2.kappa.to_bits());
}
