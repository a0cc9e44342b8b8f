mod common;

use common::{balanced_weights, Fixture};
use tubefield::training::{train_gamma, LbfgsConfig, Phase, TrainConfig, TrainControl};

fn schedule(adam: usize, lbfgs: usize) -> TrainConfig {
    TrainConfig {
        adam_epochs: adam,
        lbfgs_epochs: lbfgs,
        lr_init: 1e-3,
        checkpoint_every: 4,
        log_every: 0,
        lbfgs: LbfgsConfig { max_iter: 5, ..LbfgsConfig::default() },
        ..TrainConfig::default()
    }
}

#[test]
fn zero_epochs_leave_parameters_at_initialization() {
    let f = Fixture::new();
    let ctx = f.context(false);
    let (p, report) =
        train_gamma(f.params.clone(), &ctx, &balanced_weights(), &schedule(0, 0), &TrainControl::default()).unwrap();
    assert_eq!(p, f.params);
    assert_eq!(report.rows.len(), 1);
    assert_eq!(report.rows[0].phase, Phase::Final);
}

#[test]
fn training_reduces_the_loss() {
    let f = Fixture::new();
    let ctx = f.context(false);
    let (_, report) =
        train_gamma(f.params.clone(), &ctx, &balanced_weights(), &schedule(40, 5), &TrainControl::default()).unwrap();
    assert_eq!(report.rows.len(), 46);
    assert!(report.final_loss().unwrap() < 0.5 * report.initial_loss().unwrap());
    assert!(report.rows.iter().all(|r| r.total.is_finite() && r.total >= 0.0));
}

#[test]
fn resuming_reproduces_the_uninterrupted_run() {
    let f = Fixture::new();
    let ctx = f.context(false);
    let w = balanced_weights();
    let cfg = schedule(10, 4);
    let (full, full_report) = train_gamma(f.params.clone(), &ctx, &w, &cfg, &TrainControl::default()).unwrap();
    // one stop inside the Adam phase, one inside L-BFGS
    for stop in [7, 12] {
        let dir = tempfile::tempdir().unwrap();
        let first = TrainControl { checkpoint_dir: Some(dir.path().into()), resume: false, stop_after: Some(stop) };
        let (partial, _) = train_gamma(f.params.clone(), &ctx, &w, &cfg, &first).unwrap();
        assert_ne!(partial.weights, full.weights);
        let again = TrainControl { checkpoint_dir: Some(dir.path().into()), resume: true, stop_after: None };
        let (resumed, report) = train_gamma(f.params.clone(), &ctx, &w, &cfg, &again).unwrap();
        assert!(resumed.weights.iter().zip(&full.weights).all(|(a, b)| a.to_bits() == b.to_bits()), "stop {stop}");
        assert_eq!(report, full_report);
    }
}

#[test]
fn reruns_are_bitwise_identical() {
    let f = Fixture::new();
    let ctx = f.context(false);
    let cfg = schedule(6, 2);
    let a = train_gamma(f.params.clone(), &ctx, &balanced_weights(), &cfg, &TrainControl::default()).unwrap();
    let b = train_gamma(f.params.clone(), &ctx, &balanced_weights(), &cfg, &TrainControl::default()).unwrap();
    assert_eq!(a, b);
}
