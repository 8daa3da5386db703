mod common;

use common::gradients::{oracle_self_check, run_suite, GRAD_TOL};

#[test]
fn oracle_detects_nothing_on_exact_gradient() {
    assert!(oracle_self_check() < 1e-8);
}

#[test]
fn every_operation_matches_finite_differences() {
    for (op, err) in run_suite() {
        println!("{op:<18} {err:.2e}");
        assert!(err < GRAD_TOL, "{op}: relative error {err:e}");
    }
}
