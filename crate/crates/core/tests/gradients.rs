mod common;

use common::fd::{self, TOL};

fn check(name: &str, errs: Vec<f64>) {
    assert!(errs.len() >= 20, "{name}: only {} instances", errs.len());
    let worst = errs.iter().cloned().fold(0.0, f64::max);
    assert!(worst <= TOL, "{name}: worst relative error {worst:.3e}");
}

#[test]
fn potential_loss_gradient_matches_finite_differences() {
    check("potential_loss", fd::potential_loss_errors());
}

#[test]
fn anchor_term_gradient_matches_finite_differences() {
    check("anchor_term", fd::anchor_term_errors());
}

#[test]
fn map_loss_gradient_matches_finite_differences() {
    check("map_loss", fd::map_loss_errors());
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    check("cross_entropy", fd::cross_entropy_errors());
}

#[test]
fn dsm_gradient_matches_finite_differences() {
    check("dsm", fd::dsm_errors());
}

#[test]
fn barycentric_regression_gradient_matches_finite_differences() {
    check("barycentric_regression", fd::barycentric_regression_errors());
}
