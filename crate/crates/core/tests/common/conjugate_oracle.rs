//! Closed forms of the conjugate families, written out independently.

use super::*;
use esuot::divergence::{fstar_eval, ConjugateKind};

pub fn closed_derivative(kind: &str, z: f64) -> f64 {
    match kind {
        "kl" => (z - 1.0).exp(),
        "chi2" => {
            if z > -2.0 {
                z / 2.0 + 1.0
            } else {
                0.0
            }
        }
        "softplus" => 1.0 / (1.0 + (-z).exp()),
        _ => panic!("unknown conjugate {kind}"),
    }
}

/// Largest relative deviation of value and derivative over `points` random
/// arguments per family, staying 1e-3 away from the chi-square kink.
pub fn worst_error(points: usize) -> f64 {
    let families = [(ConjugateKind::Kl, "kl"), (ConjugateKind::ChiSq, "chi2"), (ConjugateKind::Softplus, "softplus")];
    let mut r = rng(2024);
    let mut worst: f64 = 0.0;
    for (kind, name) in families {
        let mut seen = 0;
        while seen < points {
            let z: f64 = r.random_range(-6.0..6.0);
            if kind == ConjugateKind::ChiSq && (z + 2.0).abs() < 1e-3 {
                continue;
            }
            seen += 1;
            let (v, d) = fstar_eval(kind, z).unwrap();
            let ev = naive_fstar(name, z);
            let ed = closed_derivative(name, z);
            worst = worst.max((v - ev).abs() / ev.abs().max(1.0));
            worst = worst.max((d - ed).abs() / ed.abs().max(1.0));
        }
    }
    worst
}
