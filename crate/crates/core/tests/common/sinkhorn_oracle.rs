//! Sinkhorn against exact LP optima and the 2×2 closed form.

use super::*;
use esuot::ot::{cost_matrix, sinkhorn, transport_cost, CostExponent};
use ndarray::Array1;

#[derive(Debug, Default)]
pub struct BracketSummary {
    pub instances: usize,
    /// Largest `LP - cost` seen; should be ≤ 0 up to rounding.
    pub worst_below_lp: f64,
    /// Largest `cost - (LP + ε(H(a)+H(b)))`; should be ≤ 0.
    pub worst_above_bound: f64,
    pub worst_violation: f64,
}

/// Every shape with n, m ≤ 4, `per_shape` random instances each.
pub fn bracket(per_shape: u64) -> BracketSummary {
    let mut s = BracketSummary {
        worst_below_lp: f64::NEG_INFINITY,
        worst_above_bound: f64::NEG_INFINITY,
        ..Default::default()
    };
    for n in 1..=4 {
        for m in 1..=4 {
            for k in 0..per_shape {
                let mut r = rng(1000 * n as u64 + 100 * m as u64 + k);
                let xs = normal_matrix(&mut r, n, 2, 1.0);
                let ys = normal_matrix(&mut r, m, 2, 1.0);
                let a = simplex(&mut r, n);
                let b = simplex(&mut r, m);
                let eps = r.random_range(0.05..1.0);
                let cost = cost_matrix(&xs, &ys, CostExponent::SquaredEuclidean, 1.0).unwrap();
                let plan = sinkhorn(&cost, &Array1::from(a.clone()), &Array1::from(b.clone()), eps, 1_000_000, 1e-12)
                    .unwrap();
                let value = transport_cost(&plan, &cost).unwrap();
                let rows: Vec<Vec<f64>> = cost.values.outer_iter().map(|r| r.to_vec()).collect();
                let lp = lp_transport(&rows, &a, &b);
                let violation = marginal_violation(&plan.coupling, &a, &b);
                s.instances += 1;
                s.worst_below_lp = s.worst_below_lp.max(lp - value);
                s.worst_above_bound = s.worst_above_bound.max(value - lp - eps * (entropy(&a) + entropy(&b)));
                s.worst_violation = s.worst_violation.max(violation);
            }
        }
    }
    s
}

pub fn marginal_violation(coupling: &ndarray::Array2<f64>, a: &[f64], b: &[f64]) -> f64 {
    let rows = coupling.sum_axis(ndarray::Axis(1));
    let cols = coupling.sum_axis(ndarray::Axis(0));
    rows.iter()
        .zip(a)
        .chain(cols.iter().zip(b))
        .map(|(s, t)| (s - t).abs())
        .fold(0.0, f64::max)
}

/// Entropic 2×2 coupling from its cross-ratio: with `π = [[p, a1-p], [b1-p,
/// a2-b1+p]]` the Gibbs form forces `π11 π22 / (π12 π21) = exp(-(c11 + c22 -
/// c12 - c21)/ε)`, a quadratic in `p`.
pub fn closed_form_2x2(c: [[f64; 2]; 2], a: [f64; 2], b: [f64; 2], eps: f64) -> [[f64; 2]; 2] {
    let r = (-(c[0][0] + c[1][1] - c[0][1] - c[1][0]) / eps).exp();
    let (a1, a2, b1) = (a[0], a[1], b[0]);
    let qa = 1.0 - r;
    let qb = a2 - b1 + r * (a1 + b1);
    let qc = -r * a1 * b1;
    let lo = (b1 - a2).max(0.0);
    let hi = a1.min(b1);
    let p = if qa.abs() < 1e-14 {
        -qc / qb
    } else {
        let disc = (qb * qb - 4.0 * qa * qc).sqrt();
        let roots = [(-qb + disc) / (2.0 * qa), (-qb - disc) / (2.0 * qa)];
        *roots
            .iter()
            .find(|&&p| p >= lo - 1e-12 && p <= hi + 1e-12)
            .expect("one root lies in the feasible interval")
    };
    [[p, a1 - p], [b1 - p, a2 - b1 + p]]
}

/// Largest entrywise gap between Sinkhorn and the closed form over random
/// 2×2 instances.
pub fn two_by_two_gap(instances: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for k in 0..instances {
        let mut r = rng(77_000 + k);
        let xs = normal_matrix(&mut r, 2, 1, 1.0);
        let ys = normal_matrix(&mut r, 2, 1, 1.0);
        let a = simplex(&mut r, 2);
        let b = simplex(&mut r, 2);
        let eps = r.random_range(0.1..1.0);
        let cost = cost_matrix(&xs, &ys, CostExponent::SquaredEuclidean, 1.0).unwrap();
        let c = [
            [cost.values[[0, 0]], cost.values[[0, 1]]],
            [cost.values[[1, 0]], cost.values[[1, 1]]],
        ];
        let exact = closed_form_2x2(c, [a[0], a[1]], [b[0], b[1]], eps);
        let plan = sinkhorn(&cost, &Array1::from(a), &Array1::from(b), eps, 100_000, 1e-13).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                worst = worst.max((plan.coupling[[i, j]] - exact[i][j]).abs());
            }
        }
    }
    worst
}
