//! Shared oracles for the integration tests. Nothing here calls into the
//! library's own loss or transport code, so agreement is a real cross-check.
#![allow(dead_code)]

pub mod conjugate_oracle;
pub mod fd;
pub mod sinkhorn_oracle;

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| scale * rng.sample::<f64, _>(StandardNormal))
}

pub fn simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let mut p: Vec<f64> = raw.iter().map(|v| v / total).collect();
    // force an exact unit sum so strict marginal checks accept it
    let rest: f64 = p[..n - 1].iter().sum();
    p[n - 1] = 1.0 - rest;
    p
}

/// Central differences of `f` at `x` with step `h`.
pub fn central_diff(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a - b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-8)
}

pub fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Direct evaluation of the entropic semi-dual potential loss:
/// `ε·mean_i log mean_j exp((w_j - c_ij)/ε) + mean_j f⋆(-w_j)` with a plain
/// max-shifted sum, and `f⋆` written out per family.
pub fn naive_potential_loss(xs: &Array2<f64>, ys: &Array2<f64>, w: &[f64], eta: f64, eps: f64, fstar: &str) -> f64 {
    let n = xs.nrows();
    let m = ys.nrows();
    let mut total = 0.0;
    for i in 0..n {
        let terms: Vec<f64> = (0..m)
            .map(|j| (w[j] - sq_dist(xs.row(i), ys.row(j)) / (2.0 * eta)) / eps)
            .collect();
        let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mean_exp = terms.iter().map(|t| (t - max).exp()).sum::<f64>() / m as f64;
        total += eps * (max + mean_exp.ln());
    }
    let penalty: f64 = w.iter().map(|&wj| naive_fstar(fstar, -wj)).sum::<f64>() / m as f64;
    total / n as f64 + penalty
}

pub fn naive_fstar(kind: &str, z: f64) -> f64 {
    match kind {
        "kl" => (z - 1.0).exp(),
        "chi2" => {
            if z > -2.0 {
                z * z / 4.0 + z
            } else {
                -1.0
            }
        }
        "softplus" => (1.0 + z.exp()).ln(),
        "identity" => z,
        _ => panic!("unknown conjugate {kind}"),
    }
}

pub fn naive_cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.outer_iter().zip(labels) {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        total += -(row[y].exp() / z).ln();
    }
    total / labels.len() as f64
}

/// Shannon entropy `-Σ p ln p` with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum()
}

/// Exact discrete OT cost by enumerating basic feasible solutions of the
/// transportation polytope. Intended for n, m ≤ 4.
pub fn lp_transport(cost: &[Vec<f64>], a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let m = b.len();
    let vars = n * m;
    // row sums and all but the last column sum: n + m - 1 independent rows
    let rank = n + m - 1;
    let mut rhs = DVector::zeros(rank);
    for i in 0..n {
        rhs[i] = a[i];
    }
    for j in 0..m - 1 {
        rhs[n + j] = b[j];
    }
    let column = |v: usize| {
        let (i, j) = (v / m, v % m);
        let mut c = DVector::zeros(rank);
        c[i] = 1.0;
        if j < m - 1 {
            c[n + j] = 1.0;
        }
        c
    };
    let mut best = f64::INFINITY;
    let mut basis: Vec<usize> = (0..rank).collect();
    loop {
        let mut mat = DMatrix::zeros(rank, rank);
        for (k, &v) in basis.iter().enumerate() {
            mat.set_column(k, &column(v));
        }
        if let Some(sol) = mat.clone().lu().solve(&rhs) {
            let consistent = (&mat * &sol - &rhs).norm() < 1e-9;
            if consistent && sol.iter().all(|&x| x >= -1e-12 && x.is_finite()) {
                let value: f64 = basis.iter().zip(sol.iter()).map(|(&v, &x)| x * cost[v / m][v % m]).sum();
                best = best.min(value);
            }
        }
        if !next_combination(&mut basis, vars) {
            break;
        }
    }
    best
}

fn next_combination(c: &mut [usize], n: usize) -> bool {
    let k = c.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if c[i] < n - k + i {
            c[i] += 1;
            for j in i + 1..k {
                c[j] = c[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Largest singular value via nalgebra's SVD.
pub fn svd_norm(w: &Array2<f64>) -> f64 {
    let m = DMatrix::from_row_iterator(w.nrows(), w.ncols(), w.iter().copied());
    m.singular_values().max()
}
