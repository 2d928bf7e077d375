//! Entropic optimal transport between empirical point clouds.
//!
//! Sinkhorn scales the Gibbs kernel directly when its entries stay well
//! inside the normal `f64` range, and otherwise runs in the log domain on
//! dual potentials `(f, g)`, so small regularization strengths (down to
//! `5e-3` on unit-scale data) do not underflow.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostExponent {
    /// `‖x - y‖²`, used for W2 estimates and the transport-step cost.
    SquaredEuclidean,
    /// `‖x - y‖`, used for W1 estimates.
    Euclidean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub values: Array2<f64>,
    pub exponent: CostExponent,
    pub scale: f64,
}

impl CostMatrix {
    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn transpose(&self) -> CostMatrix {
        CostMatrix {
            values: self.values.t().to_owned(),
            exponent: self.exponent,
            scale: self.scale,
        }
    }
}

/// `values[i][j] = scale * ‖xs_i - ys_j‖^p` with `p` from `exponent`.
pub fn cost_matrix(
    xs: &Array2<f64>,
    ys: &Array2<f64>,
    exponent: CostExponent,
    scale: f64,
) -> Result<CostMatrix> {
    if xs.ncols() != ys.ncols() {
        return Err(Error::shape(
            "cost_matrix",
            format!("points of dimension {} vs {}", xs.ncols(), ys.ncols()),
        ));
    }
    if !(scale >= 0.0) || !scale.is_finite() {
        return Err(Error::Config(format!("cost scale must be finite and >= 0, got {scale}")));
    }
    let (n, m) = (xs.nrows(), ys.nrows());
    let mut values = Array2::zeros((n, m));
    for (i, x) in xs.outer_iter().enumerate() {
        for (j, y) in ys.outer_iter().enumerate() {
            let sq: f64 = x.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            values[[i, j]] = scale
                * match exponent {
                    CostExponent::SquaredEuclidean => sq,
                    CostExponent::Euclidean => sq.sqrt(),
                };
        }
    }
    Ok(CostMatrix {
        values,
        exponent,
        scale,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornPlan {
    pub coupling: Array2<f64>,
    pub row_marginal: Array1<f64>,
    pub col_marginal: Array1<f64>,
    pub epsilon: f64,
    pub iterations_used: usize,
    pub converged: bool,
    /// Largest absolute deviation of a row or column sum from its marginal.
    pub max_violation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornOptions {
    pub epsilon: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl SinkhornOptions {
    pub fn with_epsilon(epsilon: f64) -> Self {
        SinkhornOptions {
            epsilon,
            ..Self::default()
        }
    }
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        SinkhornOptions {
            epsilon: 0.1,
            max_iters: 10_000,
            tol: 1e-9,
        }
    }
}

pub fn uniform(n: usize) -> Array1<f64> {
    Array1::from_elem(n, 1.0 / n as f64)
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn check_marginal(p: ArrayView1<f64>, name: &str) -> Result<()> {
    if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::Contract(format!("{name} marginal has negative or non-finite mass")));
    }
    let total: f64 = p.sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::Contract(format!("{name} marginal sums to {total}, not 1")));
    }
    Ok(())
}

/// Entropic OT plan between `a` and `b` for the given cost.
///
/// The returned plan has `converged == false` when the largest row-sum
/// violation is still above `tol` after `max_iters` sweeps; callers decide
/// whether to use it.
pub fn sinkhorn(
    cost: &CostMatrix,
    a: &Array1<f64>,
    b: &Array1<f64>,
    epsilon: f64,
    max_iters: usize,
    tol: f64,
) -> Result<SinkhornPlan> {
    let (n, m) = cost.shape();
    if a.len() != n || b.len() != m {
        return Err(Error::shape(
            "sinkhorn",
            format!("cost is {n}x{m}, marginals have {} and {} entries", a.len(), b.len()),
        ));
    }
    if n == 0 || m == 0 {
        return Err(Error::Contract("sinkhorn on an empty point set".into()));
    }
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::Config(format!("sinkhorn epsilon must be positive, got {epsilon}")));
    }
    check_marginal(a.view(), "row")?;
    check_marginal(b.view(), "column")?;
    let (lo, hi) = cost.values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if (hi - lo) / epsilon <= KERNEL_RANGE {
        if let Some(plan) = sinkhorn_kernel(cost, lo, a, b, epsilon, max_iters, tol) {
            return Ok(plan);
        }
    }
    sinkhorn_log(cost, a, b, epsilon, max_iters, tol)
}

/// Largest `(max C - min C)/ε` handled by plain kernel scaling; the kernel
/// entries then stay normal doubles; a scaling that overflows falls back.
const KERNEL_RANGE: f64 = 500.0;

fn plan_from_coupling(
    coupling: Array2<f64>,
    a: &Array1<f64>,
    b: &Array1<f64>,
    epsilon: f64,
    iterations_used: usize,
    converged: bool,
    row_violation: f64,
) -> SinkhornPlan {
    let col_violation = coupling
        .sum_axis(Axis(0))
        .iter()
        .zip(b.iter())
        .map(|(s, t)| (s - t).abs())
        .fold(0.0, f64::max);
    SinkhornPlan {
        coupling,
        row_marginal: a.clone(),
        col_marginal: b.clone(),
        epsilon,
        iterations_used,
        converged,
        max_violation: row_violation.max(col_violation),
    }
}

/// Scaling iterations on `K = exp(-(C - lo)/ε)`. `None` when a scaling
/// degenerates, in which case the caller retries in the log domain.
fn sinkhorn_kernel(
    cost: &CostMatrix,
    lo: f64,
    a: &Array1<f64>,
    b: &Array1<f64>,
    epsilon: f64,
    max_iters: usize,
    tol: f64,
) -> Option<SinkhornPlan> {
    let kernel = cost.values.mapv(|c| (-(c - lo) / epsilon).exp());
    let kernel_t = kernel.t().as_standard_layout().into_owned();
    let mut u = Array1::<f64>::ones(a.len());
    let mut v = Array1::<f64>::ones(b.len());
    let mut converged = false;
    let mut iterations_used = 0;
    let mut violation = f64::INFINITY;
    for it in 0..=max_iters {
        let kv = kernel.dot(&v);
        if it > 0 {
            violation = u
                .iter()
                .zip(&kv)
                .zip(a)
                .map(|((ui, kvi), ai)| (ui * kvi - ai).abs())
                .fold(0.0, f64::max);
            if !violation.is_finite() {
                return None;
            }
            if violation <= tol {
                converged = true;
                break;
            }
        }
        if it == max_iters {
            break;
        }
        iterations_used = it + 1;
        u = a / &kv;
        let ktu = kernel_t.dot(&u);
        v = b / &ktu;
        if !u.iter().chain(&v).all(|x| x.is_finite()) {
            return None;
        }
    }
    let mut coupling = kernel;
    for (mut row, ui) in coupling.outer_iter_mut().zip(&u) {
        row.zip_mut_with(&v, |k, vj| *k *= ui * vj);
    }
    if coupling.iter().any(|p| !p.is_finite()) {
        return None;
    }
    Some(plan_from_coupling(coupling, a, b, epsilon, iterations_used, converged, violation))
}

fn sinkhorn_log(
    cost: &CostMatrix,
    a: &Array1<f64>,
    b: &Array1<f64>,
    epsilon: f64,
    max_iters: usize,
    tol: f64,
) -> Result<SinkhornPlan> {
    let (n, m) = cost.shape();
    // Work on C/ε, row-major in both orientations.
    let c: Vec<f64> = cost.values.iter().map(|v| v / epsilon).collect();
    let ct: Vec<f64> = cost.values.t().iter().map(|v| v / epsilon).collect();
    let log_a: Vec<f64> = a.iter().map(|v| v.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|v| v.ln()).collect();
    // Potentials are kept divided by ε.
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut lse_rows = vec![0.0; n];

    let mut converged = false;
    let mut iterations_used = 0;
    let mut violation = f64::INFINITY;
    for it in 0..=max_iters {
        for i in 0..n {
            let row = &c[i * m..(i + 1) * m];
            lse_rows[i] = log_sum_exp(g.iter().zip(row).map(|(gj, cij)| gj - cij));
        }
        if it > 0 {
            // Columns are exact after the g update; measure the rows.
            violation = (0..n)
                .map(|i| ((f[i] + lse_rows[i]).exp() - a[i]).abs())
                .fold(0.0, f64::max);
            if !violation.is_finite() {
                return Err(Error::numeric(format!("sinkhorn iteration {it}")));
            }
            if violation <= tol {
                converged = true;
                break;
            }
        }
        if it == max_iters {
            break;
        }
        iterations_used = it + 1;
        for i in 0..n {
            f[i] = log_a[i] - lse_rows[i];
        }
        for j in 0..m {
            let col = &ct[j * n..(j + 1) * n];
            g[j] = log_b[j] - log_sum_exp(f.iter().zip(col).map(|(fi, cij)| fi - cij));
        }
    }

    let mut coupling = Array2::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            coupling[[i, j]] = (f[i] + g[j] - c[i * m + j]).exp();
        }
    }
    if coupling.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("sinkhorn coupling"));
    }
    Ok(plan_from_coupling(coupling, a, b, epsilon, iterations_used, converged, violation))
}

/// `Σ π_ij c_ij`, the plug-in transport cost without the entropy term.
pub fn transport_cost(plan: &SinkhornPlan, cost: &CostMatrix) -> Result<f64> {
    if plan.coupling.raw_dim() != cost.values.raw_dim() {
        return Err(Error::shape(
            "transport_cost",
            format!("plan {:?} vs cost {:?}", plan.coupling.shape(), cost.values.shape()),
        ));
    }
    Ok((&plan.coupling * &cost.values).sum())
}

/// Row-normalized barycentric projection `x̃_i = Σ_j π_ij y_j / Σ_j π_ij`.
pub fn barycentric_project(plan: &SinkhornPlan, ys: &Array2<f64>) -> Result<Array2<f64>> {
    let (projected, valid) = barycentric_project_rows(plan, ys)?;
    if let Some(i) = valid.iter().position(|ok| !ok) {
        return Err(Error::DegeneratePlan(format!("row {i} carries no mass")));
    }
    Ok(projected)
}

/// Barycentric projection that tolerates massless rows; those rows are left
/// at zero and flagged `false` in the returned mask.
pub fn barycentric_project_rows(
    plan: &SinkhornPlan,
    ys: &Array2<f64>,
) -> Result<(Array2<f64>, Vec<bool>)> {
    let (n, m) = plan.coupling.dim();
    if ys.nrows() != m {
        return Err(Error::shape(
            "barycentric_project",
            format!("plan has {m} columns, {} target points given", ys.nrows()),
        ));
    }
    let mut out = plan.coupling.dot(ys);
    let mut valid = vec![true; n];
    for (i, mass) in plan.coupling.sum_axis(Axis(1)).iter().enumerate() {
        if *mass > 0.0 && mass.is_finite() {
            out.row_mut(i).mapv_inplace(|v| v / mass);
        } else {
            valid[i] = false;
            out.row_mut(i).fill(0.0);
        }
    }
    Ok((out, valid))
}

/// Options for distance estimates between two point clouds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceOptions {
    pub epsilon: f64,
    pub max_iters: usize,
    pub tol: f64,
    /// Point clouds larger than this are thinned to an evenly strided subset.
    pub max_points: usize,
}

impl Default for DistanceOptions {
    fn default() -> Self {
        DistanceOptions {
            epsilon: 0.1,
            max_iters: 5_000,
            tol: 1e-7,
            max_points: 500,
        }
    }
}

/// Evenly strided subset of at most `max_points` rows.
pub fn thin(points: &Array2<f64>, max_points: usize) -> Array2<f64> {
    let n = points.nrows();
    if max_points == 0 || n <= max_points {
        return points.to_owned();
    }
    let idx: Vec<usize> = (0..max_points).map(|k| k * n / max_points).collect();
    points.select(Axis(0), &idx)
}

/// Plug-in Sinkhorn estimate of `W_p^p` between uniform empirical measures.
pub fn sinkhorn_distance(
    xs: &Array2<f64>,
    ys: &Array2<f64>,
    exponent: CostExponent,
    opts: &DistanceOptions,
) -> Result<f64> {
    if xs.nrows() == 0 || ys.nrows() == 0 {
        return Err(Error::Contract("distance between empty point sets".into()));
    }
    let xs = thin(xs, opts.max_points);
    let ys = thin(ys, opts.max_points);
    let cost = cost_matrix(&xs, &ys, exponent, 1.0)?;
    let plan = sinkhorn(
        &cost,
        &uniform(xs.nrows()),
        &uniform(ys.nrows()),
        opts.epsilon,
        opts.max_iters,
        opts.tol,
    )?;
    transport_cost(&plan, &cost)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn two_by_two() -> (CostMatrix, SinkhornPlan) {
        let cost = CostMatrix {
            values: array![[0.0, 1.0], [1.0, 0.0]],
            exponent: CostExponent::SquaredEuclidean,
            scale: 1.0,
        };
        let plan = sinkhorn(&cost, &uniform(2), &uniform(2), 1.0, 10_000, 1e-12).unwrap();
        (cost, plan)
    }

    #[test]
    fn cost_matrix_examples() {
        let xs = array![[0.0], [1.0]];
        let c = cost_matrix(&xs, &xs, CostExponent::SquaredEuclidean, 1.0).unwrap();
        assert_eq!(c.values[[0, 0]], 0.0);
        assert_eq!(c.values[[1, 1]], 0.0);
        assert_eq!(c.values[[0, 1]], 1.0);
        let eta: f64 = 0.25;
        let c = cost_matrix(&xs, &xs, CostExponent::SquaredEuclidean, 1.0 / (2.0 * eta)).unwrap();
        assert_eq!(c.values[[0, 1]], 2.0);
        let c = cost_matrix(&array![[0.0, 0.0]], &array![[3.0, 4.0]], CostExponent::Euclidean, 1.0).unwrap();
        assert_eq!(c.values[[0, 0]], 5.0);
        assert!(matches!(
            cost_matrix(&array![[0.0]], &array![[0.0, 1.0]], CostExponent::Euclidean, 1.0),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn two_by_two_closed_form() {
        let (cost, plan) = two_by_two();
        // u²(1 + e^{-1}) = 1/2 with u = v by symmetry
        let diag = 0.5 / (1.0 + (-1.0f64).exp());
        assert!(plan.converged);
        assert!((plan.coupling[[0, 0]] - diag).abs() < 1e-10);
        assert!((plan.coupling[[0, 0]] - 0.36554).abs() < 1e-4);
        assert!((plan.coupling[[0, 1]] - 0.13446).abs() < 1e-4);
        let tc = transport_cost(&plan, &cost).unwrap();
        assert!((tc - 0.26894).abs() < 1e-4);
    }

    #[test]
    fn product_coupling_cost() {
        let (cost, mut plan) = two_by_two();
        plan.coupling = Array2::from_elem((2, 2), 0.25);
        assert_eq!(transport_cost(&plan, &cost).unwrap(), 0.5);
        plan.coupling.fill(0.0);
        let zero = CostMatrix {
            values: Array2::zeros((2, 2)),
            ..cost
        };
        assert_eq!(transport_cost(&plan, &zero).unwrap(), 0.0);
    }

    #[test]
    fn barycentric_examples() {
        let (_, plan) = two_by_two();
        let x = barycentric_project(&plan, &array![[0.0], [1.0]]).unwrap();
        assert!((x[[0, 0]] - 0.26894).abs() < 1e-4);
        assert!((x[[1, 0]] - 0.73106).abs() < 1e-4);

        let single = SinkhornPlan {
            coupling: array![[0.5, 0.5]],
            row_marginal: array![1.0],
            col_marginal: uniform(2),
            epsilon: 1.0,
            iterations_used: 0,
            converged: true,
            max_violation: 0.0,
        };
        let x = barycentric_project(&single, &array![[0.0], [2.0]]).unwrap();
        assert_eq!(x[[0, 0]], 1.0);

        let perm = SinkhornPlan {
            coupling: array![[0.0, 0.5], [0.5, 0.0]],
            row_marginal: uniform(2),
            col_marginal: uniform(2),
            ..single.clone()
        };
        let ys = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(barycentric_project(&perm, &ys).unwrap(), array![[3.0, 4.0], [1.0, 2.0]]);

        let empty_row = SinkhornPlan {
            coupling: array![[0.0, 0.0], [0.5, 0.5]],
            ..perm
        };
        assert!(matches!(
            barycentric_project(&empty_row, &ys),
            Err(Error::DegeneratePlan(_))
        ));
        let (_, mask) = barycentric_project_rows(&empty_row, &ys).unwrap();
        assert_eq!(mask, vec![false, true]);
    }

    #[test]
    fn identical_supports_cost_shrinks_with_epsilon() {
        let xs = array![[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]];
        let cost = cost_matrix(&xs, &xs, CostExponent::SquaredEuclidean, 1.0).unwrap();
        let mut last = f64::INFINITY;
        for eps in [1.0, 0.3, 0.1, 0.03, 0.01] {
            let plan = sinkhorn(&cost, &uniform(3), &uniform(3), eps, 10_000, 1e-12).unwrap();
            let tc = transport_cost(&plan, &cost).unwrap();
            assert!(tc <= eps * 9f64.ln() + 1e-12);
            assert!(tc <= last + 1e-12);
            last = tc;
        }
        assert!(last < 1e-12);
    }

    #[test]
    fn rejects_bad_marginals() {
        let (cost, _) = two_by_two();
        assert!(matches!(
            sinkhorn(&cost, &array![0.6, 0.6], &uniform(2), 1.0, 10, 1e-9),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            sinkhorn(&cost, &uniform(2), &uniform(2), 0.0, 10, 1e-9),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn non_convergence_is_flagged_not_fatal() {
        let xs = array![[0.0], [1.0], [5.0]];
        let cost = cost_matrix(&xs, &xs, CostExponent::SquaredEuclidean, 1.0).unwrap();
        let plan = sinkhorn(&cost, &array![0.2, 0.3, 0.5], &uniform(3), 1e-3, 1, 1e-15).unwrap();
        assert!(!plan.converged);
        assert_eq!(plan.iterations_used, 1);
    }

    #[test]
    fn small_epsilon_does_not_underflow() {
        let xs = array![[0.0], [3.0], [7.0]];
        let ys = array![[0.5], [3.5], [6.0]];
        let cost = cost_matrix(&xs, &ys, CostExponent::SquaredEuclidean, 1.0).unwrap();
        let plan = sinkhorn(&cost, &uniform(3), &uniform(3), 0.005, 10_000, 1e-9).unwrap();
        assert!(plan.converged);
        assert!((transport_cost(&plan, &cost).unwrap() - (0.25 + 0.25 + 1.0) / 3.0).abs() < 1e-6);
    }

    #[test]
    fn kernel_and_log_paths_agree() {
        let xs = Array2::from_shape_fn((7, 2), |(i, j)| ((i * 3 + j * 5) % 7) as f64 * 0.4);
        let ys = Array2::from_shape_fn((5, 2), |(i, j)| ((i * 2 + j) % 5) as f64 * 0.5 - 0.3);
        let cost = cost_matrix(&xs, &ys, CostExponent::SquaredEuclidean, 1.0).unwrap();
        let a = uniform(7);
        let b = uniform(5);
        let lo = cost.values.fold(f64::INFINITY, |m, &v| m.min(v));
        let kernel = sinkhorn_kernel(&cost, lo, &a, &b, 0.2, 10_000, 1e-13).unwrap();
        let log = sinkhorn_log(&cost, &a, &b, 0.2, 10_000, 1e-13).unwrap();
        assert!(kernel.converged && log.converged);
        for (p, q) in kernel.coupling.iter().zip(log.coupling.iter()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn thin_keeps_stride() {
        let pts = Array2::from_shape_fn((10, 1), |(i, _)| i as f64);
        let t = thin(&pts, 5);
        assert_eq!(t.column(0).to_vec(), vec![0.0, 2.0, 4.0, 6.0, 8.0]);
        assert_eq!(thin(&pts, 20).nrows(), 10);
    }
}
