//! Finite-difference checks of every differentiable loss, each against an
//! independently written value function.

use super::*;
use esuot::diagnostics::dsm_batch_grad;
use esuot::divergence::ConjugateKind;
use esuot::gda::{cross_entropy_with_grad, Classifier};
use esuot::nn::{grad, mlp_init, Activation, NetParams};
use esuot::suot::{
    barycentric_batch_grad, map_batch_grad, map_net, potential_batch_grad, potential_net, PotentialObjective,
};
use ndarray::Array2;
use rand::Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const INSTANCES: u64 = 24;

fn jitter(net: &mut NetParams, rng: &mut rand_chacha::ChaCha8Rng, scale: f64) {
    let p: Vec<f64> = net.flat_params().iter().map(|v| v + scale * rng.random_range(-1.0..1.0)).collect();
    net.set_flat_params(&p).unwrap();
}

fn with_params(net: &NetParams, p: &[f64]) -> NetParams {
    let mut n = net.clone();
    n.set_flat_params(p).unwrap();
    n
}

/// Relative errors per instance for each loss.
pub fn all() -> Vec<(&'static str, Vec<f64>)> {
    vec![
        ("potential_loss", potential_loss_errors()),
        ("anchor_term", anchor_term_errors()),
        ("map_loss", map_loss_errors()),
        ("cross_entropy", cross_entropy_errors()),
        ("dsm", dsm_errors()),
        ("barycentric_regression", barycentric_regression_errors()),
    ]
}

pub fn potential_loss_errors() -> Vec<f64> {
    let kinds = [
        (ConjugateKind::Kl, "kl"),
        (ConjugateKind::ChiSq, "chi2"),
        (ConjugateKind::Softplus, "softplus"),
        (ConjugateKind::Identity, "identity"),
    ];
    let mut errs = Vec::new();
    for seed in 0..INSTANCES {
        let mut r = rng(seed);
        let (kind, name) = kinds[seed as usize % kinds.len()];
        let d = 1 + seed as usize % 3;
        let mut net = potential_net(d, 5, seed).unwrap();
        jitter(&mut net, &mut r, 0.5);
        let xs = normal_matrix(&mut r, 3 + seed as usize % 4, d, 1.0);
        let ys = normal_matrix(&mut r, 2 + seed as usize % 5, d, 1.0);
        let eta = r.random_range(0.2..1.5);
        let eps = r.random_range(0.05..1.0);
        let obj = PotentialObjective {
            epsilon: eps,
            conjugate: kind,
            anchor: 0.0,
        };
        let g = potential_batch_grad(&net, &xs, &ys, eta, &obj).unwrap();
        let value_at = |p: &[f64]| {
            let w: Vec<f64> = with_params(&net, p).forward(&ys).unwrap().column(0).to_vec();
            naive_potential_loss(&xs, &ys, &w, eta, eps, name)
        };
        let p = net.flat_params();
        assert!((g.loss_value - value_at(&p)).abs() <= 1e-10 * (1.0 + g.loss_value.abs()));
        errs.push(rel_err(&g.flatten(), &central_diff(&p, H, value_at)));
    }
    errs
}


pub fn anchor_term_errors() -> Vec<f64> {
    let mut errs = Vec::new();
    for seed in 0..INSTANCES {
        let mut r = rng(100 + seed);
        let mut net = potential_net(2, 4, seed).unwrap();
        jitter(&mut net, &mut r, 0.5);
        let xs = normal_matrix(&mut r, 4, 2, 1.0);
        let ys = normal_matrix(&mut r, 5, 2, 1.0);
        let anchor = r.random_range(0.1..2.0);
        let obj = PotentialObjective {
            epsilon: 0.3,
            conjugate: ConjugateKind::Identity,
            anchor,
        };
        let g = potential_batch_grad(&net, &xs, &ys, 0.5, &obj).unwrap();
        let value_at = |p: &[f64]| {
            let w: Vec<f64> = with_params(&net, p).forward(&ys).unwrap().column(0).to_vec();
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            naive_potential_loss(&xs, &ys, &w, 0.5, 0.3, "identity") + anchor * mean * mean
        };
        errs.push(rel_err(&g.flatten(), &central_diff(&net.flat_params(), H, value_at)));
    }
    errs
}


pub fn map_loss_errors() -> Vec<f64> {
    let mut errs = Vec::new();
    for seed in 0..INSTANCES {
        let mut r = rng(200 + seed);
        let d = 1 + seed as usize % 3;
        let mut w_net = potential_net(d, 5, seed).unwrap();
        jitter(&mut w_net, &mut r, 0.5);
        let mut t_net = map_net(d, 4, seed + 1000).unwrap();
        jitter(&mut t_net, &mut r, 0.5);
        let xs = normal_matrix(&mut r, 3 + seed as usize % 5, d, 1.0);
        let eta = r.random_range(0.2..1.5);
        let g = map_batch_grad(&t_net, &w_net, &xs, eta).unwrap();
        let value_at = |p: &[f64]| {
            let mapped = with_params(&t_net, p).forward(&xs).unwrap();
            let w = w_net.forward(&mapped).unwrap();
            let mut total = 0.0;
            for i in 0..xs.nrows() {
                total += sq_dist(xs.row(i), mapped.row(i)) / (2.0 * eta) - w[[i, 0]];
            }
            total / xs.nrows() as f64
        };
        errs.push(rel_err(&g.flatten(), &central_diff(&t_net.flat_params(), H, value_at)));
    }
    errs
}


pub fn cross_entropy_errors() -> Vec<f64> {
    let mut errs = Vec::new();
    for seed in 0..INSTANCES {
        let mut r = rng(300 + seed);
        let k = 2 + seed as usize % 3;
        let mut clf = Classifier::new(2, k, 5, seed).unwrap();
        jitter(&mut clf.net, &mut r, 0.5);
        let xs = normal_matrix(&mut r, 6, 2, 1.0);
        let labels: Vec<usize> = (0..6).map(|_| r.random_range(0..k)).collect();
        let g = grad(&clf.net, &xs, &|out: &Array2<f64>| cross_entropy_with_grad(out, &labels)).unwrap();
        let value_at = |p: &[f64]| naive_cross_entropy(&with_params(&clf.net, p).forward(&xs).unwrap(), &labels);
        errs.push(rel_err(&g.flatten(), &central_diff(&clf.net.flat_params(), H, value_at)));
    }
    errs
}


pub fn dsm_errors() -> Vec<f64> {
    let mut errs = Vec::new();
    for seed in 0..INSTANCES {
        let mut r = rng(400 + seed);
        let d = 1 + seed as usize % 3;
        let mut net = mlp_init(&[d, 5, 5, d], Activation::Silu, false, seed).unwrap();
        jitter(&mut net, &mut r, 0.5);
        let x = normal_matrix(&mut r, 5, d, 1.0);
        let z = normal_matrix(&mut r, 5, d, 1.0);
        let sigma = r.random_range(0.1..1.0);
        let noisy = &x + &(&z * sigma);
        let g = dsm_batch_grad(&net, &noisy, &z, sigma).unwrap();
        let value_at = |p: &[f64]| {
            let s = with_params(&net, p).forward(&noisy).unwrap();
            let mut total = 0.0;
            for i in 0..s.nrows() {
                for j in 0..d {
                    total += (s[[i, j]] + z[[i, j]] / sigma).powi(2);
                }
            }
            total / s.nrows() as f64
        };
        errs.push(rel_err(&g.flatten(), &central_diff(&net.flat_params(), H, value_at)));
    }
    errs
}


pub fn barycentric_regression_errors() -> Vec<f64> {
    let mut errs = Vec::new();
    for seed in 0..INSTANCES {
        let mut r = rng(500 + seed);
        let d = 1 + seed as usize % 3;
        let mut net = map_net(d, 4, seed).unwrap();
        jitter(&mut net, &mut r, 0.5);
        let xs = normal_matrix(&mut r, 6, d, 1.0);
        let projected = normal_matrix(&mut r, 6, d, 1.0);
        let mut valid: Vec<bool> = (0..6).map(|_| r.random_bool(0.8)).collect();
        valid[0] = true;
        let g = barycentric_batch_grad(&net, &xs, &projected, &valid).unwrap();
        let value_at = |p: &[f64]| {
            let mapped = with_params(&net, p).forward(&xs).unwrap();
            let kept: Vec<usize> = (0..6).filter(|&i| valid[i]).collect();
            kept.iter().map(|&i| sq_dist(mapped.row(i), projected.row(i))).sum::<f64>() / kept.len() as f64
        };
        errs.push(rel_err(&g.flatten(), &central_diff(&net.flat_params(), H, value_at)));
    }
    errs
}
