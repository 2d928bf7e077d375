//! Entropy-regularized semi-dual unbalanced OT: objectives and trainers.
//!
//! One transport stage solves a JKO-type step from the current samples
//! toward the target. The potential `w` minimizes
//!
//! ```text
//! ε · mean_j log mean_i exp((w(y_i) - c(x_j, y_i)) / ε) + mean_i f⋆(-w(y_i))
//! ```
//!
//! with `c(x, y) = ‖x - y‖² / (2η)`, `x_j` current samples and `y_i` target
//! samples. The map `T` then minimizes `mean ‖x - T(x)‖²/(2η) - w(T(x))`
//! with `w` frozen. Two ablation trainers replace this pair: an adversarial
//! alternation without entropy, and a barycentric regression onto a
//! Sinkhorn plan.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::divergence::{marginal_penalty_with_grad, ConjugateKind};
use crate::error::{Error, Result};
use crate::nn::{self, adam_step, mlp_init, Activation, AdamState, GradBundle, LayerGrad, NetParams};
use crate::ot::{barycentric_project_rows, cost_matrix, sinkhorn, uniform, CostExponent, CostMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainerKind {
    Esuot,
    Adversarial,
    Barycentric,
}

impl TrainerKind {
    pub const ALL: [TrainerKind; 3] = [TrainerKind::Esuot, TrainerKind::Adversarial, TrainerKind::Barycentric];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainerKind::Esuot => "esuot",
            TrainerKind::Adversarial => "adversarial",
            TrainerKind::Barycentric => "barycentric",
        }
    }
}

impl fmt::Display for TrainerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "esuot" => Ok(TrainerKind::Esuot),
            "adversarial" => Ok(TrainerKind::Adversarial),
            "barycentric" => Ok(TrainerKind::Barycentric),
            other => Err(Error::Config(format!(
                "unknown trainer {other:?}, expected esuot | adversarial | barycentric"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ESuotConfig {
    /// Entropy strength ε.
    pub epsilon: f64,
    /// Step size η; transport cost is `‖x - y‖² / (2η)`.
    pub eta: f64,
    /// Number of transport stages T.
    pub stages: usize,
    pub batch: usize,
    /// Optimizer steps per phase; one minibatch per epoch.
    pub epochs: usize,
    pub lr: f64,
    pub conjugate: ConjugateKind,
    pub trainer: TrainerKind,
    pub seed: u64,
    /// Hidden width of the potential and map networks.
    pub hidden: usize,
    /// Initialize stage t+1 from stage t's networks instead of fresh ones.
    pub warm_start: bool,
    /// Train each stage's networks in coordinates centered on the target
    /// mean. The objectives only see differences `x - y`, so this changes
    /// the parameterization, not the problem: with zero-initialized biases
    /// every hidden unit bends at the origin, and placing the origin in the
    /// target keeps the potential's curvature where it is fitted.
    pub recenter: bool,
    /// Weight of the `(mean w)²` gauge anchor added to the potential loss.
    /// Zero except for the balanced-OT comparator.
    pub anchor: f64,
}

impl Default for ESuotConfig {
    fn default() -> Self {
        ESuotConfig {
            epsilon: 0.1,
            eta: 0.5,
            stages: 5,
            batch: 256,
            epochs: 600,
            lr: 2e-3,
            conjugate: ConjugateKind::Kl,
            trainer: TrainerKind::Esuot,
            seed: 0,
            hidden: 64,
            warm_start: false,
            recenter: true,
            anchor: 0.0,
        }
    }
}

impl ESuotConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [("epsilon", self.epsilon), ("eta", self.eta), ("lr", self.lr)];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a positive number, got {v}")));
            }
        }
        for (name, v) in [
            ("stages", self.stages),
            ("batch", self.batch),
            ("epochs", self.epochs),
            ("hidden", self.hidden),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(self.anchor >= 0.0) || !self.anchor.is_finite() {
            return Err(Error::Config(format!("anchor must be >= 0, got {}", self.anchor)));
        }
        if self.trainer == TrainerKind::Adversarial && self.conjugate == ConjugateKind::Identity {
            return Err(Error::Config(
                "the adversarial trainer has no identity-conjugate variant".into(),
            ));
        }
        Ok(())
    }

    pub fn cost_scale(&self) -> f64 {
        1.0 / (2.0 * self.eta)
    }
}

/// Deterministic generator for one stage. Every stage draws from its own
/// ChaCha stream so a stage can be retrained in isolation.
pub fn stage_rng(seed: u64, stage: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage as u64 + 1);
    rng
}

pub fn potential_net(dim: usize, hidden: usize, seed: u64) -> Result<NetParams> {
    mlp_init(&[dim, hidden, 1], Activation::Silu, false, seed)
}

/// Residual map `x + MLP(x)`.
pub fn map_net(dim: usize, hidden: usize, seed: u64) -> Result<NetParams> {
    mlp_init(&[dim, hidden, dim], Activation::Silu, true, seed)
}

/// Semi-dual potential objective on one minibatch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PotentialObjective {
    pub epsilon: f64,
    pub conjugate: ConjugateKind,
    pub anchor: f64,
}

impl PotentialObjective {
    pub fn from_config(cfg: &ESuotConfig) -> Self {
        PotentialObjective {
            epsilon: cfg.epsilon,
            conjugate: cfg.conjugate,
            anchor: cfg.anchor,
        }
    }

    /// Loss value and gradient with respect to `w_target`.
    ///
    /// `cost` rows index current samples, columns index target samples, and
    /// `w_target` is aligned with the columns.
    pub fn value_and_grad(&self, w_target: &[f64], cost: &CostMatrix) -> Result<(f64, Vec<f64>)> {
        let (n_src, n_tgt) = cost.shape();
        if n_src == 0 || n_tgt == 0 {
            return Err(Error::Contract("potential loss over an empty batch".into()));
        }
        if w_target.len() != n_tgt {
            return Err(Error::shape(
                "potential_loss",
                format!("{} potential values for {n_tgt} target columns", w_target.len()),
            ));
        }
        let eps = self.epsilon;
        let log_m = (n_tgt as f64).ln();
        let inv_src = 1.0 / n_src as f64;
        let mut value = 0.0;
        let mut grad = vec![0.0; n_tgt];
        let mut scaled = vec![0.0; n_tgt];
        for row in cost.values.outer_iter() {
            let mut max = f64::NEG_INFINITY;
            for ((s, &w), &c) in scaled.iter_mut().zip(w_target).zip(row.iter()) {
                *s = (w - c) / eps;
                max = max.max(*s);
            }
            let mut total = 0.0;
            for s in scaled.iter_mut() {
                *s = (*s - max).exp();
                total += *s;
            }
            value += eps * (max + total.ln() - log_m);
            for (g, s) in grad.iter_mut().zip(&scaled) {
                *g += inv_src * s / total;
            }
        }
        value *= inv_src;
        let (penalty, penalty_grad) = marginal_penalty_with_grad(self.conjugate, w_target)?;
        value += penalty;
        for (g, pg) in grad.iter_mut().zip(penalty_grad) {
            *g += pg;
        }
        if self.anchor > 0.0 {
            let mean = w_target.iter().sum::<f64>() / n_tgt as f64;
            value += self.anchor * mean * mean;
            let d = 2.0 * self.anchor * mean / n_tgt as f64;
            grad.iter_mut().for_each(|g| *g += d);
        }
        if !value.is_finite() {
            return Err(Error::numeric("potential_loss"));
        }
        Ok((value, grad))
    }
}

/// Minibatch E-SUOT potential loss; see the module docs.
pub fn potential_loss(
    w_target: &[f64],
    cost: &CostMatrix,
    epsilon: f64,
    conjugate: ConjugateKind,
) -> Result<f64> {
    let objective = PotentialObjective {
        epsilon,
        conjugate,
        anchor: 0.0,
    };
    Ok(objective.value_and_grad(w_target, cost)?.0)
}

fn check_pair(op: &'static str, a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.raw_dim() != b.raw_dim() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.nrows() == 0 {
        return Err(Error::Contract(format!("{op} over an empty batch")));
    }
    Ok(())
}

/// `mean_i [ ‖x_i - T(x_i)‖² / (2η) - w(T(x_i)) ]`.
pub fn map_loss(x_t: &Array2<f64>, mapped: &Array2<f64>, w_of_mapped: &[f64], eta: f64) -> Result<f64> {
    check_pair("map_loss", x_t, mapped)?;
    if w_of_mapped.len() != x_t.nrows() {
        return Err(Error::shape(
            "map_loss",
            format!("{} potential values for {} rows", w_of_mapped.len(), x_t.nrows()),
        ));
    }
    let quad: f64 = (x_t - mapped).iter().map(|v| v * v).sum::<f64>() / (2.0 * eta);
    let w: f64 = w_of_mapped.iter().sum();
    Ok((quad - w) / x_t.nrows() as f64)
}

fn as_column(values: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((values.len(), 1), values.to_vec()).expect("column shape")
}

fn add_into(acc: &mut GradBundle, other: &[LayerGrad]) {
    for (a, b) in acc.layers.iter_mut().zip(other) {
        a.weight += &b.weight;
        a.bias += &b.bias;
    }
}

/// Loss and parameter gradient of the potential network on one
/// (current batch, target batch) pair.
pub fn potential_batch_grad(
    w_net: &NetParams,
    xs: &Array2<f64>,
    ys: &Array2<f64>,
    eta: f64,
    objective: &PotentialObjective,
) -> Result<GradBundle> {
    let cost = cost_matrix(xs, ys, CostExponent::SquaredEuclidean, 1.0 / (2.0 * eta))?;
    let loss = |out: &Array2<f64>| {
        let w: Vec<f64> = out.column(0).to_vec();
        let (value, g) = objective.value_and_grad(&w, &cost)?;
        Ok((value, as_column(&g)))
    };
    nn::grad(w_net, ys, &loss)
}

/// Loss and parameter gradient of the map network with the potential frozen.
pub fn map_batch_grad(t_net: &NetParams, w_net: &NetParams, xs: &Array2<f64>, eta: f64) -> Result<GradBundle> {
    let inv_b = 1.0 / xs.nrows() as f64;
    let loss = |mapped: &Array2<f64>| {
        let trace = w_net.forward_traced(mapped)?;
        let w: Vec<f64> = trace.output.column(0).to_vec();
        let value = map_loss(xs, mapped, &w, eta)?;
        let (_, grad_w_in) = w_net.backward(&trace, &Array2::from_elem((mapped.nrows(), 1), -inv_b))?;
        let grad = (mapped - xs) * (inv_b / eta) + grad_w_in;
        Ok((value, grad))
    };
    nn::grad(t_net, xs, &loss)
}

/// Mean squared regression of `T(x_i)` onto projected points, over rows
/// flagged valid.
pub fn barycentric_regression_loss(
    mapped: &Array2<f64>,
    projected: &Array2<f64>,
    valid: &[bool],
) -> Result<(f64, Array2<f64>)> {
    check_pair("barycentric_regression", mapped, projected)?;
    let kept = valid.iter().filter(|&&v| v).count();
    if kept == 0 {
        return Err(Error::DegeneratePlan("every row of the batch is degenerate".into()));
    }
    let inv = 1.0 / kept as f64;
    let mut grad = mapped - projected;
    let mut value = 0.0;
    for (mut row, &ok) in grad.outer_iter_mut().zip(valid) {
        if ok {
            value += row.iter().map(|v| v * v).sum::<f64>();
            row.mapv_inplace(|v| 2.0 * inv * v);
        } else {
            row.fill(0.0);
        }
    }
    Ok((value * inv, grad))
}

pub fn barycentric_batch_grad(
    t_net: &NetParams,
    xs: &Array2<f64>,
    projected: &Array2<f64>,
    valid: &[bool],
) -> Result<GradBundle> {
    let loss = |mapped: &Array2<f64>| barycentric_regression_loss(mapped, projected, valid);
    nn::grad(t_net, xs, &loss)
}

/// Minibatch of rows drawn uniformly with replacement.
pub fn sample_batch<R: Rng>(points: &Array2<f64>, batch: usize, rng: &mut R) -> Array2<f64> {
    let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..points.nrows())).collect();
    points.select(Axis(0), &idx)
}

fn check_samples(source: &Array2<f64>, target: &Array2<f64>) -> Result<()> {
    if source.nrows() == 0 || target.nrows() == 0 {
        return Err(Error::Contract("empty sample set".into()));
    }
    if source.ncols() != target.ncols() {
        return Err(Error::shape(
            "transport stage",
            format!("source dim {} vs target dim {}", source.ncols(), target.ncols()),
        ));
    }
    Ok(())
}

/// Exponentially smoothed trace with weight `alpha` on the newest value.
pub fn smooth(curve: &[f64], alpha: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(curve.len());
    let mut s = match curve.first() {
        Some(&v) => v,
        None => return out,
    };
    for &v in curve {
        s = alpha * v + (1.0 - alpha) * s;
        out.push(s);
    }
    out
}

fn epoch_error(phase: &str, epoch: usize, e: Error) -> Error {
    match e {
        Error::Numeric { op } => Error::numeric(format!("{phase} epoch {epoch}: {op}")),
        other => other,
    }
}

/// Fits the potential with the map absent, starting from `init`.
pub fn train_potential_from(
    cfg: &ESuotConfig,
    mut w_net: NetParams,
    source: &Array2<f64>,
    target: &Array2<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<(NetParams, Vec<f64>)> {
    check_samples(source, target)?;
    let objective = PotentialObjective::from_config(cfg);
    let mut adam = AdamState::new(&w_net);
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let xs = sample_batch(source, cfg.batch, rng);
        let ys = sample_batch(target, cfg.batch, rng);
        let g = potential_batch_grad(&w_net, &xs, &ys, cfg.eta, &objective)
            .map_err(|e| epoch_error("potential", epoch, e))?;
        curve.push(g.loss_value);
        adam_step(&mut w_net, &g, &mut adam, cfg.lr)?;
    }
    Ok((w_net, curve))
}

/// Trains a fresh potential network `w_φ` for one stage.
pub fn train_potential(
    cfg: &ESuotConfig,
    source: &Array2<f64>,
    target: &Array2<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<(NetParams, Vec<f64>)> {
    check_samples(source, target)?;
    let init = potential_net(source.ncols(), cfg.hidden, rng.next_u64())?;
    train_potential_from(cfg, init, source, target, rng)
}

pub fn train_map_from(
    cfg: &ESuotConfig,
    mut t_net: NetParams,
    potential: &NetParams,
    source: &Array2<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<(NetParams, Vec<f64>)> {
    if source.nrows() == 0 {
        return Err(Error::Contract("empty sample set".into()));
    }
    let mut adam = AdamState::new(&t_net);
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let xs = sample_batch(source, cfg.batch, rng);
        let g = map_batch_grad(&t_net, potential, &xs, cfg.eta).map_err(|e| epoch_error("map", epoch, e))?;
        curve.push(g.loss_value);
        adam_step(&mut t_net, &g, &mut adam, cfg.lr)?;
    }
    Ok((t_net, curve))
}

/// Trains a fresh map `T_θ` against a frozen potential.
pub fn train_map(
    cfg: &ESuotConfig,
    potential: &NetParams,
    source: &Array2<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<(NetParams, Vec<f64>)> {
    if source.ncols() != potential.input_dim() {
        return Err(Error::shape(
            "train_map",
            format!("samples have dim {}, potential expects {}", source.ncols(), potential.input_dim()),
        ));
    }
    let init = map_net(source.ncols(), cfg.hidden, rng.next_u64())?;
    train_map_from(cfg, init, potential, source, rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportStage {
    /// `w_φ,t`; absent for the barycentric trainer, which has no potential.
    pub potential: Option<NetParams>,
    pub map: NetParams,
    pub stage_index: usize,
    pub potential_curve: Vec<f64>,
    pub map_curve: Vec<f64>,
    /// Minibatch rows dropped because their plan row carried no mass.
    pub skipped_rows: usize,
    /// Origin of the coordinates the networks were trained in; `apply`
    /// evaluates `map(x - origin) + origin`.
    pub origin: Array1<f64>,
}

impl TransportStage {
    pub fn apply(&self, points: &Array2<f64>) -> Result<Array2<f64>> {
        if points.ncols() != self.origin.len() {
            return Err(Error::shape(
                "TransportStage::apply",
                format!("points of dim {}, stage trained on dim {}", points.ncols(), self.origin.len()),
            ));
        }
        Ok(self.map.forward(&(points - &self.origin))? + &self.origin)
    }

    /// Potential evaluated in world coordinates.
    pub fn potential_at(&self, points: &Array2<f64>) -> Result<Option<Array1<f64>>> {
        match &self.potential {
            Some(w) => Ok(Some(evaluate_potential(w, &(points - &self.origin))?)),
            None => Ok(None),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportSequence {
    pub stages: Vec<TransportStage>,
    pub config: ESuotConfig,
}

impl TransportSequence {
    /// Pushes points through every stage, returning `x_0 ..= x_T`.
    pub fn push_forward(&self, x0: &Array2<f64>) -> Result<Vec<Array2<f64>>> {
        let mut out = vec![x0.clone()];
        for stage in &self.stages {
            let next = stage.apply(out.last().unwrap()).map_err(|e| e.at_stage(stage.stage_index))?;
            out.push(next);
        }
        Ok(out)
    }
}

/// Previous stage's networks, used when `warm_start` is on.
#[derive(Debug, Clone, Copy, Default)]
pub struct WarmStart<'a> {
    pub potential: Option<&'a NetParams>,
    pub map: Option<&'a NetParams>,
}

fn esuot_stage(
    cfg: &ESuotConfig,
    current: &Array2<f64>,
    target: &Array2<f64>,
    stage_index: usize,
    warm: WarmStart<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<TransportStage> {
    let (potential, potential_curve) = match warm.potential {
        Some(init) => {
            // keep the stream aligned with the fresh-init path
            rng.next_u64();
            train_potential_from(cfg, init.clone(), current, target, rng)?
        }
        None => train_potential(cfg, current, target, rng)?,
    };
    let (map, map_curve) = match warm.map {
        Some(init) => {
            rng.next_u64();
            train_map_from(cfg, init.clone(), &potential, current, rng)?
        }
        None => train_map(cfg, &potential, current, rng)?,
    };
    Ok(TransportStage {
        potential: Some(potential),
        map,
        stage_index,
        potential_curve,
        map_curve,
        skipped_rows: 0,
        origin: Array1::zeros(current.ncols()),
    })
}

/// Magnitude of the smoothed critic loss beyond which adversarial training
/// is declared divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Alternating critic/map updates on the unregularized semi-dual.
pub fn adversarial_train_stage(
    cfg: &ESuotConfig,
    current: &Array2<f64>,
    target: &Array2<f64>,
    stage_index: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TransportStage> {
    check_samples(current, target)?;
    if cfg.conjugate == ConjugateKind::Identity {
        return Err(Error::Config("the adversarial trainer has no identity-conjugate variant".into()));
    }
    let d = current.ncols();
    let mut w_net = potential_net(d, cfg.hidden, rng.next_u64())?;
    let mut t_net = map_net(d, cfg.hidden, rng.next_u64())?;
    let mut w_adam = AdamState::new(&w_net);
    let mut t_adam = AdamState::new(&t_net);
    let mut potential_curve = Vec::with_capacity(cfg.epochs);
    let mut map_curve = Vec::with_capacity(cfg.epochs);
    let mut smoothed: Option<f64> = None;
    for epoch in 0..cfg.epochs {
        let xs = sample_batch(current, cfg.batch, rng);
        let ys = sample_batch(target, cfg.batch, rng);
        let mapped = t_net.forward(&xs)?;
        let g = critic_batch_grad(&w_net, &mapped, &ys, cfg.conjugate)
            .map_err(|e| epoch_error("critic", epoch, e))?;
        potential_curve.push(g.loss_value);
        let s = match smoothed {
            Some(s) => 0.1 * g.loss_value + 0.9 * s,
            None => g.loss_value,
        };
        smoothed = Some(s);
        if s.abs() > DIVERGENCE_LIMIT {
            return Err(Error::Diverged(format!(
                "adversarial critic loss reached {s:.3e} at epoch {epoch}"
            )));
        }
        adam_step(&mut w_net, &g, &mut w_adam, cfg.lr)?;

        let xs = sample_batch(current, cfg.batch, rng);
        let g = map_batch_grad(&t_net, &w_net, &xs, cfg.eta).map_err(|e| epoch_error("map", epoch, e))?;
        map_curve.push(g.loss_value);
        adam_step(&mut t_net, &g, &mut t_adam, cfg.lr)?;
    }
    Ok(TransportStage {
        potential: Some(w_net),
        map: t_net,
        stage_index,
        potential_curve,
        map_curve,
        skipped_rows: 0,
        origin: Array1::zeros(current.ncols()),
    })
}

/// Critic loss `mean w(T(x)) + mean f⋆(-w(y))` and its gradient, with the
/// mapped points held fixed.
pub fn critic_batch_grad(
    w_net: &NetParams,
    mapped: &Array2<f64>,
    ys: &Array2<f64>,
    conjugate: ConjugateKind,
) -> Result<GradBundle> {
    let inv_b = 1.0 / mapped.nrows() as f64;
    let mapped_term = |out: &Array2<f64>| Ok((out.sum() * inv_b, Array2::from_elem(out.raw_dim(), inv_b)));
    let mut g = nn::grad(w_net, mapped, &mapped_term)?;
    let target_term = |out: &Array2<f64>| {
        let w: Vec<f64> = out.column(0).to_vec();
        let (v, grad) = marginal_penalty_with_grad(conjugate, &w)?;
        Ok((v, as_column(&grad)))
    };
    let g2 = nn::grad(w_net, ys, &target_term)?;
    add_into(&mut g, &g2.layers);
    g.loss_value += g2.loss_value;
    if !g.loss_value.is_finite() {
        return Err(Error::numeric("critic loss"));
    }
    Ok(g)
}

/// Sinkhorn settings used inside the barycentric trainer.
pub const BARYCENTRIC_SINKHORN_ITERS: usize = 2_000;
pub const BARYCENTRIC_SINKHORN_TOL: f64 = 1e-6;

/// Regresses the map onto barycentric projections of a per-batch entropic
/// plan between current and target samples.
pub fn barycentric_train_stage(
    cfg: &ESuotConfig,
    current: &Array2<f64>,
    target: &Array2<f64>,
    stage_index: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TransportStage> {
    check_samples(current, target)?;
    let d = current.ncols();
    let mut t_net = map_net(d, cfg.hidden, rng.next_u64())?;
    let mut adam = AdamState::new(&t_net);
    let mut map_curve = Vec::with_capacity(cfg.epochs);
    let mut skipped = 0usize;
    for epoch in 0..cfg.epochs {
        let xs = sample_batch(current, cfg.batch, rng);
        let ys = sample_batch(target, cfg.batch, rng);
        let cost = cost_matrix(&xs, &ys, CostExponent::SquaredEuclidean, cfg.cost_scale())?;
        let plan = sinkhorn(
            &cost,
            &uniform(xs.nrows()),
            &uniform(ys.nrows()),
            cfg.epsilon,
            BARYCENTRIC_SINKHORN_ITERS,
            BARYCENTRIC_SINKHORN_TOL,
        )?;
        let (projected, valid) = barycentric_project_rows(&plan, &ys)?;
        let dropped = valid.iter().filter(|v| !**v).count();
        if dropped > 0 {
            skipped += dropped;
            if dropped == valid.len() {
                continue;
            }
        }
        let g = barycentric_batch_grad(&t_net, &xs, &projected, &valid)
            .map_err(|e| epoch_error("barycentric", epoch, e))?;
        map_curve.push(g.loss_value);
        adam_step(&mut t_net, &g, &mut adam, cfg.lr)?;
    }
    Ok(TransportStage {
        potential: None,
        map: t_net,
        stage_index,
        potential_curve: Vec::new(),
        map_curve,
        skipped_rows: skipped,
        origin: Array1::zeros(d),
    })
}

/// Trains one stage with the configured trainer.
pub fn train_stage(
    cfg: &ESuotConfig,
    current: &Array2<f64>,
    target: &Array2<f64>,
    stage_index: usize,
    warm: WarmStart<'_>,
) -> Result<TransportStage> {
    check_samples(current, target).map_err(|e| e.at_stage(stage_index))?;
    let mut rng = stage_rng(cfg.seed, stage_index);
    let origin = if cfg.recenter {
        target.mean_axis(Axis(0)).expect("target is non-empty")
    } else {
        Array1::zeros(target.ncols())
    };
    let (current, target) = (current - &origin, target - &origin);
    let stage = match cfg.trainer {
        TrainerKind::Esuot => esuot_stage(cfg, &current, &target, stage_index, warm, &mut rng),
        TrainerKind::Adversarial => adversarial_train_stage(cfg, &current, &target, stage_index, &mut rng),
        TrainerKind::Barycentric => barycentric_train_stage(cfg, &current, &target, stage_index, &mut rng),
    };
    let mut stage = stage.map_err(|e| e.at_stage(stage_index))?;
    stage.origin = origin;
    Ok(stage)
}

/// Learns `T` transport stages from `source` toward `target` and returns
/// them with the generated domains `x_0 ..= x_T`.
///
/// Labels ride along unchanged; only features move. Target labels are never
/// read.
pub fn build_sequence(
    cfg: &ESuotConfig,
    source: &Dataset,
    target: &Dataset,
) -> Result<(TransportSequence, Vec<Dataset>)> {
    cfg.validate()?;
    if source.dim() != target.dim() {
        return Err(Error::shape(
            "build_sequence",
            format!("source dim {} vs target dim {}", source.dim(), target.dim()),
        ));
    }
    let target_x = &target.features;
    let mut domains = vec![Dataset {
        domain_index: 0,
        ..source.clone()
    }];
    let mut stages: Vec<TransportStage> = Vec::with_capacity(cfg.stages);
    for t in 0..cfg.stages {
        let warm = match (cfg.warm_start, stages.last()) {
            (true, Some(prev)) => WarmStart {
                potential: prev.potential.as_ref(),
                map: Some(&prev.map),
            },
            _ => WarmStart::default(),
        };
        let current = &domains[t].features;
        let stage = train_stage(cfg, current, target_x, t, warm)?;
        let next = stage.apply(current).map_err(|e| e.at_stage(t))?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("stage push-forward").at_stage(t));
        }
        domains.push(Dataset {
            features: next,
            labels: domains[t].labels.clone(),
            domain_index: t + 1,
            class_count: source.class_count,
        });
        stages.push(stage);
    }
    Ok((
        TransportSequence {
            stages,
            config: cfg.clone(),
        },
        domains,
    ))
}

/// Mean Euclidean displacement `mean ‖T(x) - x‖`.
pub fn mean_displacement(before: &Array2<f64>, after: &Array2<f64>) -> f64 {
    let diff = after - before;
    diff.outer_iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .sum::<f64>()
        / before.nrows().max(1) as f64
}

/// Potential values on a batch as a flat vector.
pub fn evaluate_potential(w_net: &NetParams, points: &Array2<f64>) -> Result<Array1<f64>> {
    Ok(w_net.forward(points)?.column(0).to_owned())
}
