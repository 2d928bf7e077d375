//! Evaluation that sits beside training: the W2 trajectory check, the
//! generalization-bound terms, the score-based transport comparison and the
//! step-size advisory.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gda::Classifier;
use crate::nn::{adam_step, grad, mlp_init, spectral_norm_converged, Activation, AdamState, GradBundle, NetParams};
use crate::ot::{sinkhorn_distance, CostExponent, DistanceOptions};
use crate::suot::{sample_batch, stage_rng, train_stage, ESuotConfig, WarmStart};

/// Sinkhorn W2² estimate from each `x_t` to the target.
pub fn w2_trajectory(domains: &[Array2<f64>], target: &Array2<f64>, opts: &DistanceOptions) -> Result<Vec<f64>> {
    domains
        .iter()
        .enumerate()
        .map(|(t, x)| {
            sinkhorn_distance(x, target, CostExponent::SquaredEuclidean, opts).map_err(|e| e.at_stage(t))
        })
        .collect()
}

/// Estimated terms of the target-error bound
/// `err(h_0) + ι·ζ·C + S_stat`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// Lipschitz bound of the loss; an upper bound, not a measurement.
    pub iota: f64,
    /// Product of per-layer spectral norms of the classifier.
    pub zeta: f64,
    pub layer_norms: Vec<f64>,
    /// Sum over consecutive domains of W1 plus label disagreement over ζ.
    pub cumulative_cost: f64,
    pub transport_terms: Vec<f64>,
    pub disagreement_terms: Vec<f64>,
    /// `stages / sqrt(sample_size)`, constant taken as 1.
    pub stat_term: f64,
    /// Terms of the bound this report does not estimate.
    pub unestimated: Vec<String>,
}

impl BoundReport {
    pub fn bound(&self, source_error: f64) -> f64 {
        source_error + self.iota * self.zeta * self.cumulative_cost + self.stat_term
    }
}

pub const UNESTIMATED_OPTIMAL_ERROR: &str = "eps_p0(h_T*)";

/// Spectral-norm product of a network's weight matrices, with each factor.
pub fn lipschitz_product(net: &NetParams) -> (f64, Vec<f64>) {
    let norms: Vec<f64> = net.weights().map(|w| spectral_norm_converged(w, 1e-13, 20_000)).collect();
    (norms.iter().product(), norms)
}

/// `domains` holds `(features, pseudo_labels)` for `x_0 ..= x_T`, rows
/// index-aligned across domains (row i of `x_{t+1}` is the image of row i of
/// `x_t`).
pub fn estimate_bound_terms(
    classifier: &Classifier,
    domains: &[(Array2<f64>, Vec<usize>)],
    sample_size: usize,
    stages: usize,
    opts: &DistanceOptions,
) -> Result<BoundReport> {
    if domains.len() < 2 {
        return Err(Error::Contract("bound estimation needs at least two domains".into()));
    }
    if sample_size == 0 {
        return Err(Error::Contract("sample_size must be positive".into()));
    }
    let (zeta, layer_norms) = lipschitz_product(&classifier.net);
    let mut transport_terms = Vec::with_capacity(domains.len() - 1);
    let mut disagreement_terms = Vec::with_capacity(domains.len() - 1);
    for (t, pair) in domains.windows(2).enumerate() {
        let ((xa, ya), (xb, yb)) = (&pair[0], &pair[1]);
        if ya.len() != yb.len() || ya.len() != xa.nrows() || yb.len() != xb.nrows() {
            return Err(Error::shape("estimate_bound_terms", format!("domains {t} and {} are not row-aligned", t + 1)));
        }
        transport_terms.push(sinkhorn_distance(xa, xb, CostExponent::Euclidean, opts)?);
        let differ = ya.iter().zip(yb).filter(|(a, b)| a != b).count() as f64 / ya.len() as f64;
        disagreement_terms.push(if differ == 0.0 { 0.0 } else { differ / zeta });
    }
    let cumulative_cost: f64 = transport_terms.iter().sum::<f64>() + disagreement_terms.iter().sum::<f64>();
    if !cumulative_cost.is_finite() {
        return Err(Error::numeric("bound cumulative cost"));
    }
    Ok(BoundReport {
        iota: 1.0,
        zeta,
        layer_norms,
        cumulative_cost,
        transport_terms,
        disagreement_terms,
        stat_term: stages as f64 / (sample_size as f64).sqrt(),
        unestimated: vec![UNESTIMATED_OPTIMAL_ERROR.to_string()],
    })
}

/// Score network `s_θ: R^d -> R^d` trained at noise level `noise_sigma`,
/// evaluated as `net(x - origin)` with the origin at the training mean.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreModel {
    pub net: NetParams,
    pub noise_sigma: f64,
    pub origin: Array1<f64>,
}

impl ScoreModel {
    pub fn score(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.origin.len() {
            return Err(Error::shape("score", format!("input dim {} vs model dim {}", x.ncols(), self.origin.len())));
        }
        self.net.forward(&(x - &self.origin))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DsmConfig {
    pub hidden: usize,
    /// Optimizer steps, one minibatch each.
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DsmConfig {
    fn default() -> Self {
        DsmConfig {
            hidden: 64,
            epochs: 2000,
            batch: 256,
            lr: 2e-3,
            seed: 0,
        }
    }
}

/// `mean ‖s(x + σz) + z/σ‖²` over the batch, with its parameter gradient.
/// `noisy` is `x + σz`.
pub fn dsm_batch_grad(net: &NetParams, noisy: &Array2<f64>, z: &Array2<f64>, sigma: f64) -> Result<GradBundle> {
    if noisy.dim() != z.dim() {
        return Err(Error::shape("dsm_batch_grad", format!("{:?} vs {:?}", noisy.dim(), z.dim())));
    }
    let b = noisy.nrows() as f64;
    grad(net, noisy, &|out: &Array2<f64>| {
        let resid = out + &(z / sigma);
        let value = resid.iter().map(|r| r * r).sum::<f64>() / b;
        Ok((value, resid * (2.0 / b)))
    })
}

pub fn dsm_train(cfg: &DsmConfig, samples: &Array2<f64>, sigma: f64) -> Result<ScoreModel> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Config(format!("dsm sigma must be positive, got {sigma}")));
    }
    if samples.nrows() == 0 {
        return Err(Error::Contract("dsm on an empty sample set".into()));
    }
    let d = samples.ncols();
    let origin = samples.mean_axis(Axis(0)).expect("samples are non-empty");
    let samples = samples - &origin;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(500);
    let mut net = mlp_init(&[d, cfg.hidden, cfg.hidden, d], Activation::Silu, false, rng.random())?;
    let mut adam = AdamState::new(&net);
    for epoch in 0..cfg.epochs {
        let x = sample_batch(&samples, cfg.batch, &mut rng);
        let z = Array2::from_shape_fn(x.raw_dim(), |_| rng.sample::<f64, _>(StandardNormal));
        let noisy = &x + &(&z * sigma);
        let g = dsm_batch_grad(&net, &noisy, &z, sigma).map_err(|e| match e {
            Error::Numeric { op } => Error::numeric(format!("dsm epoch {epoch}: {op}")),
            other => other,
        })?;
        adam_step(&mut net, &g, &mut adam, cfg.lr)?;
    }
    Ok(ScoreModel {
        net,
        noise_sigma: sigma,
        origin,
    })
}

/// Unadjusted Langevin with an arbitrary score function, keeping every
/// `snapshot_every`-th state (the initial state included). `snapshot_every == 0`
/// keeps none.
pub fn langevin_with_score<F>(
    score: F,
    x0: &Array2<f64>,
    step: f64,
    n_steps: usize,
    seed: u64,
    snapshot_every: usize,
) -> Result<(Array2<f64>, Vec<Array2<f64>>)>
where
    F: Fn(&Array2<f64>) -> Result<Array2<f64>>,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::Config(format!("langevin step must be positive, got {step}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(600);
    let noise_scale = step.sqrt();
    let mut x = x0.clone();
    let mut snapshots = Vec::new();
    if snapshot_every > 0 {
        snapshots.push(x.clone());
    }
    for k in 0..n_steps {
        let s = score(&x)?;
        if s.dim() != x.dim() {
            return Err(Error::shape("langevin", format!("score returned {:?} for {:?}", s.dim(), x.dim())));
        }
        x.zip_mut_with(&s, |xi, si| *xi += 0.5 * step * si);
        x.mapv_inplace(|xi| xi + noise_scale * rng.sample::<f64, _>(StandardNormal));
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("langevin step {k}")));
        }
        if snapshot_every > 0 && (k + 1) % snapshot_every == 0 {
            snapshots.push(x.clone());
        }
    }
    Ok((x, snapshots))
}

pub fn langevin_transport(
    score: &ScoreModel,
    x0: &Array2<f64>,
    step: f64,
    n_steps: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    Ok(langevin_with_score(|x| score.score(x), x0, step, n_steps, seed, 0)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotivationConfig {
    /// Transport settings for the direct branch; a single stage is trained.
    pub transport: ESuotConfig,
    pub dsm: DsmConfig,
    pub sigma: f64,
    pub langevin_step: f64,
    pub langevin_steps: usize,
    /// Fraction of target rows held out for scoring.
    pub holdout: f64,
    pub distance: DistanceOptions,
    /// Langevin states kept for plotting.
    pub snapshots: usize,
}

impl Default for MotivationConfig {
    fn default() -> Self {
        MotivationConfig {
            // a direct one-shot map across the ring needs a weak quadratic anchor
            transport: ESuotConfig {
                stages: 1,
                eta: 20.0,
                ..ESuotConfig::default()
            },
            dsm: DsmConfig::default(),
            sigma: 0.3,
            langevin_step: 0.01,
            langevin_steps: 500,
            holdout: 0.5,
            distance: DistanceOptions::default(),
            snapshots: 5,
        }
    }
}

impl MotivationConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.transport.seed = seed;
        self.dsm.seed = seed;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotivationResult {
    pub w2_est_trans: f64,
    pub w2_dir_trans: f64,
    /// `"dir_trans"` or `"est_trans"`, whichever lands closer to held-out target.
    pub winner: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotivationRun {
    pub result: MotivationResult,
    pub est_trans: Array2<f64>,
    pub dir_trans: Array2<f64>,
    /// Langevin particle states from start to finish.
    pub snapshots: Vec<Array2<f64>>,
}

/// Score-estimate-then-sample transport versus a learned direct map, both
/// scored against held-out target rows.
pub fn motivation_compare(cfg: &MotivationConfig, source: &Array2<f64>, target: &Array2<f64>) -> Result<MotivationRun> {
    if source.ncols() != target.ncols() {
        return Err(Error::shape("motivation_compare", "source and target dimensions differ".to_string()));
    }
    if !(cfg.holdout > 0.0 && cfg.holdout < 1.0) {
        return Err(Error::Config(format!("holdout must lie in (0, 1), got {}", cfg.holdout)));
    }
    let seed = cfg.transport.seed;
    let mut rng = stage_rng(seed, 900);
    let mut rows: Vec<usize> = (0..target.nrows()).collect();
    rows.shuffle(&mut rng);
    let n_hold = ((target.nrows() as f64) * cfg.holdout).round() as usize;
    if n_hold == 0 || n_hold == target.nrows() {
        return Err(Error::Contract("target too small to hold out rows".into()));
    }
    let held = target.select(Axis(0), &rows[..n_hold]);
    let train = target.select(Axis(0), &rows[n_hold..]);

    let score = dsm_train(&cfg.dsm, &train, cfg.sigma)?;
    let every = if cfg.snapshots > 1 { (cfg.langevin_steps / (cfg.snapshots - 1)).max(1) } else { 0 };
    let (est_trans, mut snapshots) =
        langevin_with_score(|x| score.score(x), source, cfg.langevin_step, cfg.langevin_steps, seed, every)?;
    snapshots.truncate(cfg.snapshots);

    let stage = train_stage(&cfg.transport, source, &train, 0, WarmStart::default())?;
    let dir_trans = stage.apply(source)?;

    let w2_est_trans = sinkhorn_distance(&est_trans, &held, CostExponent::SquaredEuclidean, &cfg.distance)?;
    let w2_dir_trans = sinkhorn_distance(&dir_trans, &held, CostExponent::SquaredEuclidean, &cfg.distance)?;
    let winner = if w2_dir_trans < w2_est_trans { "dir_trans" } else { "est_trans" };
    Ok(MotivationRun {
        result: MotivationResult {
            w2_est_trans,
            w2_dir_trans,
            winner: winner.to_string(),
        },
        est_trans,
        dir_trans,
        snapshots,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepAdvisory {
    pub ok: bool,
    pub limit: f64,
}

/// Checks `0 < η < min(1/B_g, H_0/A)` for user-supplied constants `A`
/// (bound on the first variation), `B_g` (bound on its gradient) and the
/// light-tail constant `H_0`.
pub fn step_size_advisory(
    eta: f64,
    grad_norm_bound: f64,
    grad_of_variation_bound: f64,
    light_tail: f64,
) -> Result<StepAdvisory> {
    for (name, v) in [
        ("eta", eta),
        ("grad_norm_bound", grad_norm_bound),
        ("grad_of_variation_bound", grad_of_variation_bound),
        ("light_tail", light_tail),
    ] {
        if !(v > 0.0) || v.is_nan() {
            return Err(Error::Config(format!("{name} must be positive, got {v}")));
        }
    }
    let limit = (1.0 / grad_of_variation_bound).min(light_tail / grad_norm_bound);
    Ok(StepAdvisory { ok: eta < limit, limit })
}
