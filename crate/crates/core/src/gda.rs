//! Gradual domain adaptation along a learned transport sequence.
//!
//! A classifier is trained on the labeled source, then fine-tuned stage by
//! stage on the generated intermediate domains, whose labels are the source
//! labels carried through the maps. Target labels are used for evaluation
//! only.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{estimate_bound_terms, BoundReport};
use crate::error::{Error, Result};
use crate::nn::{adam_step, grad, mlp_init, Activation, AdamState, NetParams};
use crate::ot::{sinkhorn_distance, CostExponent, DistanceOptions};
use crate::suot::{build_sequence, ESuotConfig};
use crate::Dataset;

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    /// Logit head, output dim `class_count`.
    pub net: NetParams,
    pub class_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub hidden: usize,
    /// Full passes over the training set for the source classifier.
    pub epochs: usize,
    /// Passes per stage when fine-tuning; `None` means `epochs / 5`.
    pub finetune_epochs: Option<usize>,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            hidden: 100,
            epochs: 100,
            finetune_epochs: None,
            lr: 1e-3,
            batch: 128,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.batch == 0 {
            return Err(Error::Config("classifier hidden width and batch must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("classifier lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }

    pub fn finetune_budget(&self) -> usize {
        self.finetune_epochs.unwrap_or(self.epochs / 5)
    }
}

/// Loss curve and final training accuracy of one fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    /// Mean minibatch loss per epoch.
    pub loss_curve: Vec<f64>,
    pub train_accuracy: f64,
}

impl Classifier {
    /// Three-layer ReLU network `[d, h, h, K]`.
    pub fn new(dim: usize, class_count: usize, hidden: usize, seed: u64) -> Result<Self> {
        if class_count == 0 {
            return Err(Error::Config("class_count must be at least 1".into()));
        }
        Ok(Classifier {
            net: mlp_init(&[dim, hidden, hidden, class_count], Activation::Relu, false, seed)?,
            class_count,
        })
    }

    pub fn logits(&self, features: &Array2<f64>) -> Result<Array2<f64>> {
        self.net.forward(features)
    }

    /// Argmax class per row; ties go to the lowest index.
    pub fn predict(&self, features: &Array2<f64>) -> Result<Vec<usize>> {
        Ok(self.logits(features)?.outer_iter().map(|row| argmax(row.iter().copied())).collect())
    }
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

fn check_labels(labels: &[usize], rows: usize, k: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::shape("cross_entropy", format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Contract(format!("label {bad} outside 0..{k}")));
    }
    Ok(())
}

/// Mean cross-entropy of `logits` against `labels`, with its gradient
/// `(softmax - onehot) / B`.
pub fn cross_entropy_with_grad(logits: &Array2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (b, k) = logits.dim();
    if b == 0 {
        return Err(Error::Contract("cross-entropy over an empty batch".into()));
    }
    check_labels(labels, b, k)?;
    let mut total = 0.0;
    let mut g = Array2::zeros((b, k));
    for (i, row) in logits.outer_iter().enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[labels[i]];
        for c in 0..k {
            g[[i, c]] = (row[c] - lse).exp() / b as f64;
        }
        g[[i, labels[i]]] -= 1.0 / b as f64;
    }
    let loss = total / b as f64;
    if !loss.is_finite() {
        return Err(Error::numeric("cross-entropy"));
    }
    Ok((loss, g))
}

pub fn cross_entropy_loss(classifier: &Classifier, features: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    Ok(cross_entropy_with_grad(&classifier.logits(features)?, labels)?.0)
}

/// Percent of rows whose argmax logit equals the label.
pub fn accuracy(classifier: &Classifier, data: &Dataset) -> Result<f64> {
    let labels = data.labels()?;
    let predicted = classifier.predict(&data.features)?;
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Minibatch Adam on cross-entropy, continuing from `classifier`.
fn fit(
    classifier: &mut Classifier,
    features: &Array2<f64>,
    labels: &[usize],
    epochs: usize,
    cfg: &ClassifierConfig,
    rng: &mut ChaCha8Rng,
) -> Result<FitRecord> {
    check_labels(labels, features.nrows(), classifier.class_count)?;
    if features.nrows() == 0 {
        return Err(Error::Contract("classifier training set is empty".into()));
    }
    let mut adam = AdamState::new(&classifier.net);
    let mut order: Vec<usize> = (0..features.nrows()).collect();
    let mut loss_curve = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch) {
            let xb = features.select(Axis(0), chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let g = grad(&classifier.net, &xb, &|out: &Array2<f64>| cross_entropy_with_grad(out, &yb))
                .map_err(|e| match e {
                    Error::Numeric { op } => Error::numeric(format!("classifier epoch {epoch}: {op}")),
                    other => other,
                })?;
            sum += g.loss_value;
            batches += 1;
            adam_step(&mut classifier.net, &g, &mut adam, cfg.lr)?;
        }
        loss_curve.push(sum / batches as f64);
    }
    let predicted = classifier.predict(features)?;
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(FitRecord {
        loss_curve,
        train_accuracy: 100.0 * hits as f64 / labels.len() as f64,
    })
}

/// Fresh classifier trained on labeled data for `cfg.epochs` passes.
pub fn train_classifier(cfg: &ClassifierConfig, data: &Dataset) -> Result<(Classifier, FitRecord)> {
    cfg.validate()?;
    let labels = data.labels()?;
    let mut classifier = Classifier::new(data.dim(), data.class_count, cfg.hidden, cfg.seed)?;
    let mut rng = rng_for(cfg.seed, 0);
    let record = fit(&mut classifier, &data.features, labels, cfg.epochs, cfg, &mut rng)?;
    Ok((classifier, record))
}

/// Warm-started fine-tuning for `epochs` passes; `stream` separates the
/// shuffling of different calls under one seed.
pub fn finetune(
    cfg: &ClassifierConfig,
    classifier: &Classifier,
    features: &Array2<f64>,
    labels: &[usize],
    epochs: usize,
    stream: u64,
) -> Result<(Classifier, FitRecord)> {
    cfg.validate()?;
    let mut next = classifier.clone();
    let mut rng = rng_for(cfg.seed, stream);
    let record = fit(&mut next, features, labels, epochs, cfg, &mut rng)?;
    Ok((next, record))
}

/// Pseudo-label `unlabeled` with the current classifier and retrain on those
/// labels, `rounds` times. Each round fine-tunes for the full `cfg.epochs`.
pub fn self_train(
    cfg: &ClassifierConfig,
    classifier: &Classifier,
    unlabeled: &Dataset,
    rounds: usize,
) -> Result<Classifier> {
    let mut current = classifier.clone();
    for round in 0..rounds {
        let pseudo = current.predict(&unlabeled.features)?;
        current = finetune(cfg, &current, &unlabeled.features, &pseudo, cfg.epochs, 10_000 + round as u64)?.0;
    }
    Ok(current)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GdaConfig {
    pub transport: ESuotConfig,
    pub classifier: ClassifierConfig,
    /// Sinkhorn settings for the reported W2 and W1 estimates.
    pub distance: DistanceOptions,
}

impl Default for GdaConfig {
    fn default() -> Self {
        GdaConfig {
            transport: ESuotConfig::default(),
            classifier: ClassifierConfig::default(),
            distance: DistanceOptions::default(),
        }
    }
}

impl GdaConfig {
    /// Same seed for transport and classifier.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.transport.seed = seed;
        self.classifier.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.transport.validate()?;
        self.classifier.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    /// 0 is the source domain before any transport.
    pub stage: usize,
    pub w2_to_target: f64,
    /// Target accuracy of the classifier after fine-tuning on this domain.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCurves {
    pub stage: usize,
    pub potential: Vec<f64>,
    pub map: Vec<f64>,
    pub classifier: Vec<f64>,
    pub skipped_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GdaReport {
    pub config: GdaConfig,
    pub seed: u64,
    pub source_only_accuracy: f64,
    pub per_stage: Vec<StageReport>,
    pub final_accuracy: f64,
    pub bound_report: BoundReport,
    pub source_curve: Vec<f64>,
    pub curves: Vec<StageCurves>,
}

/// Full pipeline: source classifier, transport sequence, stage-wise
/// fine-tuning on carried labels, target evaluation.
pub fn run_gda(cfg: &GdaConfig, source: &Dataset, target: &Dataset) -> Result<GdaReport> {
    Ok(run_gda_with_model(cfg, source, target)?.0)
}

/// [`run_gda`] that also returns the final classifier `h_T`.
pub fn run_gda_with_model(cfg: &GdaConfig, source: &Dataset, target: &Dataset) -> Result<(GdaReport, Classifier)> {
    cfg.validate()?;
    if source.dim() != target.dim() {
        return Err(Error::shape(
            "run_gda",
            format!("source dim {} vs target dim {}", source.dim(), target.dim()),
        ));
    }
    source.labels()?;
    let unlabeled = target.without_labels();

    let (h0, source_fit) = train_classifier(&cfg.classifier, source)?;
    let source_only_accuracy = accuracy(&h0, target)?;
    let (sequence, domains) = build_sequence(&cfg.transport, source, &unlabeled)?;

    let w2 = |x: &Array2<f64>| {
        sinkhorn_distance(x, &target.features, CostExponent::SquaredEuclidean, &cfg.distance)
    };
    let mut per_stage = vec![StageReport {
        stage: 0,
        w2_to_target: w2(&domains[0].features)?,
        accuracy: source_only_accuracy,
    }];
    let mut pseudo_domains = vec![(domains[0].features.clone(), h0.predict(&domains[0].features)?)];
    let mut curves = Vec::with_capacity(sequence.stages.len());
    let mut h = h0;
    let budget = cfg.classifier.finetune_budget();
    for (stage, domain) in sequence.stages.iter().zip(&domains[1..]) {
        let t = domain.domain_index;
        let labels = domain.labels()?;
        let (next, record) = finetune(&cfg.classifier, &h, &domain.features, labels, budget, t as u64)
            .map_err(|e| e.at_stage(t - 1))?;
        h = next;
        per_stage.push(StageReport {
            stage: t,
            w2_to_target: w2(&domain.features).map_err(|e| e.at_stage(t - 1))?,
            accuracy: accuracy(&h, target)?,
        });
        pseudo_domains.push((domain.features.clone(), h.predict(&domain.features)?));
        curves.push(StageCurves {
            stage: stage.stage_index,
            potential: stage.potential_curve.clone(),
            map: stage.map_curve.clone(),
            classifier: record.loss_curve,
            skipped_rows: stage.skipped_rows,
        });
    }

    let bound_report = estimate_bound_terms(
        &h,
        &pseudo_domains,
        source.len(),
        cfg.transport.stages,
        &cfg.distance,
    )?;
    let final_accuracy = per_stage.last().map(|s| s.accuracy).unwrap_or(source_only_accuracy);
    let report = GdaReport {
        config: cfg.clone(),
        seed: cfg.transport.seed,
        source_only_accuracy,
        per_stage,
        final_accuracy,
        bound_report,
        source_curve: source_fit.loss_curve,
        curves,
    };
    Ok((report, h))
}

/// Class prior of predictions, for quick inspection of collapsed classifiers.
pub fn predicted_prior(classifier: &Classifier, features: &Array2<f64>) -> Result<Array1<f64>> {
    let mut counts = Array1::zeros(classifier.class_count);
    let predicted = classifier.predict(features)?;
    for p in &predicted {
        counts[*p] += 1.0;
    }
    Ok(counts / predicted.len().max(1) as f64)
}
