//! Dense feed-forward networks with hand-written reverse-mode gradients.
//!
//! Every learned function in the crate (potentials, transport maps,
//! classifiers, score models) is a [`NetParams`]. A network is a chain of
//! affine layers with a shared hidden activation, no activation after the
//! last layer, and an optional residual connection from input to output.
//!
//! Batches are row-major: a batch of `B` samples with `d` features is a
//! `B x d` matrix. Layer weights are stored `out x in`.

use ndarray::{Array1, Array2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Silu,
    /// Purely affine network.
    None,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Silu => z * sigmoid(z),
            Activation::None => z,
        }
    }

    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = sigmoid(z);
                s * (1.0 + z * (1.0 - s))
            }
            Activation::None => 1.0,
        }
    }
}

/// Logistic function, evaluated without overflow for large `|z|`.
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out x in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub layers: Vec<Layer>,
    pub activation: Activation,
    pub skip: bool,
}

/// Gradient of one layer, laid out like [`Layer`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle {
    pub layers: Vec<LayerGrad>,
    pub loss_value: f64,
}

impl GradBundle {
    pub fn zeros_like(net: &NetParams) -> Self {
        GradBundle {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
            loss_value: 0.0,
        }
    }

    /// Gradient entries in the same order as [`NetParams::flat_params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.layers {
            out.extend(g.weight.iter().copied());
            out.extend(g.bias.iter().copied());
        }
        out
    }

    pub fn l2_norm(&self) -> f64 {
        self.flatten().iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Activations recorded by a forward pass, consumed by [`NetParams::backward`].
#[derive(Debug, Clone)]
pub struct Trace {
    /// Input to each layer; `inputs[0]` is the batch itself.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

/// Builds a network with weights drawn uniformly from
/// `[-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))]` and zero biases.
pub fn mlp_init(
    layer_dims: &[usize],
    activation: Activation,
    skip: bool,
    seed: u64,
) -> Result<NetParams> {
    if layer_dims.len() < 2 {
        return Err(Error::Config(format!(
            "a network needs at least an input and an output dimension, got {layer_dims:?}"
        )));
    }
    if layer_dims.contains(&0) {
        return Err(Error::Config(format!(
            "layer dimensions must be positive, got {layer_dims:?}"
        )));
    }
    if skip && layer_dims[0] != layer_dims[layer_dims.len() - 1] {
        return Err(Error::Config(format!(
            "skip connection needs input dim == output dim, got {} and {}",
            layer_dims[0],
            layer_dims[layer_dims.len() - 1]
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = layer_dims
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let weight =
                Array2::from_shape_simple_fn((fan_out, fan_in), || rng.random_range(-bound..bound));
            Layer {
                weight,
                bias: Array1::zeros(fan_out),
            }
        })
        .collect();
    Ok(NetParams {
        layers,
        activation,
        skip,
    })
}

fn check_finite(a: &Array2<f64>, op: impl FnOnce() -> String) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric(op()))
    }
}

impl NetParams {
    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Checks the structural invariants: chained dimensions, skip
    /// compatibility and finite entries.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("network has no layers".into()));
        }
        for (k, pair) in self.layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::shape(
                    "NetParams::validate",
                    format!(
                        "layer {k} outputs {} but layer {} expects {}",
                        pair[0].out_dim(),
                        k + 1,
                        pair[1].in_dim()
                    ),
                ));
            }
        }
        for (k, l) in self.layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(Error::shape(
                    "NetParams::validate",
                    format!("layer {k} bias has {} entries for {} outputs", l.bias.len(), l.out_dim()),
                ));
            }
            if !l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()) {
                return Err(Error::numeric(format!("layer {k} parameters")));
            }
        }
        if self.skip && self.input_dim() != self.output_dim() {
            return Err(Error::Config(
                "skip connection needs input dim == output dim".into(),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, batch: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_traced(batch)?.output)
    }

    pub fn forward_traced(&self, batch: &Array2<f64>) -> Result<Trace> {
        if batch.ncols() != self.input_dim() {
            return Err(Error::shape(
                "mlp_forward",
                format!("batch has {} columns, network expects {}", batch.ncols(), self.input_dim()),
            ));
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = batch.to_owned();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weight.t());
            z += &layer.bias;
            check_finite(&z, || format!("layer {k} forward"))?;
            let next = if k < last {
                let act = self.activation;
                z.mapv(|v| act.apply(v))
            } else {
                z.clone()
            };
            inputs.push(h);
            pre.push(z);
            h = next;
        }
        if self.skip {
            h += batch;
        }
        Ok(Trace {
            inputs,
            pre,
            output: h,
        })
    }

    /// Reverse pass: given `dL/d(output)`, returns parameter gradients and
    /// `dL/d(input)`.
    pub fn backward(
        &self,
        trace: &Trace,
        grad_output: &Array2<f64>,
    ) -> Result<(Vec<LayerGrad>, Array2<f64>)> {
        if grad_output.raw_dim() != trace.output.raw_dim() {
            return Err(Error::shape(
                "mlp_backward",
                format!(
                    "output gradient is {:?}, output is {:?}",
                    grad_output.shape(),
                    trace.output.shape()
                ),
            ));
        }
        let last = self.layers.len() - 1;
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = grad_output.to_owned();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let dz = if k < last {
                let act = self.activation;
                let mut dz = g;
                Zip::from(&mut dz)
                    .and(&trace.pre[k])
                    .for_each(|d, &z| *d *= act.derivative(z));
                dz
            } else {
                g
            };
            let dw = dz.t().dot(&trace.inputs[k]);
            let db = dz.sum_axis(Axis(0));
            g = dz.dot(&layer.weight);
            check_finite(&g, || format!("layer {k} backward"))?;
            grads.push(LayerGrad {
                weight: dw,
                bias: db,
            });
        }
        grads.reverse();
        if self.skip {
            g += grad_output;
        }
        Ok((grads, g))
    }

    /// Parameters in layer order, weights (row-major) then bias per layer.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weight.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::shape(
                "set_flat_params",
                format!("{} values for {} parameters", values.len(), self.num_params()),
            ));
        }
        let mut it = values.iter().copied();
        for l in &mut self.layers {
            for w in l.weight.iter_mut() {
                *w = it.next().unwrap();
            }
            for b in l.bias.iter_mut() {
                *b = it.next().unwrap();
            }
        }
        Ok(())
    }

    pub fn weights(&self) -> impl Iterator<Item = &Array2<f64>> {
        self.layers.iter().map(|l| &l.weight)
    }
}

/// A scalar loss of a network's output batch.
///
/// Implementors return the loss value and its gradient with respect to the
/// output matrix; [`grad`] pulls that back through the network.
pub trait OutputLoss {
    fn value_and_grad(&self, output: &Array2<f64>) -> Result<(f64, Array2<f64>)>;
}

impl<F> OutputLoss for F
where
    F: Fn(&Array2<f64>) -> Result<(f64, Array2<f64>)>,
{
    fn value_and_grad(&self, output: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
        self(output)
    }
}

/// Exact gradient of `loss(net(batch))` with respect to the parameters.
pub fn grad<L: OutputLoss + ?Sized>(
    net: &NetParams,
    batch: &Array2<f64>,
    loss: &L,
) -> Result<GradBundle> {
    Ok(grad_with_input(net, batch, loss)?.0)
}

/// Like [`grad`], also returning the gradient with respect to the batch.
pub fn grad_with_input<L: OutputLoss + ?Sized>(
    net: &NetParams,
    batch: &Array2<f64>,
    loss: &L,
) -> Result<(GradBundle, Array2<f64>)> {
    let trace = net.forward_traced(batch)?;
    let (loss_value, g_out) = loss.value_and_grad(&trace.output)?;
    if !loss_value.is_finite() {
        return Err(Error::numeric("loss evaluation"));
    }
    let (layers, g_in) = net.backward(&trace, &g_out)?;
    Ok((GradBundle { layers, loss_value }, g_in))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step_count: u64,
    pub first_moment: Vec<LayerGrad>,
    pub second_moment: Vec<LayerGrad>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_num: f64,
}

impl AdamState {
    pub fn new(net: &NetParams) -> Self {
        let zeros = GradBundle::zeros_like(net).layers;
        AdamState {
            step_count: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
            beta1: 0.9,
            beta2: 0.999,
            eps_num: 1e-8,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    net: &mut NetParams,
    grads: &GradBundle,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    let aligned = grads.layers.len() == net.layers.len()
        && state.first_moment.len() == net.layers.len()
        && net
            .layers
            .iter()
            .zip(&grads.layers)
            .zip(&state.first_moment)
            .all(|((l, g), m)| {
                l.weight.raw_dim() == g.weight.raw_dim()
                    && l.bias.raw_dim() == g.bias.raw_dim()
                    && l.weight.raw_dim() == m.weight.raw_dim()
                    && l.bias.raw_dim() == m.bias.raw_dim()
            });
    if !aligned {
        return Err(Error::shape(
            "adam_step",
            "gradient or optimizer state does not match network layout",
        ));
    }
    state.step_count += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps_num);
    let t = state.step_count as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    };
    for (((layer, g), m), v) in net
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut state.first_moment)
        .zip(&mut state.second_moment)
    {
        Zip::from(&mut layer.weight)
            .and(&g.weight)
            .and(&mut m.weight)
            .and(&mut v.weight)
            .for_each(|p, &g, m, v| update(p, g, m, v));
        Zip::from(&mut layer.bias)
            .and(&g.bias)
            .and(&mut m.bias)
            .and(&mut v.bias)
            .for_each(|p, &g, m, v| update(p, g, m, v));
    }
    Ok(())
}

/// Largest singular value by power iteration on `WᵀW`, started from a fixed
/// seeded vector. Returns 0 for a zero matrix.
pub fn spectral_norm(weight: &Array2<f64>, iters: usize) -> f64 {
    spectral_norm_trace(weight, iters.max(1))
        .last()
        .copied()
        .unwrap_or(0.0)
}

/// Power-iteration estimates after each of `iters` steps.
pub fn spectral_norm_trace(weight: &Array2<f64>, iters: usize) -> Vec<f64> {
    let n = weight.ncols();
    if n == 0 || weight.nrows() == 0 || weight.iter().all(|&w| w == 0.0) {
        return vec![0.0; iters.max(1)];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0f_5ec7);
    let mut v: Array1<f64> = Array1::from_shape_simple_fn(n, || rng.random_range(-1.0..1.0) + 1e-3);
    normalize(&mut v);
    let mut out = Vec::with_capacity(iters);
    let mut sigma = 0.0;
    for _ in 0..iters {
        let u = weight.dot(&v);
        let mut next = weight.t().dot(&u);
        if normalize(&mut next) == 0.0 {
            // v fell into the null space; the previous estimate stands.
            out.push(sigma);
            continue;
        }
        v = next;
        sigma = weight.dot(&v).dot(&weight.dot(&v)).sqrt();
        out.push(sigma);
    }
    out
}

fn normalize(v: &mut Array1<f64>) -> f64 {
    let norm = v.dot(v).sqrt();
    if norm > 0.0 {
        v.mapv_inplace(|x| x / norm);
    }
    norm
}

/// Spectral norm iterated until successive estimates agree to `rel_tol`,
/// capped at `max_iters`.
pub fn spectral_norm_converged(weight: &Array2<f64>, rel_tol: f64, max_iters: usize) -> f64 {
    let n = weight.ncols();
    if n == 0 || weight.nrows() == 0 || weight.iter().all(|&w| w == 0.0) {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0f_5ec7);
    let mut v: Array1<f64> = Array1::from_shape_simple_fn(n, || rng.random_range(-1.0..1.0) + 1e-3);
    normalize(&mut v);
    let mut sigma = 0.0_f64;
    for _ in 0..max_iters.max(1) {
        let mut next = weight.t().dot(&weight.dot(&v));
        if normalize(&mut next) == 0.0 {
            break;
        }
        v = next;
        let wv = weight.dot(&v);
        let est = wv.dot(&wv).sqrt();
        let done = (est - sigma).abs() <= rel_tol * est;
        sigma = est;
        if done {
            break;
        }
    }
    sigma
}
