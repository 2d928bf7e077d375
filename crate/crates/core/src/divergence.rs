//! Convex conjugates `f⋆` of the supported f-divergence generators and the
//! target-side penalty `E_target[f⋆(-w(x))]` of the semi-dual objective.
//!
//! Conventions: `f⋆(z) = sup_{y≥0} (zy - f(y))`. For KL (`f(u) = u log u`)
//! this gives `f⋆(z) = e^{z-1}`, not the `e^z - 1` variant used elsewhere.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConjugateKind {
    #[serde(rename = "kl")]
    Kl,
    #[serde(rename = "chi2")]
    ChiSq,
    /// `f⋆(z) = z`: the divergence penalty becomes a hard marginal constraint
    /// and the objective reduces to balanced entropic semi-dual OT.
    #[serde(rename = "identity")]
    Identity,
    #[serde(rename = "softplus")]
    Softplus,
}

impl ConjugateKind {
    pub const ALL: [ConjugateKind; 4] = [
        ConjugateKind::Kl,
        ConjugateKind::ChiSq,
        ConjugateKind::Identity,
        ConjugateKind::Softplus,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ConjugateKind::Kl => "kl",
            ConjugateKind::ChiSq => "chi2",
            ConjugateKind::Identity => "identity",
            ConjugateKind::Softplus => "softplus",
        }
    }
}

impl fmt::Display for ConjugateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConjugateKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "kl" => Ok(ConjugateKind::Kl),
            "chi2" => Ok(ConjugateKind::ChiSq),
            "identity" => Ok(ConjugateKind::Identity),
            "softplus" => Ok(ConjugateKind::Softplus),
            other => Err(Error::Config(format!(
                "unknown conjugate {other:?}, expected kl | chi2 | identity | softplus"
            ))),
        }
    }
}

/// Value and derivative of `f⋆` at `z`.
///
/// Identity is rejected: its penalty is linear in `w` and goes through
/// [`marginal_penalty`] directly.
pub fn fstar_eval(kind: ConjugateKind, z: f64) -> Result<(f64, f64)> {
    if !z.is_finite() {
        return Err(Error::numeric(format!("fstar_eval({kind}) at non-finite z")));
    }
    match kind {
        ConjugateKind::Kl => {
            let e = (z - 1.0).exp();
            Ok((e, e))
        }
        ConjugateKind::ChiSq => {
            // derivative at the kink is taken from the left
            if z > -2.0 {
                Ok((0.25 * z * z + z, 0.5 * z + 1.0))
            } else {
                Ok((-1.0, 0.0))
            }
        }
        ConjugateKind::Softplus => {
            let value = (-z.abs()).exp().ln_1p() + z.max(0.0);
            Ok((value, crate::nn::sigmoid(z)))
        }
        ConjugateKind::Identity => Err(Error::Contract(
            "identity conjugate is evaluated through marginal_penalty".into(),
        )),
    }
}

/// `(1/B) Σ_j f⋆(-w_j)` over the potential evaluated on a target batch.
pub fn marginal_penalty(kind: ConjugateKind, w_on_target: &[f64]) -> Result<f64> {
    Ok(marginal_penalty_with_grad(kind, w_on_target)?.0)
}

/// Penalty value together with its gradient with respect to each `w_j`.
pub fn marginal_penalty_with_grad(kind: ConjugateKind, w_on_target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if w_on_target.is_empty() {
        return Err(Error::Contract("marginal penalty over an empty batch".into()));
    }
    let inv_b = 1.0 / w_on_target.len() as f64;
    if kind == ConjugateKind::Identity {
        let value = -w_on_target.iter().sum::<f64>() * inv_b;
        if !value.is_finite() {
            return Err(Error::numeric("marginal_penalty(identity)"));
        }
        return Ok((value, vec![-inv_b; w_on_target.len()]));
    }
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(w_on_target.len());
    for &w in w_on_target {
        let (f, df) = fstar_eval(kind, -w)?;
        value += f;
        grad.push(-df * inv_b);
    }
    value *= inv_b;
    if !value.is_finite() {
        return Err(Error::numeric(format!("marginal_penalty({kind})")));
    }
    Ok((value, grad))
}
