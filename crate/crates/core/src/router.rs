//! Expert routers.
//!
//! A router maps a token representation `x` to a distribution `P` over the
//! `N` experts of a layer (`softmax(W_r·x)`), then a [`RoutingPolicy`] picks
//! which experts run and with what gate weight:
//!
//! * **top-k** takes the `K` most probable experts and renormalizes their
//!   probabilities so the gates sum to one;
//! * **top-p** sorts `P` in descending order and keeps the shortest prefix
//!   whose cumulative probability reaches the threshold `p`. Gates are the
//!   raw probabilities, so the layer output is scaled by the selected mass.
//!
//! Ties are broken by the lower expert index everywhere.

use std::fmt;

use crate::error::{Error, Result};
use crate::numerics::{softmax_in_place, Scalar, Tensor};

/// Learnable routing matrix of one MoE layer, `[N×d]`.
#[derive(Clone, Debug)]
pub struct RouterParams<F> {
    pub weight: Tensor<F>,
}

impl<F: Scalar> RouterParams<F> {
    pub fn new(weight: Tensor<F>) -> Result<Self> {
        weight.dims2()?;
        Ok(RouterParams { weight })
    }

    pub fn num_experts(&self) -> usize {
        self.weight.dims2().map(|(n, _)| n).unwrap_or(0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RoutingPolicy {
    TopK { k: usize },
    TopP { threshold: f64 },
}

impl RoutingPolicy {
    pub fn top_k(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::config("k", "must be at least 1"));
        }
        Ok(RoutingPolicy::TopK { k })
    }

    pub fn top_p(threshold: f64) -> Result<Self> {
        check_threshold(threshold)?;
        Ok(RoutingPolicy::TopP { threshold })
    }

    /// Checks the policy against a layer with `experts` experts.
    pub fn validate(&self, experts: usize) -> Result<()> {
        match *self {
            RoutingPolicy::TopK { k } if k == 0 || k > experts => Err(Error::config(
                "k",
                format!("must lie in 1..={experts}, got {k}"),
            )),
            RoutingPolicy::TopP { threshold } => check_threshold(threshold),
            _ => Ok(()),
        }
    }

    pub fn is_top_p(&self) -> bool {
        matches!(self, RoutingPolicy::TopP { .. })
    }

    /// Same policy with a different top-p threshold; top-k is returned unchanged.
    pub fn with_threshold(self, threshold: f64) -> Result<Self> {
        match self {
            RoutingPolicy::TopP { .. } => RoutingPolicy::top_p(threshold),
            other => Ok(other),
        }
    }
}

impl fmt::Display for RoutingPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RoutingPolicy::TopK { k } => write!(f, "top-k(k={k})"),
            RoutingPolicy::TopP { threshold } => write!(f, "top-p(p={threshold})"),
        }
    }
}

fn check_threshold(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::config(
            "p",
            format!("threshold must lie in (0, 1), got {p}"),
        ))
    }
}

/// Outcome of routing one token.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterDecision {
    probs: Vec<f64>,
    order: Vec<usize>,
    count: usize,
    gates: Vec<f64>,
}

impl RouterDecision {
    /// Full router distribution `P`.
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Expert indices sorted by descending probability.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Selected experts, a prefix of [`order`](Self::order).
    pub fn selected(&self) -> &[usize] {
        &self.order[..self.count]
    }

    /// Number of activated experts.
    pub fn num_selected(&self) -> usize {
        self.count
    }

    /// Gate per expert, zero outside the selected set.
    pub fn gates(&self) -> &[f64] {
        &self.gates
    }

    pub fn gate_mass(&self) -> f64 {
        self.selected().iter().map(|&i| self.gates[i]).sum()
    }

    pub fn is_selected(&self, expert: usize) -> bool {
        self.selected().contains(&expert)
    }

    /// Smallest gap that would have to close before the selected set changes:
    /// the distance between the cumulative prefix sums around the stopping
    /// point and the threshold, and the probability gap at the set boundary.
    pub fn selection_margin(&self, policy: RoutingPolicy) -> f64 {
        let n = self.probs.len();
        let sorted: Vec<f64> = self.order.iter().map(|&i| self.probs[i]).collect();
        let mut margin = f64::INFINITY;
        if self.count < n {
            margin = margin.min(sorted[self.count - 1] - sorted[self.count]);
        }
        if let RoutingPolicy::TopP { threshold } = policy {
            let cum: f64 = sorted[..self.count].iter().sum();
            margin = margin.min(cum - threshold);
            if self.count > 1 {
                margin = margin.min(threshold - (cum - sorted[self.count - 1]));
            }
        }
        margin
    }
}

/// `softmax(W_r·x)` for a single token.
pub fn route_probs<F: Scalar>(x: &[F], params: &RouterParams<F>) -> Result<Vec<F>> {
    let (n, d) = params.weight.dims2()?;
    if x.len() != d {
        return Err(Error::Shape(format!(
            "router expects input of dim {d}, got {}",
            x.len()
        )));
    }
    let mut logits: Vec<F> = (0..n)
        .map(|e| {
            params
                .weight
                .row(e)
                .iter()
                .zip(x)
                .fold(F::zero(), |acc, (&w, &v)| acc + w * v)
        })
        .collect();
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("router logits are not finite".into()));
    }
    softmax_in_place(&mut logits);
    Ok(logits)
}

fn check_probs(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::Shape("empty router distribution".into()));
    }
    if let Some(bad) = p.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::Numeric(format!("invalid probability {bad}")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-5 {
        return Err(Error::Numeric(format!("probabilities sum to {s}")));
    }
    Ok(())
}

/// Indices sorted by descending probability, lower index first on ties.
pub fn descending_order(p: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx
}

pub fn select_top_k(p: &[f64], k: usize) -> Result<RouterDecision> {
    check_probs(p)?;
    if k == 0 || k > p.len() {
        return Err(Error::config(
            "k",
            format!("must lie in 1..={}, got {k}", p.len()),
        ));
    }
    let order = descending_order(p);
    let z: f64 = order[..k].iter().map(|&i| p[i]).sum();
    let mut gates = vec![0.0; p.len()];
    for &i in &order[..k] {
        gates[i] = p[i] / z;
    }
    Ok(RouterDecision {
        probs: p.to_vec(),
        order,
        count: k,
        gates,
    })
}

pub fn select_top_p(p: &[f64], threshold: f64) -> Result<RouterDecision> {
    check_threshold(threshold)?;
    check_probs(p)?;
    let order = descending_order(p);
    let mut cum = 0.0;
    let mut count = order.len();
    for (k, &i) in order.iter().enumerate() {
        cum += p[i];
        if cum >= threshold {
            count = k + 1;
            break;
        }
    }
    let mut gates = vec![0.0; p.len()];
    for &i in &order[..count] {
        gates[i] = p[i];
    }
    Ok(RouterDecision {
        probs: p.to_vec(),
        order,
        count,
        gates,
    })
}

pub fn select(p: &[f64], policy: RoutingPolicy) -> Result<RouterDecision> {
    match policy {
        RoutingPolicy::TopK { k } => select_top_k(p, k),
        RoutingPolicy::TopP { threshold } => select_top_p(p, threshold),
    }
}

/// Receiver for routing decisions, e.g. instrumentation counters.
pub trait DecisionSink {
    fn record(&mut self, decision: &RouterDecision);
}

impl DecisionSink for Vec<RouterDecision> {
    fn record(&mut self, decision: &RouterDecision) {
        self.push(decision.clone());
    }
}

/// Routes a single token, reporting the decision to `sink` when given.
pub fn route<F: Scalar>(
    x: &[F],
    params: &RouterParams<F>,
    policy: RoutingPolicy,
    sink: Option<&mut dyn DecisionSink>,
) -> Result<RouterDecision> {
    policy.validate(params.num_experts())?;
    let probs: Vec<f64> = route_probs(x, params)?.iter().map(|v| v.as_f64()).collect();
    let decision = select(&probs, policy)?;
    if let Some(sink) = sink {
        sink.record(&decision);
    }
    Ok(decision)
}

/// Routes every row of a probability matrix `[T×N]`.
pub fn select_rows<F: Scalar>(
    probs: &Tensor<F>,
    policy: RoutingPolicy,
) -> Result<Vec<RouterDecision>> {
    let (rows, cols) = probs.dims2()?;
    policy.validate(cols)?;
    let mut buf = vec![0.0; cols];
    (0..rows)
        .map(|r| {
            for (b, v) in buf.iter_mut().zip(probs.row(r)) {
                *b = v.as_f64();
            }
            select(&buf, policy)
        })
        .collect()
}
