//! Training objectives: next-token loss plus the two routing regularizers.
//!
//! * dynamic loss: mean entropy of the router distribution, pushing each
//!   token to concentrate on few experts;
//! * balance loss: `N · Σ_i f_i · Q_i` with `f_i` the fraction of tokens
//!   dispatched to expert `i` and `Q_i` its mean router probability.
//!
//! Both are computed per MoE layer and averaged over layers before being
//! weighted into the total `lm + α·balance + β·dynamic`.

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};
use crate::router::RouterDecision;

/// Loss weights used by the full-scale runs.
pub const DEFAULT_ALPHA: f64 = 1e-2;
pub const DEFAULT_BETA: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub loss_lm: f64,
    pub loss_balance: f64,
    pub loss_dynamic: f64,
    pub loss_total: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl LossBreakdown {
    pub fn all_finite(&self) -> bool {
        [
            self.loss_lm,
            self.loss_balance,
            self.loss_dynamic,
            self.loss_total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Mean router entropy over the rows of `probs: [M×N]`.
pub fn dynamic_loss<F: Scalar>(tape: &mut Tape<'_, F>, probs: Var) -> Result<Var> {
    tape.entropy(probs)
}

/// Fraction of tokens whose selected set contains each expert.
pub fn dispatch_fractions(decisions: &[RouterDecision], experts: usize) -> Result<Vec<f64>> {
    if decisions.is_empty() {
        return Err(Error::Contract(
            "balance loss needs at least one token".into(),
        ));
    }
    let mut f = vec![0.0; experts];
    for d in decisions {
        for &e in d.selected() {
            if e >= experts {
                return Err(Error::Shape(format!("expert {e} out of {experts}")));
            }
            f[e] += 1.0;
        }
    }
    let m = decisions.len() as f64;
    for v in &mut f {
        *v /= m;
    }
    Ok(f)
}

/// `N · Σ_i f_i · Q_i`; `f` is treated as a constant, gradients flow via `Q`.
pub fn balance_loss<F: Scalar>(
    tape: &mut Tape<'_, F>,
    probs: Var,
    decisions: &[RouterDecision],
) -> Result<Var> {
    let (rows, experts) = tape.value(probs).dims2()?;
    if rows != decisions.len() {
        return Err(Error::Shape(format!(
            "{} decisions for {rows} router rows",
            decisions.len()
        )));
    }
    let f = dispatch_fractions(decisions, experts)?;
    let n = experts as f64;
    let weights = f.iter().map(|&fi| F::from_f64(n * fi)).collect();
    tape.col_mean_dot(probs, weights)
}

/// Router outputs of one MoE layer, as needed by the auxiliary losses.
pub struct LayerRouting<'d> {
    pub probs: Var,
    pub decisions: &'d [RouterDecision],
}

/// Assembles `lm + α·mean_l(balance_l) + β·mean_l(dynamic_l)` on the tape.
pub fn combine<F: Scalar>(
    tape: &mut Tape<'_, F>,
    loss_lm: Var,
    layers: &[LayerRouting<'_>],
    weights: LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let mut balance = None;
    let mut dynamic = None;
    for layer in layers {
        let b = balance_loss(tape, layer.probs, layer.decisions)?;
        let d = dynamic_loss(tape, layer.probs)?;
        balance = Some(match balance {
            Some(acc) => tape.add(acc, b)?,
            None => b,
        });
        dynamic = Some(match dynamic {
            Some(acc) => tape.add(acc, d)?,
            None => d,
        });
    }
    let mut total = loss_lm;
    let (mut b_val, mut d_val) = (0.0, 0.0);
    if let (Some(b), Some(d)) = (balance, dynamic) {
        let inv = 1.0 / layers.len() as f64;
        let b = tape.scale(b, inv);
        let d = tape.scale(d, inv);
        b_val = tape.value(b).item().as_f64();
        d_val = tape.value(d).item().as_f64();
        let wb = tape.scale(b, weights.alpha);
        let wd = tape.scale(d, weights.beta);
        total = tape.add(total, wb)?;
        total = tape.add(total, wd)?;
    }
    let breakdown = LossBreakdown {
        loss_lm: tape.value(loss_lm).item().as_f64(),
        loss_balance: b_val,
        loss_dynamic: d_val,
        loss_total: tape.value(total).item().as_f64(),
        alpha: weights.alpha,
        beta: weights.beta,
    };
    if !breakdown.all_finite() {
        return Err(Error::Numeric(format!("non-finite loss: {breakdown:?}")));
    }
    Ok((total, breakdown))
}

/// Weighted total from already-averaged components.
pub fn combine_values(
    loss_lm: f64,
    loss_balance: f64,
    loss_dynamic: f64,
    weights: LossWeights,
) -> f64 {
    loss_lm + weights.alpha * loss_balance + weights.beta * loss_dynamic
}

/// Dynamic loss of a probability matrix, outside any training graph.
pub fn dynamic_loss_value(probs: &Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(probs.clone());
    let l = dynamic_loss(&mut tape, p)?;
    Ok(tape.value(l).item())
}

/// Balance loss of a probability matrix and its routing decisions.
pub fn balance_loss_value(probs: &Tensor<f64>, decisions: &[RouterDecision]) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(probs.clone());
    let l = balance_loss(&mut tape, p, decisions)?;
    Ok(tape.value(l).item())
}
