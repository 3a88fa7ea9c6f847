//! MoE feed-forward block: `N` SwiGLU experts combined by router gates.
//!
//! Tokens are dispatched per expert (gather, compute, scatter), so only the
//! selected experts are evaluated for a token.

use crate::error::{Error, Result};
use crate::numerics::{swiglu_ffn, ParamBindings, Scalar, Tape, Tensor, Var};
use crate::router::{select_rows, RouterDecision, RouterParams, RoutingPolicy};

/// One SwiGLU expert. Weights are `[out×in]`: gate and up `[I×d]`, down `[d×I]`.
#[derive(Clone, Debug)]
pub struct ExpertParams<F> {
    pub w_gate: Tensor<F>,
    pub w_up: Tensor<F>,
    pub w_down: Tensor<F>,
}

impl<F: Scalar> ExpertParams<F> {
    pub fn dims(&self) -> Result<(usize, usize)> {
        let (inter, d) = self.w_gate.dims2()?;
        if self.w_up.shape() != [inter, d] || self.w_down.shape() != [d, inter] {
            return Err(Error::Shape(format!(
                "expert weights disagree: gate {:?}, up {:?}, down {:?}",
                self.w_gate.shape(),
                self.w_up.shape(),
                self.w_down.shape()
            )));
        }
        Ok((d, inter))
    }

    pub fn num_params(&self) -> usize {
        self.w_gate.numel() + self.w_up.numel() + self.w_down.numel()
    }
}

#[derive(Clone, Debug)]
pub struct ExpertBank<F> {
    experts: Vec<ExpertParams<F>>,
}

impl<F: Scalar> ExpertBank<F> {
    pub fn new(experts: Vec<ExpertParams<F>>) -> Result<Self> {
        let first = experts
            .first()
            .ok_or_else(|| Error::Shape("expert bank needs at least one expert".into()))?
            .dims()?;
        for e in &experts {
            if e.dims()? != first {
                return Err(Error::Shape("experts must share identical shapes".into()));
            }
        }
        Ok(ExpertBank { experts })
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn experts(&self) -> &[ExpertParams<F>] {
        &self.experts
    }

    pub fn experts_mut(&mut self) -> &mut [ExpertParams<F>] {
        &mut self.experts
    }

    /// `(hidden, intermediate)` extents shared by all experts.
    pub fn dims(&self) -> (usize, usize) {
        self.experts[0].dims().expect("validated at construction")
    }
}

pub struct MoeLayerOutput {
    /// Combined expert output, same extent as the input.
    pub output: Var,
    /// Router distribution `[T×N]` on the tape, for the auxiliary losses.
    pub probs: Var,
    pub decisions: Vec<RouterDecision>,
}

/// Routes every row of `x: [T×d]` and sums the gated outputs of the selected
/// experts. Gradients flow through the gate values into the router and
/// through the selected experts only.
pub fn moe_forward<'a, F: Scalar>(
    tape: &mut Tape<'a, F>,
    bindings: &mut ParamBindings,
    x: Var,
    bank: &'a ExpertBank<F>,
    router: &'a RouterParams<F>,
    policy: RoutingPolicy,
) -> Result<MoeLayerOutput> {
    let (tokens, d) = tape.value(x).dims2()?;
    let (bank_d, _) = bank.dims();
    let (n, router_d) = router.weight.dims2()?;
    if bank_d != d || router_d != d || n != bank.len() {
        return Err(Error::Shape(format!(
            "moe: input dim {d}, experts dim {bank_d}, router [{n}x{router_d}] for {} experts",
            bank.len()
        )));
    }
    policy.validate(n)?;

    let w_r = bindings.bind(tape, &router.weight);
    let logits = tape.matmul_t(x, w_r)?;
    let probs = tape.softmax(logits)?;
    let decisions = select_rows(tape.value(probs), policy)?;

    let selected = decisions.iter().map(|d| d.selected().to_vec()).collect();
    let gates = tape.gates(
        probs,
        selected,
        matches!(policy, RoutingPolicy::TopK { .. }),
    )?;

    let mut dispatch: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (j, dec) in decisions.iter().enumerate() {
        for &e in dec.selected() {
            dispatch[e].push(j);
        }
    }

    let mut parts = Vec::new();
    for (e, rows) in dispatch.into_iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let p = &bank.experts[e];
        let (wg, wu, wd) = (
            bindings.bind(tape, &p.w_gate),
            bindings.bind(tape, &p.w_up),
            bindings.bind(tape, &p.w_down),
        );
        let xe = tape.gather_rows(x, rows.clone())?;
        let he = swiglu_ffn(tape, xe, wg, wu, wd)?;
        let ge = tape.gather_elems(gates, rows.iter().map(|&j| (j, e)).collect())?;
        let ye = tape.row_scale(he, ge)?;
        parts.push((ye, rows));
    }
    let output = tape.scatter_rows(parts, tokens, d)?;
    Ok(MoeLayerOutput {
        output,
        probs,
        decisions,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationCounts {
    pub per_token: Vec<usize>,
    pub mean: f64,
}

/// Number of activated experts per token and their mean.
pub fn count_activated(decisions: &[RouterDecision]) -> Result<ActivationCounts> {
    if decisions.is_empty() {
        return Err(Error::Contract("no routing decisions to count".into()));
    }
    let per_token: Vec<usize> = decisions.iter().map(|d| d.num_selected()).collect();
    let mean = per_token.iter().sum::<usize>() as f64 / per_token.len() as f64;
    Ok(ActivationCounts { per_token, mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::router::{select_top_k, select_top_p};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0) * scale)
    }

    fn random_expert(rng: &mut ChaCha8Rng, d: usize, inter: usize) -> ExpertParams<f64> {
        ExpertParams {
            w_gate: random_tensor(rng, &[inter, d], 0.5),
            w_up: random_tensor(rng, &[inter, d], 0.5),
            w_down: random_tensor(rng, &[d, inter], 0.5),
        }
    }

    fn run_single_expert(e: &ExpertParams<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (g, u, dn) = (
            tape.param(&e.w_gate),
            tape.param(&e.w_up),
            tape.param(&e.w_down),
        );
        let y = swiglu_ffn(&mut tape, xv, g, u, dn).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn single_confident_expert_passes_through() {
        // Router puts probability ~1 on expert 2 for every input; top-k with
        // k=1 renormalizes that to a gate of exactly 1.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (d, inter, n) = (4, 6, 3);
        let bank =
            ExpertBank::new((0..n).map(|_| random_expert(&mut rng, d, inter)).collect()).unwrap();
        let mut w = Tensor::zeros(&[n, d]);
        w.data_mut()[2 * d] = 50.0;
        let router = RouterParams::new(w).unwrap();
        let x = Tensor::from_fn(&[5, d], |i| if i % d == 0 { 1.0 } else { 0.1 * i as f64 });
        let mut tape = Tape::new();
        let mut b = ParamBindings::new();
        let xv = tape.constant(x.clone());
        let out = moe_forward(
            &mut tape,
            &mut b,
            xv,
            &bank,
            &router,
            RoutingPolicy::top_k(1).unwrap(),
        )
        .unwrap();
        assert_eq!(
            tape.value(out.output),
            &run_single_expert(&bank.experts()[2], &x)
        );
        assert!(out.decisions.iter().all(|d| d.selected() == [2]));
    }

    #[test]
    fn identical_experts_top_k_equal_single_expert() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = random_expert(&mut rng, 4, 8);
        let bank = ExpertBank::new(vec![e.clone(); 4]).unwrap();
        let router = RouterParams::new(random_tensor(&mut rng, &[4, 4], 1.0)).unwrap();
        let x = random_tensor(&mut rng, &[6, 4], 1.0);
        let mut tape = Tape::new();
        let mut b = ParamBindings::new();
        let xv = tape.constant(x.clone());
        let out = moe_forward(
            &mut tape,
            &mut b,
            xv,
            &bank,
            &router,
            RoutingPolicy::top_k(2).unwrap(),
        )
        .unwrap();
        let want = run_single_expert(&e, &x);
        for (a, b) in tape.value(out.output).data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_experts_top_p_scale_by_gate_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let e = random_expert(&mut rng, 4, 8);
        let bank = ExpertBank::new(vec![e.clone(); 5]).unwrap();
        let router = RouterParams::new(random_tensor(&mut rng, &[5, 4], 1.0)).unwrap();
        let x = random_tensor(&mut rng, &[6, 4], 1.0);
        let mut tape = Tape::new();
        let mut b = ParamBindings::new();
        let xv = tape.constant(x.clone());
        let out = moe_forward(
            &mut tape,
            &mut b,
            xv,
            &bank,
            &router,
            RoutingPolicy::top_p(0.6).unwrap(),
        )
        .unwrap();
        let single = run_single_expert(&e, &x);
        for (j, dec) in out.decisions.iter().enumerate() {
            for c in 0..4 {
                let got = tape.value(out.output).data()[j * 4 + c];
                let want = dec.gate_mass() * single.data()[j * 4 + c];
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unselected_experts_receive_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (d, inter, n) = (4, 5, 6);
        let bank =
            ExpertBank::new((0..n).map(|_| random_expert(&mut rng, d, inter)).collect()).unwrap();
        let router = RouterParams::new(random_tensor(&mut rng, &[n, d], 2.0)).unwrap();
        let x = random_tensor(&mut rng, &[1, d], 1.0);
        let mut tape = Tape::new();
        let mut b = ParamBindings::new();
        let xv = tape.constant(x);
        let out = moe_forward(
            &mut tape,
            &mut b,
            xv,
            &bank,
            &router,
            RoutingPolicy::top_k(2).unwrap(),
        )
        .unwrap();
        let loss = tape.sum(out.output);
        tape.backward(loss).unwrap();
        let sel = out.decisions[0].selected().to_vec();
        for (e, p) in bank.experts().iter().enumerate() {
            let reached = b.get(&p.w_gate).and_then(|v| tape.grad(v));
            if sel.contains(&e) {
                assert!(reached.unwrap().data().iter().any(|&g| g != 0.0));
            } else {
                assert!(reached.is_none_or(|g| g.data().iter().all(|&v| v == 0.0)));
            }
        }
        assert!(tape.grad(b.get(&router.weight).unwrap()).is_some());
    }

    #[test]
    fn count_activated_means() {
        let two = select_top_k(&[0.5, 0.3, 0.2], 2).unwrap();
        let c = count_activated(&[two.clone(), two]).unwrap();
        assert_eq!(c.mean, 2.0);
        let one = select_top_p(&[0.6, 0.3, 0.1], 0.5).unwrap();
        let three = select_top_p(&[0.34, 0.33, 0.33], 0.9).unwrap();
        let c = count_activated(&[one, three]).unwrap();
        assert_eq!(c.per_token, vec![1, 3]);
        assert_eq!(c.mean, 2.0);
        assert!(count_activated(&[]).is_err());
    }

    #[test]
    fn experts_with_mismatched_shapes_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_expert(&mut rng, 4, 6);
        let b = random_expert(&mut rng, 4, 7);
        assert!(ExpertBank::new(vec![a, b]).is_err());
    }
}
