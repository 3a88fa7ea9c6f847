//! Every differentiable tape op against central finite differences in f64.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use dynmoe::numerics::{Tape, Tensor, Var};
use dynmoe::Error;

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, 1.0).unwrap();
    Tensor::from_fn(shape, |_| n.sample(&mut rng))
}

/// Checks `d/dinputs Σ op(inputs) ⊙ R` for a fixed random `R`.
fn check<Op>(inputs: Vec<Tensor<f64>>, op: Op)
where
    Op: Fn(&mut Tape<'_, f64>, &[Var]) -> Var,
{
    let loss_of = |inputs: &[Tensor<f64>], grads: bool| -> (f64, Vec<Tensor<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = op(&mut tape, &vars);
        let shape = tape.value(out).shape().to_vec();
        let r = tape.constant(randn(&shape, 4242));
        let prod = tape.mul(out, r).unwrap();
        let loss = tape.sum(prod);
        let value = tape.value(loss).item();
        let mut g = Vec::new();
        if grads {
            tape.backward(loss).unwrap();
            g = vars
                .iter()
                .zip(inputs)
                .map(|(&v, t)| {
                    tape.grad(v)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(t.shape()))
                })
                .collect();
        }
        (value, g)
    };
    let (_, analytic) = loss_of(&inputs, true);
    let h = 1e-6;
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= h;
            let numeric = (loss_of(&plus, false).0 - loss_of(&minus, false).0) / (2.0 * h);
            let a = analytic[k].data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(
                err < 1e-5,
                "input {k} coord {i}: analytic {a} numeric {numeric}"
            );
        }
    }
}

#[test]
fn matmul_and_transposed_matmul() {
    check(vec![randn(&[3, 4], 1), randn(&[4, 5], 2)], |t, v| {
        t.matmul(v[0], v[1]).unwrap()
    });
    check(vec![randn(&[3, 4], 3), randn(&[5, 4], 4)], |t, v| {
        t.matmul_t(v[0], v[1]).unwrap()
    });
}

#[test]
fn elementwise_ops() {
    check(vec![randn(&[2, 3], 5), randn(&[2, 3], 6)], |t, v| {
        t.add(v[0], v[1]).unwrap()
    });
    check(vec![randn(&[2, 3], 7), randn(&[2, 3], 8)], |t, v| {
        t.mul(v[0], v[1]).unwrap()
    });
    check(vec![randn(&[2, 3], 9)], |t, v| t.scale(v[0], -1.7));
    check(vec![randn(&[3, 3], 10)], |t, v| t.silu(v[0]));
}

#[test]
fn softmax_and_rmsnorm() {
    check(vec![randn(&[3, 5], 11)], |t, v| t.softmax(v[0]).unwrap());
    check(vec![randn(&[3, 6], 12), randn(&[6], 13)], |t, v| {
        t.rmsnorm(v[0], v[1], 1e-6).unwrap()
    });
}

#[test]
fn gather_scatter_and_scaling() {
    check(vec![randn(&[4, 3], 14)], |t, v| {
        t.gather_rows(v[0], vec![2, 0, 2, 3]).unwrap()
    });
    check(vec![randn(&[2, 3], 15), randn(&[1, 3], 16)], |t, v| {
        t.scatter_rows(vec![(v[0], vec![0, 3]), (v[1], vec![3])], 4, 3)
            .unwrap()
    });
    check(vec![randn(&[3, 4], 17), randn(&[3, 1], 18)], |t, v| {
        t.row_scale(v[0], v[1]).unwrap()
    });
    check(vec![randn(&[3, 4], 19)], |t, v| {
        t.gather_elems(v[0], vec![(0, 1), (2, 3), (0, 1)]).unwrap()
    });
}

#[test]
fn gates_raw_and_renormalized() {
    for normalize in [false, true] {
        check(vec![randn(&[3, 4], 20)], move |t, v| {
            let p = t.softmax(v[0]).unwrap();
            t.gates(p, vec![vec![1], vec![0, 3], vec![2, 1, 0]], normalize)
                .unwrap()
        });
    }
}

#[test]
fn rope_and_attention() {
    check(vec![randn(&[6, 8], 21)], |t, v| t.rope(v[0], 3, 2).unwrap());
    check(
        vec![randn(&[6, 8], 22), randn(&[6, 8], 23), randn(&[6, 8], 24)],
        |t, v| t.causal_attention(v[0], v[1], v[2], 2, 3, 2).unwrap(),
    );
}

#[test]
fn scalar_losses() {
    check(vec![randn(&[4, 6], 25)], |t, v| {
        t.cross_entropy(v[0], &[5, 0, 2, 2]).unwrap()
    });
    check(vec![randn(&[3, 5], 26)], |t, v| {
        let p = t.softmax(v[0]).unwrap();
        t.entropy(p).unwrap()
    });
    check(vec![randn(&[3, 4], 27)], |t, v| {
        t.col_mean_dot(v[0], vec![0.5, -1.0, 2.0, 0.0]).unwrap()
    });
    check(vec![randn(&[2, 2], 28)], |t, v| t.sum(v[0]));
}

#[test]
fn repeated_backward_accumulates() {
    let mut tape = Tape::new();
    let x = tape.leaf(randn(&[2, 3], 29));
    let y = tape.silu(x);
    let loss = tape.sum(y);
    tape.backward(loss).unwrap();
    let once = tape.grad(x).unwrap().clone();
    tape.backward(loss).unwrap();
    let twice = tape.grad(x).unwrap();
    for (a, b) in once.data().iter().zip(twice.data()) {
        assert_eq!(2.0 * a, *b);
    }
    tape.zero_grads();
    assert!(tape.grad(x).is_none());
}

#[test]
fn constants_get_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(randn(&[2, 2], 30));
    let c = tape.constant(randn(&[2, 2], 31));
    let y = tape.mul(x, c).unwrap();
    let loss = tape.sum(y);
    tape.backward(loss).unwrap();
    assert!(tape.grad(c).is_none());
    assert_eq!(tape.grad(x).unwrap(), tape.value(c));
}

#[test]
fn numeric_failures_are_errors() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_rows(&[&[1.0, f64::NAN]]).unwrap());
    assert!(matches!(tape.softmax(x), Err(Error::Numeric(_))));
    assert!(matches!(
        tape.cross_entropy(x, &[0]),
        Err(Error::Numeric(_))
    ));
    let ok = tape.leaf(Tensor::from_rows(&[&[1.0, 2.0]]).unwrap());
    assert!(matches!(
        tape.cross_entropy(ok, &[2]),
        Err(Error::Contract(_))
    ));
    let m = tape.leaf(randn(&[2, 2], 32));
    assert!(matches!(tape.backward(m), Err(Error::Contract(_))));
}
