use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// AdamW with bias correction and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<F> {
    pub config: AdamWConfig,
    pub first_moment: Vec<Tensor<F>>,
    pub second_moment: Vec<Tensor<F>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(config: AdamWConfig, shapes: &[&[usize]]) -> Self {
        AdamW {
            config,
            first_moment: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            second_moment: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    /// Applies update number `step + 1`. `decay[i]` selects whether weight
    /// decay applies to parameter `i`.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<F>],
        grads: &[Tensor<F>],
        decay: &[bool],
        lr: f64,
        step: u64,
    ) -> Result<()> {
        if params.len() != grads.len()
            || params.len() != self.first_moment.len()
            || decay.len() != params.len()
        {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, got {} params / {} grads",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient in parameter #{i}"
            )));
        }
        let c = self.config;
        let t = (step + 1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (F::from_f64(c.beta1), F::from_f64(c.beta2));
        let (one_b1, one_b2) = (F::from_f64(1.0 - c.beta1), F::from_f64(1.0 - c.beta2));
        let (bc1, bc2) = (F::from_f64(bc1), F::from_f64(bc2));
        let lr_f = F::from_f64(lr);
        let eps = F::from_f64(c.eps);
        for (i, p) in params.iter_mut().enumerate() {
            if p.shape() != grads[i].shape() {
                return Err(Error::Shape(format!(
                    "gradient {:?} for parameter {:?}",
                    grads[i].shape(),
                    p.shape()
                )));
            }
            let shrink = F::from_f64(if decay[i] {
                1.0 - lr * c.weight_decay
            } else {
                1.0
            });
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(grads[i].data()).zip(m).zip(v) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w = *w * shrink - lr_f * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<F: Scalar>(grads: &mut [Tensor<F>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.sum_sq()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = F::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            g.scale_inplace(s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> Tensor<f64> {
        Tensor::scalar(v)
    }

    #[test]
    fn zero_gradient_without_decay_leaves_params() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::<f64>::new(cfg, &[&[3]]);
        let mut p = Tensor::from_fn(&[3], |i| i as f64 - 1.0);
        let before = p.clone();
        for s in 0..10 {
            opt.step(&mut [&mut p], &[Tensor::zeros(&[3])], &[true], 1e-2, s)
                .unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn constant_gradient_moves_by_learning_rate() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            eps: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::<f64>::new(cfg, &[&[1]]);
        let mut p = one(0.0);
        let lr = 1e-3;
        let mut prev = 0.0;
        for s in 0..500 {
            opt.step(&mut [&mut p], &[one(0.37)], &[true], lr, s)
                .unwrap();
            let delta = prev - p.item();
            assert!((delta - lr).abs() < 1e-12, "step {s}: {delta}");
            prev = p.item();
        }
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut opt = AdamW::<f32>::new(AdamWConfig::default(), &[&[1]]);
        let mut p = Tensor::scalar(1.0f32);
        let r = opt.step(&mut [&mut p], &[Tensor::scalar(f32::NAN)], &[true], 1e-3, 0);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![Tensor::<f64>::full(&[4], 1.0), Tensor::full(&[5], 2.0)];
        let n = clip_global_norm(&mut g, 1.0);
        assert!((n - 24f64.sqrt()).abs() < 1e-12);
        let after: f64 = g.iter().map(|t| t.sum_sq()).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-12);
        let mut small = vec![Tensor::<f64>::full(&[2], 0.1)];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].data(), &[0.1, 0.1]);
    }
}
