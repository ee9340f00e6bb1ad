//! AdamW with decoupled weight decay, and EMA shadow weights.

use crate::nn::{Param, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-tensor first/second moments, in parameter visiting order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<F> {
    pub hyper: AdamWHyper,
    pub step: u64,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(hyper: AdamWHyper, params: &[&Param<F>]) -> Self {
        Self {
            hyper,
            step: 0,
            m: params.iter().map(|p| vec![F::zero(); p.len()]).collect(),
            v: params.iter().map(|p| vec![F::zero(); p.len()]).collect(),
        }
    }

    /// One update. `lr_of` picks the learning rate per tensor; `wd` decays only
    /// tensors flagged `decay`, multiplicatively by (1 - lr * wd), before the
    /// adaptive step.
    pub fn step(&mut self, params: &mut [&mut Param<F>], lr_of: impl Fn(&Param<F>) -> f64, wd: f64) {
        assert_eq!(params.len(), self.m.len(), "optimizer/parameter count mismatch");
        self.step += 1;
        let t = self.step as i32;
        let h = self.hyper;
        let bc1 = 1.0 - h.beta1.powi(t);
        let bc2 = 1.0 - h.beta2.powi(t);
        let (b1, b2) = (F::of_f64(h.beta1), F::of_f64(h.beta2));
        let (one_b1, one_b2) = (F::of_f64(1.0 - h.beta1), F::of_f64(1.0 - h.beta2));
        let eps = F::of_f64(h.eps);
        let sqrt_bc2 = F::of_f64(bc2.sqrt());
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let lr = lr_of(p);
            let step_size = F::of_f64(lr / bc1);
            let shrink = F::of_f64(1.0 - lr * wd);
            let decay = p.decay && wd != 0.0;
            for (((w, &g), mi), vi) in p.value.iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                if decay {
                    *w *= shrink;
                }
                *mi = b1 * *mi + one_b1 * g;
                *vi = b2 * *vi + one_b2 * g * g;
                let denom = vi.sqrt() / sqrt_bc2 + eps;
                *w -= step_size * *mi / denom;
            }
        }
    }
}

/// Exponential moving average of parameters (buffers are not averaged).
#[derive(Debug, Clone, PartialEq)]
pub struct Ema<F> {
    pub decay: f64,
    pub shadow: Vec<Vec<F>>,
}

impl<F: Scalar> Ema<F> {
    /// Shadow starts as a copy of the parameters.
    pub fn new(decay: f64, params: &[&Param<F>]) -> Self {
        Self {
            decay,
            shadow: params.iter().map(|p| p.value.clone()).collect(),
        }
    }

    /// shadow <- decay * shadow + (1 - decay) * param
    pub fn update(&mut self, params: &[&Param<F>]) {
        assert_eq!(params.len(), self.shadow.len(), "EMA/parameter count mismatch");
        let d = F::of_f64(self.decay);
        let one_d = F::of_f64(1.0 - self.decay);
        for (s, p) in self.shadow.iter_mut().zip(params) {
            for (sv, &pv) in s.iter_mut().zip(&p.value) {
                *sv = d * *sv + one_d * pv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scalar AdamW written out longhand.
    fn scalar_adamw(x0: f64, steps: usize, lr: f64, wd: f64, grad: impl Fn(f64) -> f64) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
        let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
        for t in 1..=steps {
            let g = grad(x);
            x -= lr * wd * x;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t as i32));
            let v_hat = v / (1.0 - b2.powi(t as i32));
            x -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        x
    }

    #[test]
    fn matches_scalar_oracle_on_quadratic() {
        let grad = |x: f64| 2.0 * (x - 3.0);
        let mut p = Param::<f64>::new("w", &[1], vec![-1.0], true);
        let mut opt = AdamW::new(AdamWHyper::default(), &[&p]);
        for _ in 0..100 {
            p.grad[0] = grad(p.value[0]);
            opt.step(&mut [&mut p], |_| 2e-3, 0.08);
        }
        let oracle = scalar_adamw(-1.0, 100, 2e-3, 0.08, grad);
        assert!((p.value[0] - oracle).abs() < 1e-12, "{} vs {oracle}", p.value[0]);
    }

    #[test]
    fn zero_grad_decay_contracts_exactly() {
        let mut p = Param::<f64>::new("w", &[3], vec![1.0, -2.0, 0.5], true);
        let mut b = Param::<f64>::new("b", &[1], vec![1.0], false);
        let mut opt = AdamW::new(AdamWHyper::default(), &[&p, &b]);
        let (lr, wd) = (0.01, 0.08);
        let before = p.value.clone();
        opt.step(&mut [&mut p, &mut b], |_| lr, wd);
        for (a, b0) in p.value.iter().zip(&before) {
            assert_eq!(*a, b0 * (1.0 - lr * wd));
        }
        assert_eq!(b.value[0], 1.0);
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut p = Param::<f32>::new("w", &[2], vec![0.3, 0.7], true);
        p.grad = vec![1.0, -1.0];
        let mut opt = AdamW::new(AdamWHyper::default(), &[&p]);
        opt.step(&mut [&mut p], |_| 0.0, 0.08);
        assert_eq!(p.value, vec![0.3, 0.7]);
    }

    #[test]
    fn ema_closed_forms() {
        let p = Param::<f64>::new("w", &[1], vec![1.0], true);
        let mut ema = Ema {
            decay: 0.99995,
            shadow: vec![vec![0.0]],
        };
        ema.update(&[&p]);
        assert!((ema.shadow[0][0] - 5e-5).abs() < 1e-15);

        let mut ema0 = Ema {
            decay: 0.0,
            shadow: vec![vec![7.0]],
        };
        ema0.update(&[&p]);
        assert_eq!(ema0.shadow[0][0], 1.0);

        let (s0, pv, d, n) = (-0.4f64, 2.5f64, 0.999f64, 5000);
        let p = Param::<f64>::new("w", &[1], vec![pv], true);
        let mut ema = Ema {
            decay: d,
            shadow: vec![vec![s0]],
        };
        for _ in 0..n {
            ema.update(&[&p]);
        }
        let closed = s0 * d.powi(n) + pv * (1.0 - d.powi(n));
        assert!((ema.shadow[0][0] - closed).abs() < 1e-10);
    }
}
