use std::fmt;
use std::str::FromStr;

use crate::diffcore::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
    Sgd { lr: f64, momentum: f64 },
}

/// First-order optimizer state for every parameter of a store, in store
/// order.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        let second = match kind {
            OptimizerKind::Adam { .. } => zeros.clone(),
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        Optimizer {
            kind,
            step: 0,
            first: zeros,
            second,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients held in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        match self.kind {
            OptimizerKind::Adam { lr, beta1, beta2, eps } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for ((p, m), v) in store.iter_mut().zip(&mut self.first).zip(&mut self.second) {
                    let grad = p.grad.data().to_vec();
                    for (((theta, g), m), v) in p.value.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        *theta -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
            OptimizerKind::Sgd { lr, momentum } => {
                for (p, vel) in store.iter_mut().zip(&mut self.first) {
                    let grad = p.grad.data().to_vec();
                    for ((theta, g), v) in p.value.data_mut().iter_mut().zip(grad).zip(vel.iter_mut()) {
                        *v = momentum * *v - lr * g;
                        *theta += *v;
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ClipKind {
    /// Rescale all gradients together when their global L2 norm exceeds the
    /// threshold.
    #[default]
    Norm,
    /// Clamp each gradient entry to `[−threshold, threshold]`.
    Value,
}

impl fmt::Display for ClipKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClipKind::Norm => "norm",
            ClipKind::Value => "value",
        })
    }
}

impl FromStr for ClipKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "norm" => Ok(ClipKind::Norm),
            "value" => Ok(ClipKind::Value),
            _ => Err(format!("unknown clip kind `{s}` (norm|value)")),
        }
    }
}

/// Clips the gradients in `store` and returns their global norm before
/// clipping.
pub fn clip_gradients(store: &mut ParamStore, kind: ClipKind, threshold: f64) -> f64 {
    let norm = store.grad_global_norm();
    match kind {
        ClipKind::Norm if norm > threshold => {
            let s = threshold / norm;
            for p in store.iter_mut() {
                p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
            }
        }
        ClipKind::Norm => {}
        ClipKind::Value => {
            for p in store.iter_mut() {
                p.grad.data_mut().iter_mut().for_each(|g| *g = g.clamp(-threshold, threshold));
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;

    fn scalar_store(theta: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("theta", Tensor::new(vec![1], vec![theta]).unwrap()).unwrap();
        s
    }

    fn set_grad(s: &mut ParamStore, g: f64) {
        s.iter_mut().next().unwrap().grad = Tensor::new(vec![1], vec![g]).unwrap();
    }

    fn theta(s: &ParamStore) -> f64 {
        s.iter().next().unwrap().1.value.item()
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = scalar_store(0.0);
        let mut opt = Optimizer::new(
            OptimizerKind::Adam {
                lr: 0.001,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            &s,
        );
        set_grad(&mut s, 1.0);
        opt.step(&mut s);
        assert!((theta(&s) + 0.001).abs() < 1e-6);
    }

    #[test]
    fn adam_two_steps_match_hand_computation() {
        // f(θ) = θ², θ₀ = 1, lr 0.1
        let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 0.1);
        let mut s = scalar_store(1.0);
        let mut opt = Optimizer::new(OptimizerKind::Adam { lr, beta1: b1, beta2: b2, eps }, &s);
        let (mut th, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            let g = 2.0 * th;
            set_grad(&mut s, g);
            opt.step(&mut s);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            th -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        assert!((theta(&s) - th).abs() < 1e-9);
        assert!((th - 0.8).abs() < 1e-3);
    }

    #[test]
    fn sgd_momentum_two_steps() {
        // f(θ) = θ², θ₀ = 1, lr 0.1, momentum 0.9:
        // v₁ = −0.2, θ₁ = 0.8; v₂ = 0.9·(−0.2) − 0.1·1.6 = −0.34, θ₂ = 0.46
        let mut s = scalar_store(1.0);
        let mut opt = Optimizer::new(OptimizerKind::Sgd { lr: 0.1, momentum: 0.9 }, &s);
        for _ in 0..2 {
            let g = 2.0 * theta(&s);
            set_grad(&mut s, g);
            opt.step(&mut s);
        }
        assert!((theta(&s) - 0.46).abs() < 1e-9);
    }

    #[test]
    fn norm_clipping_rescales_to_threshold() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::zeros(&[2])).unwrap();
        s.iter_mut().next().unwrap().grad = Tensor::new(vec![2], vec![12.0, 16.0]).unwrap();
        let before = clip_gradients(&mut s, ClipKind::Norm, 10.0);
        assert_eq!(before, 20.0);
        assert!((s.grad_global_norm() - 10.0).abs() < 1e-9);
        clip_gradients(&mut s, ClipKind::Value, 1.0);
        assert_eq!(s.iter().next().unwrap().1.grad.data(), &[1.0, 1.0]);
    }
}
