use std::fmt;
use std::str::FromStr;

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    /// Heavy-ball momentum: `v ← μv + g; p ← p − lr·(v + λp)`.
    #[default]
    Sgd,
    /// Adam with decoupled weight decay.
    AdamW,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adamw" => Ok(Self::AdamW),
            _ => Err(Error::Config(format!("unknown optimizer `{s}` (expected sgd or adamw)"))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sgd => "sgd",
            Self::AdamW => "adamw",
        })
    }
}

/// First-order optimiser with per-parameter state.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    momentum: f64,
    weight_decay: f64,
    steps: u64,
    first: Vec<Option<Vec<T>>>,
    second: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, momentum: f64, weight_decay: f64) -> Self {
        Self {
            kind,
            momentum,
            weight_decay,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn sgd(momentum: f64, weight_decay: f64) -> Self {
        Self::new(OptimizerKind::Sgd, momentum, weight_decay)
    }

    /// Applies one update to every non-frozen parameter and zeroes all
    /// gradients. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if let Some((_, p)) = store.iter().find(|(_, p)| !p.frozen && !p.grad.is_finite()) {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
        self.steps += 1;
        self.first.resize(store.len(), None);
        self.second.resize(store.len(), None);
        let lr_t = T::from_f64_lossy(lr);
        let wd = T::from_f64_lossy(self.weight_decay);
        let mu = T::from_f64_lossy(self.momentum);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            if p.frozen {
                continue;
            }
            let n = p.value.len();
            match self.kind {
                OptimizerKind::Sgd => {
                    let v = self.first[id.0].get_or_insert_with(|| vec![T::zero(); n]);
                    let grad = p.grad.data();
                    for ((w, vel), &g) in p.value.data_mut().iter_mut().zip(v.iter_mut()).zip(grad) {
                        *vel = mu * *vel + g;
                        *w -= lr_t * (*vel + wd * *w);
                    }
                }
                OptimizerKind::AdamW => {
                    let (b1, b2, eps) = (self.momentum, 0.999f64, 1e-8f64);
                    let c1 = T::from_f64_lossy(1.0 - b1.powi(self.steps as i32));
                    let c2 = T::from_f64_lossy(1.0 - b2.powi(self.steps as i32));
                    let (b1, b2, eps) = (T::from_f64_lossy(b1), T::from_f64_lossy(b2), T::from_f64_lossy(eps));
                    let m = self.first[id.0].get_or_insert_with(|| vec![T::zero(); n]);
                    let s = self.second[id.0].get_or_insert_with(|| vec![T::zero(); n]);
                    let grad = p.grad.data().to_vec();
                    for (((w, m), s), g) in p.value.data_mut().iter_mut().zip(m.iter_mut()).zip(s.iter_mut()).zip(grad) {
                        *m = b1 * *m + (T::one() - b1) * g;
                        *s = b2 * *s + (T::one() - b2) * g * g;
                        let update = (*m / c1) / ((*s / c2).sqrt() + eps);
                        *w -= lr_t * (update + wd * *w);
                    }
                }
            }
        }
        store.zero_grads();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(value: f64) -> (ParamStore<f64>, super::super::params::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::scalar(value));
        (s, id)
    }

    #[test]
    fn plain_step() {
        let (mut s, id) = single(1.0);
        s.get_mut(id).grad = Tensor::scalar(1.0);
        Optimizer::sgd(0.0, 0.0).step(&mut s, 0.1).unwrap();
        assert!((s.value(id).data()[0] - 0.9).abs() < 1e-15);
        assert_eq!(s.get(id).grad.data()[0], 0.0);
    }

    #[test]
    fn decoupled_weight_decay() {
        let (mut s, id) = single(1.0);
        Optimizer::sgd(0.0, 0.5).step(&mut s, 0.1).unwrap();
        assert!((s.value(id).data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn momentum_two_steps() {
        let (mut s, id) = single(0.0);
        let mut opt = Optimizer::sgd(0.9, 0.0);
        for _ in 0..2 {
            s.get_mut(id).grad = Tensor::scalar(1.0);
            opt.step(&mut s, 0.1).unwrap();
        }
        assert!((s.value(id).data()[0] + 0.29).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let (mut s, id) = single(1.0);
        s.get_mut(id).grad = Tensor::scalar(f64::NAN);
        let err = Optimizer::sgd(0.9, 0.0).step(&mut s, 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "p"));
        assert_eq!(s.value(id).data()[0], 1.0);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let (mut s, id) = single(1.0);
        s.get_mut(id).frozen = true;
        s.get_mut(id).grad = Tensor::scalar(1.0);
        Optimizer::sgd(0.9, 0.1).step(&mut s, 0.1).unwrap();
        assert_eq!(s.value(id).data()[0], 1.0);
    }

    #[test]
    fn adamw_moves_against_gradient() {
        let (mut s, id) = single(1.0);
        s.get_mut(id).grad = Tensor::scalar(2.0);
        Optimizer::new(OptimizerKind::AdamW, 0.9, 0.0).step(&mut s, 0.01).unwrap();
        assert!((s.value(id).data()[0] - 0.99).abs() < 1e-6);
    }
}
