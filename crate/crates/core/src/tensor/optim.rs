//! Adam with decoupled weight decay over a shared parameter store. Updates
//! are masked: only elements with a nonzero gradient this step move, so
//! parameters outside every sampled slice stay byte-identical. Moment
//! buffers for untouched elements are left alone as well.

use std::collections::BTreeMap;

use super::{ParamStore, Scalar};
use crate::error::{Error, Result};

/// Optimizer hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct OptimConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { lr0: 3e-4, weight_decay: 3e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Half-cosine learning-rate decay from `lr0` to zero over `total_steps`.
#[derive(Clone, Copy, Debug)]
pub struct CosineSchedule {
    pub lr0: f64,
    pub total_steps: u64,
}

impl CosineSchedule {
    /// Learning rate for step `t` (zero-based). `t = 0` yields `lr0`.
    pub fn lr_at(&self, t: u64) -> f64 {
        if self.total_steps == 0 {
            return self.lr0;
        }
        let frac = (t.min(self.total_steps) as f64) / (self.total_steps as f64);
        self.lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

/// First and second moment estimates, keyed like the parameter store.
#[derive(Clone, Debug, Default)]
pub struct OptimState {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    step: u64,
}

impl OptimState {
    pub fn new() -> Self {
        OptimState::default()
    }

    /// Number of completed steps.
    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update using the accumulated gradients and clear them.
    /// Errors if nothing holds a gradient (a backward pass is missing).
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, lr: f64, cfg: &OptimConfig) -> Result<()> {
        if !store.has_grads() {
            return Err(Error::NoGradient);
        }
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::InvalidArgument(format!("learning rate {lr} is not usable")));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (key, param) in store.iter_mut() {
            let grad = match &param.grad {
                Some(g) => g,
                None => continue,
            };
            let n = param.value.len();
            let m = self.m.entry(key.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(key.clone()).or_insert_with(|| vec![0.0; n]);
            let gd = grad.data();
            let pd = param.value.data_mut();
            for i in 0..n {
                let g = gd[i].to_f64_val();
                if g == 0.0 {
                    continue;
                }
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let p = pd[i].to_f64_val();
                let upd = p - lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * p);
                pd[i] = T::from_f64_val(upd);
            }
            param.grad = None;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn cosine_schedule_endpoints() {
        let s = CosineSchedule { lr0: 3e-4, total_steps: 100 };
        assert!((s.lr_at(0) - 3e-4).abs() < 1e-15);
        assert!((s.lr_at(50) - 1.5e-4).abs() < 1e-12);
        assert!(s.lr_at(100) < 1e-15);
        // Clamps past the end rather than going negative.
        assert!(s.lr_at(1000) >= 0.0);
    }

    #[test]
    fn first_step_matches_hand_computed_adam() {
        // With bias correction the very first update direction is g/|g|
        // (up to eps), scaled by lr, plus decoupled decay.
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::from_vec(&[1], vec![1.0]).unwrap());
        store.accumulate_grad("w", None, &Tensor::from_vec(&[1], vec![0.5]).unwrap()).unwrap();
        let cfg = OptimConfig { lr0: 0.1, weight_decay: 0.01, ..Default::default() };
        let mut opt = OptimState::new();
        opt.step(&mut store, 0.1, &cfg).unwrap();
        let mhat: f64 = 0.5;
        let vhat: f64 = 0.25;
        let expect = 1.0 - 0.1 * (mhat / (vhat.sqrt() + cfg.eps) + 0.01 * 1.0);
        let got = store.value("w").unwrap().data()[0];
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn zero_grad_elements_do_not_move() {
        // Decoupled decay must not creep into masked-out elements.
        let mut store = ParamStore::<f32>::new();
        store.insert("w", Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let g = Tensor::from_vec(&[4], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        store.accumulate_grad("w", None, &g).unwrap();
        let cfg = OptimConfig::default();
        let mut opt = OptimState::new();
        opt.step(&mut store, 1e-3, &cfg).unwrap();
        let w = store.value("w").unwrap().data();
        assert_ne!(w[0], 1.0);
        assert_eq!(w[1].to_bits(), 2.0f32.to_bits());
        assert_eq!(w[2].to_bits(), 3.0f32.to_bits());
        assert_ne!(w[3], 4.0);
    }

    #[test]
    fn step_without_grads_is_an_error() {
        let mut store = ParamStore::<f32>::new();
        store.insert("w", Tensor::zeros(&[2]));
        let mut opt = OptimState::new();
        assert!(matches!(opt.step(&mut store, 1e-3, &OptimConfig::default()), Err(Error::NoGradient)));
    }

    #[test]
    fn grads_are_consumed_by_the_step() {
        let mut store = ParamStore::<f32>::new();
        store.insert("w", Tensor::zeros(&[2]));
        store
            .accumulate_grad("w", None, &Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap())
            .unwrap();
        let mut opt = OptimState::new();
        opt.step(&mut store, 1e-3, &OptimConfig::default()).unwrap();
        assert!(!store.has_grads());
    }
}
