//! Optimizers and the cosine learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{invalid, shape, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// `lr_min + ½(lr0 − lr_min)(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64, lr_min: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(invalid("cosine schedule needs total_steps > 0"));
    }
    if step > total_steps {
        return Err(invalid(format!("step {step} beyond schedule length {total_steps}")));
    }
    if step == total_steps {
        return Ok(lr_min);
    }
    let t = step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * t).cos()))
}

fn is_bias(name: &str) -> bool {
    name.ends_with(".b")
}

fn check<T: Scalar>(store: &ParamStore<T>, name: &str, g: &Tensor<T>) -> Result<()> {
    let p = store.require(name)?;
    if p.shape() != g.shape() {
        return Err(shape(format!("gradient for {name} is {:?}, parameter is {:?}", g.shape(), p.shape())));
    }
    g.ensure_finite(&format!("gradient of {name}"))
}

/// Adam with decoupled weight decay on non-bias tensors.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(weight_decay: f64) -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Update every parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            check(store, name, g)?;
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (T::c(self.beta1), T::c(self.beta2));
        let (one, eps) = (T::one(), T::c(self.eps));
        let (s1, s2) = (T::c(1.0 / bc1), T::c(1.0 / bc2));
        let lr_t = T::c(lr);
        for (name, g) in grads {
            let decay = if is_bias(name) { T::zero() } else { T::c(lr * self.weight_decay) };
            let p = store.get_mut(name).expect("checked above");
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let upd = (*mi * s1) / ((*vi * s2).sqrt() + eps);
                *w = *w - decay * *w - lr_t * upd;
            }
        }
        Ok(())
    }
}

/// SGD with heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    buf: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd { momentum, weight_decay, buf: BTreeMap::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            check(store, name, g)?;
        }
        let mu = T::c(self.momentum);
        let lr_t = T::c(lr);
        for (name, g) in grads {
            let wd = if is_bias(name) { T::zero() } else { T::c(self.weight_decay) };
            let p = store.get_mut(name).expect("checked above");
            let b = self.buf.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            for ((w, &gi), bi) in p.data_mut().iter_mut().zip(g.data()).zip(b.iter_mut()) {
                let d = gi + wd * *w;
                *bi = mu * *bi + d;
                *w -= lr_t * *bi;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 1e-4, 1e-6).unwrap(), 1e-4);
        assert_eq!(cosine_lr(100, 100, 1e-4, 1e-6).unwrap(), 1e-6);
        assert!((cosine_lr(50, 100, 1e-4, 1e-6).unwrap() - (1e-4 + 1e-6) / 2.0).abs() < 1e-18);
        assert!(cosine_lr(0, 0, 1.0, 0.0).is_err());
    }

    #[test]
    fn adamw_first_step_is_sign_sized() {
        let mut s = ParamStore::<f64>::new();
        s.insert("w", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        s.insert("w.b", Tensor::new(vec![1], vec![1.0]).unwrap());
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::new(vec![2], vec![0.3, -5.0]).unwrap());
        g.insert("w.b".to_string(), Tensor::new(vec![1], vec![2.0]).unwrap());
        let mut opt = AdamW::new(0.1);
        opt.step(&mut s, &g, 0.01).unwrap();
        let w = s.get("w").unwrap().data();
        assert!((w[0] - (1.0 - 0.001 - 0.01)).abs() < 1e-9);
        assert!((w[1] - (-1.0 + 0.001 + 0.01)).abs() < 1e-9);
        // no decay on biases
        assert!((s.get("w.b").unwrap().data()[0] - 0.99).abs() < 1e-9);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut s = ParamStore::<f64>::new();
        s.insert("w", Tensor::scalar(0.0));
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::scalar(1.0));
        let mut opt = Sgd::new(0.9, 0.0);
        opt.step(&mut s, &g, 0.1).unwrap();
        opt.step(&mut s, &g, 0.1).unwrap();
        assert!((s.get("w").unwrap().item() + 0.29).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_gradients() {
        let mut s = ParamStore::<f64>::new();
        s.insert("w", Tensor::zeros(&[2]));
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::new(vec![2], vec![f64::NAN, 0.0]).unwrap());
        assert!(AdamW::new(0.0).step(&mut s, &g, 0.1).is_err());
        g.insert("w".to_string(), Tensor::zeros(&[3]));
        assert!(Sgd::new(0.0, 0.0).step(&mut s, &g, 0.1).is_err());
    }
}
