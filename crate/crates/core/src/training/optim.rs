use std::collections::BTreeMap;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::params::ParameterRegistry;
use crate::tensor::Tensor;

/// Adam with decoupled weight decay, touching only trainable entries.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn from_config(cfg: &RunConfig) -> Self {
        Self::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, reg: &mut ParameterRegistry, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, grad) in grads {
            if !grad.all_finite() {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
            let p = reg.trainable_mut(name)?;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = grad.data()[i];
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= self.lr * self.weight_decay * pd[i];
                pd[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Owner;

    fn reg() -> ParameterRegistry {
        let mut r = ParameterRegistry::new();
        r.register("w", Owner::Mcfm, Tensor::new(&[2], vec![1.0, -2.0]).unwrap())
            .unwrap();
        r.register("frozen", Owner::ImageEncoder, Tensor::ones(&[1])).unwrap();
        r
    }

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut r = reg();
        let mut opt = AdamW::new(0.1, 0.9, 0.999, 1e-8, 0.0);
        let grads = BTreeMap::from([("w".to_string(), Tensor::new(&[2], vec![3.0, -0.5]).unwrap())]);
        opt.step(&mut r, &grads).unwrap();
        let w = r.tensor("w").unwrap().data().to_vec();
        assert!((w[0] - 0.9).abs() < 1e-7);
        assert!((w[1] + 1.9).abs() < 1e-7);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut r = reg();
        let mut opt = AdamW::new(0.1, 0.9, 0.999, 1e-8, 0.5);
        let grads = BTreeMap::from([("w".to_string(), Tensor::zeros(&[2]))]);
        opt.step(&mut r, &grads).unwrap();
        let w = r.tensor("w").unwrap().data();
        assert!((w[0] - 0.95).abs() < 1e-15 && (w[1] + 1.9).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_is_a_bitwise_no_op_and_frozen_is_refused() {
        let mut r = reg();
        let before = r.snapshot();
        let mut opt = AdamW::new(0.0, 0.9, 0.999, 1e-8, 1e-2);
        let grads = BTreeMap::from([("w".to_string(), Tensor::new(&[2], vec![1.0, 1.0]).unwrap())]);
        opt.step(&mut r, &grads).unwrap();
        assert_eq!(r.snapshot(), before);
        let frozen = BTreeMap::from([("frozen".to_string(), Tensor::ones(&[1]))]);
        assert!(opt.step(&mut r, &frozen).is_err());
    }
}
