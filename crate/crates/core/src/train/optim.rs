//! AdamW with decoupled weight decay, cosine learning-rate schedule and
//! global-norm gradient clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::params::Module;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Optimizer moments keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            ..Default::default()
        }
    }

    /// Advances the shared step counter; call once per optimisation step
    /// before the [`AdamW::update`] calls for that step.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Updates every parameter of `module` that has an entry in `grads`.
    /// Parameters without one are left untouched. Fails before touching any
    /// value if a gradient is non-finite.
    pub fn update<M: Module>(&mut self, module: &mut M, prefix: &str, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        if self.step == 0 {
            return Err(Error::config("optimizer", "update called before begin_step"));
        }
        let mut names = Vec::new();
        module.clone().visit_mut(prefix, &mut |name, _| names.push(name));
        for name in &names {
            if let Some(g) = grads.get(name) {
                if !g.is_finite() {
                    return Err(Error::NonFiniteGradient { name: name.clone() });
                }
            }
        }
        let c = self.cfg.clone();
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
        let mut failure = None;
        module.visit_mut(prefix, &mut |name, p| {
            let Some(g) = grads.get(&name) else { return };
            if g.shape() != p.shape() {
                failure.get_or_insert(Error::shape("adamw_step", g.shape(), p.shape()));
                return;
            }
            let n = g.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name).or_insert_with(|| vec![0.0; n]);
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let gi = g.data()[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *w -= lr * c.weight_decay * *w;
                *w -= lr * mhat / (vhat.sqrt() + c.eps);
            }
        });
        failure.map_or(Ok(()), Err)
    }
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::config("total_steps", "must be >= 1"));
    }
    if step > total {
        return Err(Error::config("step", format!("{step} exceeds total {total}")));
    }
    if 2 * step == total {
        return Ok((lr_max + lr_min) / 2.0);
    }
    let frac = step as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos()))
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|t| t.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for t in grads.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{join, Param};

    #[derive(Clone)]
    struct One(Param);

    impl Module for One {
        fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
            f(join(prefix, "w"), &mut self.0);
        }
    }

    fn grads(v: Vec<f64>) -> BTreeMap<String, Tensor> {
        let n = v.len();
        BTreeMap::from([("w".to_string(), Tensor::new(vec![n], v).unwrap())])
    }

    #[test]
    fn zero_gradient_without_decay_is_a_noop() {
        let init = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut m = One(Param::new(init.clone()));
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
        for _ in 0..10 {
            opt.begin_step();
            opt.update(&mut m, "", &grads(vec![0.0; 3]), 1e-2).unwrap();
        }
        assert_eq!(m.0.value, init);
    }

    #[test]
    fn constant_gradient_steps_approach_lr_sign() {
        let mut m = One(Param::new(Tensor::zeros(&[2])));
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
        let lr = 1e-3;
        let mut prev = m.0.value.clone();
        for step in 0..1000 {
            opt.begin_step();
            opt.update(&mut m, "", &grads(vec![0.3, -2.0]), lr).unwrap();
            let delta: Vec<f64> = m.0.value.data().iter().zip(prev.data()).map(|(a, b)| a - b).collect();
            if step == 999 {
                assert!((delta[0] + lr).abs() < 1e-9 * 1e3 * lr);
                assert!((delta[1] - lr).abs() < 1e-9 * 1e3 * lr);
            }
            prev = m.0.value.clone();
        }
    }

    #[test]
    fn decoupled_decay_shrinks_multiplicatively() {
        let mut m = One(Param::new(Tensor::new(vec![2], vec![2.0, -1.0]).unwrap()));
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.1, ..Default::default() });
        let lr = 0.05;
        let mut expected = vec![2.0, -1.0];
        for _ in 0..20 {
            opt.begin_step();
            opt.update(&mut m, "", &grads(vec![0.0, 0.0]), lr).unwrap();
            expected.iter_mut().for_each(|w| *w -= lr * 0.1 * *w);
        }
        assert_eq!(m.0.value.data(), expected.as_slice());
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut m = One(Param::new(Tensor::zeros(&[2])));
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.begin_step();
        let err = opt.update(&mut m, "model", &BTreeMap::from([("model.w".to_string(), Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap())]), 1e-3);
        assert!(matches!(err, Err(Error::NonFiniteGradient { ref name }) if name == "model.w"));
        assert_eq!(m.0.value, Tensor::zeros(&[2]));
    }

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 100, 1e-3, 1e-5).unwrap(), 1e-3);
        assert_eq!(cosine_lr(100, 100, 1e-3, 1e-5).unwrap(), 1e-5);
        assert_eq!(cosine_lr(50, 100, 1e-3, 1e-5).unwrap(), (1e-3 + 1e-5) / 2.0);
        assert!(cosine_lr(0, 0, 1e-3, 0.0).is_err());
        let a = cosine_lr(30, 100, 1.0, 0.0).unwrap();
        let b = cosine_lr(31, 100, 1.0, 0.0).unwrap();
        assert!(b < a);
    }

    #[test]
    fn clipping_caps_the_joint_norm() {
        let mut g = BTreeMap::from([
            ("a".to_string(), Tensor::new(vec![2], vec![3.0, 0.0]).unwrap()),
            ("b".to_string(), Tensor::new(vec![1], vec![4.0]).unwrap()),
        ]);
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        let norm: f64 = g.values().flat_map(|t| t.data()).map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert_eq!(clip_global_norm(&mut g, 10.0), norm);
    }
}
