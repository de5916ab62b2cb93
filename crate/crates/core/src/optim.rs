//! Decoupled-weight-decay Adam keyed by parameter name.

use alloc::collections::BTreeMap;
use alloc::string::String;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::nets::{Module, ParamGrads};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments<F> {
    m: Tensor<F>,
    v: Tensor<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<F> {
    pub config: AdamConfig,
    steps: u64,
    state: BTreeMap<String, Moments<F>>,
}

impl<F: Real> AdamW<F> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            steps: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Updates every parameter of `module` that has an entry in `grads`;
    /// returns how many tensors changed.
    pub fn step<M: Module<F> + ?Sized>(
        &mut self,
        module: &mut M,
        grads: &ParamGrads<F>,
        lr: f64,
    ) -> usize {
        self.steps += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - c.beta2.powi(self.steps as i32);
        let (b1, b2) = (F::c(c.beta1), F::c(c.beta2));
        let (ob1, ob2) = (F::one() - b1, F::one() - b2);
        let step_size = F::c(lr / bc1);
        let inv_bc2 = F::c(1.0 / bc2);
        let eps = F::c(c.eps);
        let decay = F::c(1.0 - lr * c.weight_decay);
        let state = &mut self.state;
        let mut updated = 0;
        module.visit_mut(&mut |name, _, p| {
            let Some(g) = grads.get(name) else { return };
            assert_eq!(g.shape(), p.shape(), "gradient shape for {name}");
            let mom = state.entry(String::from(name)).or_insert_with(|| Moments {
                m: Tensor::zeros(p.shape()),
                v: Tensor::zeros(p.shape()),
            });
            let (m, v) = (mom.m.data_mut(), mom.v.data_mut());
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + ob1 * gi;
                v[i] = b2 * v[i] + ob2 * gi * gi;
                *w = *w * decay - step_size * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
            }
            updated += 1;
        });
        updated
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{Linear, ParamKind};
    use crate::rng::seeded;

    struct One(Linear<f64>);

    impl Module<f64> for One {
        fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, &Tensor<f64>)) {
            self.0.visit("m", f)
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<f64>)) {
            self.0.visit_mut("m", f)
        }
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut m = One(Linear::new("l", 2, 1, &mut seeded(0)));
        let before = m.0.weight.clone();
        let mut g = ParamGrads::default();
        g.map.insert(
            "m.l.weight".into(),
            Tensor::from_vec(&[1, 2], alloc::vec![0.3, -2.0]).unwrap(),
        );
        let mut opt = AdamW::new(AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        assert_eq!(opt.step(&mut m, &g, 0.1), 1);
        let d = m.0.weight.sub(&before).unwrap();
        assert!((d.data()[0] + 0.1).abs() < 1e-6);
        assert!((d.data()[1] - 0.1).abs() < 1e-6);
        assert_eq!(m.0.bias.data(), &[0.0]);
    }

    #[test]
    fn decay_without_gradient_signal() {
        let mut m = One(Linear::new("l", 2, 1, &mut seeded(0)));
        let before = m.0.weight.clone();
        let mut g = ParamGrads::default();
        g.map.insert("m.l.weight".into(), Tensor::zeros(&[1, 2]));
        let mut opt = AdamW::new(AdamConfig {
            weight_decay: 0.5,
            ..Default::default()
        });
        opt.step(&mut m, &g, 0.1);
        for (a, b) in m.0.weight.data().iter().zip(before.data()) {
            assert!((a - b * 0.95).abs() < 1e-12);
        }
    }

    #[test]
    fn minimises_quadratic() {
        let mut m = One(Linear::new("l", 3, 1, &mut seeded(1)));
        let mut opt = AdamW::new(AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        for _ in 0..2000 {
            let mut g = ParamGrads::default();
            g.map
                .insert("m.l.weight".into(), m.0.weight.map(|w| 2.0 * (w - 1.0)));
            opt.step(&mut m, &g, 0.01);
        }
        assert!(m.0.weight.data().iter().all(|w| (w - 1.0).abs() < 1e-3));
    }
}
