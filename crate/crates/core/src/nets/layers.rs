//! Parameterised layers, low-rank adapters and the binding context that puts
//! parameters on a tape.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::real::Real;
use crate::tape::{ConvSpec, Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Which group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Base,
    Adapter,
}

/// Parameter groups that receive gradient during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    Base,
    Adapters,
    All,
}

impl Trainable {
    pub fn includes(self, kind: ParamKind) -> bool {
        matches!(
            (self, kind),
            (Trainable::All, _)
                | (Trainable::Base, ParamKind::Base)
                | (Trainable::Adapters, ParamKind::Adapter)
        )
    }
}

/// Forward-pass context: the tape plus the list of trainable leaves.
pub struct Ctx<'t, F: Real> {
    pub tape: &'t mut Tape<F>,
    pub trainable: Trainable,
    bound: Vec<(String, Var)>,
}

impl<'t, F: Real> Ctx<'t, F> {
    pub fn new(tape: &'t mut Tape<F>, trainable: Trainable) -> Self {
        Self {
            tape,
            trainable,
            bound: Vec::new(),
        }
    }

    pub fn bind(&mut self, name: String, kind: ParamKind, t: &Tensor<F>) -> Var {
        let rg = self.trainable.includes(kind);
        let v = self.tape.leaf(t.clone(), rg);
        if rg {
            self.bound.push((name, v));
        }
        v
    }

    /// Runs `f` with a different trainability policy.
    pub fn with<R>(&mut self, trainable: Trainable, f: impl FnOnce(&mut Self) -> R) -> R {
        let saved = self.trainable;
        self.trainable = trainable;
        let r = f(self);
        self.trainable = saved;
        r
    }

    /// Per-name gradients, summed over repeated uses of the same parameter.
    pub fn param_grads(&self, grads: &Gradients<F>) -> ParamGrads<F> {
        let mut map: BTreeMap<String, Tensor<F>> = BTreeMap::new();
        for (name, v) in &self.bound {
            let Some(g) = grads.get(*v) else { continue };
            match map.get_mut(name) {
                Some(acc) => acc.axpy(F::one(), g).expect("gradient shape"),
                None => {
                    map.insert(name.clone(), g.clone());
                }
            }
        }
        ParamGrads { map }
    }

    pub fn bound_names(&self) -> impl Iterator<Item = &str> {
        self.bound.iter().map(|(n, _)| n.as_str())
    }
}

/// Gradients keyed by full parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGrads<F> {
    pub map: BTreeMap<String, Tensor<F>>,
}

impl<F: Real> ParamGrads<F> {
    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.map.get(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.map
            .values()
            .map(|g| g.norm_sq().f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let k = F::c(max_norm / norm);
            for g in self.map.values_mut() {
                *g = g.scale(k);
            }
        }
        norm
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|g| g.all_finite())
    }
}

/// Anything that owns named parameters.
pub trait Module<F: Real> {
    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, &Tensor<F>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<F>));

    fn param_count(&self, kind: Option<ParamKind>) -> usize {
        let mut n = 0;
        self.visit(&mut |_, k, t| {
            if kind.is_none_or(|want| want == k) {
                n += t.len();
            }
        });
        n
    }
}

/// Low-rank weight delta `scale * B A`, `A: [rank, fan_in]`, `B: [fan_out, rank]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<F> {
    pub a: Tensor<F>,
    pub b: Tensor<F>,
    pub scale: F,
}

impl<F: Real> LoraAdapter<F> {
    /// `B = 0`, so the adapted layer starts out identical to its base.
    pub fn new<R: Rng + ?Sized>(
        fan_in: usize,
        fan_out: usize,
        rank: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(invalid("LoRA rank must be >= 1"));
        }
        if rank > fan_in {
            return Err(invalid(format!(
                "LoRA rank {rank} exceeds layer fan-in {fan_in}"
            )));
        }
        Ok(Self {
            a: Tensor::randn(&[rank, fan_in], 1.0 / (fan_in as f64).sqrt(), rng),
            b: Tensor::zeros(&[fan_out, rank]),
            scale: F::c(scale),
        })
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }
}

/// Effective `[fan_out, fan_in]` weight, with the adapter delta added when present.
fn effective_weight<F: Real>(
    ctx: &mut Ctx<'_, F>,
    name: &str,
    weight: &Tensor<F>,
    lora: Option<&LoraAdapter<F>>,
    fan_out: usize,
    fan_in: usize,
) -> Var {
    let w = ctx.bind(format!("{name}.weight"), ParamKind::Base, weight);
    let Some(l) = lora else { return w };
    let a = ctx.bind(format!("{name}.lora_a"), ParamKind::Adapter, &l.a);
    let b = ctx.bind(format!("{name}.lora_b"), ParamKind::Adapter, &l.b);
    let delta = ctx.tape.matmul(b, a);
    let delta = ctx.tape.scale(delta, l.scale);
    let w = ctx.tape.reshape(w, &[fan_out, fan_in]);
    ctx.tape.add(w, delta)
}

fn visit_layer<F: Real>(
    name: &str,
    weight: &Tensor<F>,
    bias: &Tensor<F>,
    lora: Option<&LoraAdapter<F>>,
    f: &mut dyn FnMut(&str, ParamKind, &Tensor<F>),
) {
    f(&format!("{name}.weight"), ParamKind::Base, weight);
    f(&format!("{name}.bias"), ParamKind::Base, bias);
    if let Some(l) = lora {
        f(&format!("{name}.lora_a"), ParamKind::Adapter, &l.a);
        f(&format!("{name}.lora_b"), ParamKind::Adapter, &l.b);
    }
}

fn visit_layer_mut<F: Real>(
    name: &str,
    weight: &mut Tensor<F>,
    bias: &mut Tensor<F>,
    lora: Option<&mut LoraAdapter<F>>,
    f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<F>),
) {
    f(&format!("{name}.weight"), ParamKind::Base, weight);
    f(&format!("{name}.bias"), ParamKind::Base, bias);
    if let Some(l) = lora {
        f(&format!("{name}.lora_a"), ParamKind::Adapter, &mut l.a);
        f(&format!("{name}.lora_b"), ParamKind::Adapter, &mut l.b);
    }
}

/// Square-kernel convolution, weight `[out, in, k, k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<F> {
    pub name: String,
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
    pub spec: ConvSpec,
    pub lora: Option<LoraAdapter<F>>,
}

impl<F: Real> Conv2d<F> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        Self {
            name: name.into(),
            weight: Tensor::randn(
                &[cout, cin, kernel, kernel],
                (1.0 / fan_in as f64).sqrt(),
                rng,
            ),
            bias: Tensor::zeros(&[cout]),
            spec: ConvSpec {
                kernel,
                stride,
                pad: kernel / 2,
            },
            lora: None,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.len() / self.fan_out()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, ctx: &mut Ctx<'_, F>, prefix: &str, x: Var) -> Var {
        let name = format!("{prefix}.{}", self.name);
        let w = effective_weight(
            ctx,
            &name,
            &self.weight,
            self.lora.as_ref(),
            self.fan_out(),
            self.fan_in(),
        );
        let b = ctx.bind(format!("{name}.bias"), ParamKind::Base, &self.bias);
        ctx.tape.conv2d(x, w, Some(b), self.spec)
    }

    pub fn attach_lora<R: Rng + ?Sized>(
        &mut self,
        rank: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<()> {
        self.lora = Some(LoraAdapter::new(
            self.fan_in(),
            self.fan_out(),
            rank,
            scale,
            rng,
        )?);
        Ok(())
    }

    pub fn zero(&mut self) {
        self.weight = Tensor::zeros(self.weight.shape());
        self.bias = Tensor::zeros(self.bias.shape());
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<F>)) {
        visit_layer(
            &format!("{prefix}.{}", self.name),
            &self.weight,
            &self.bias,
            self.lora.as_ref(),
            f,
        );
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<F>)) {
        let name = format!("{prefix}.{}", self.name);
        visit_layer_mut(
            &name,
            &mut self.weight,
            &mut self.bias,
            self.lora.as_mut(),
            f,
        );
    }
}

/// Dense layer, weight `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<F> {
    pub name: String,
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
    pub lora: Option<LoraAdapter<F>>,
}

impl<F: Real> Linear<F> {
    pub fn new<R: Rng + ?Sized>(name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            name: name.into(),
            weight: Tensor::randn(&[fan_out, fan_in], (1.0 / fan_in as f64).sqrt(), rng),
            bias: Tensor::zeros(&[fan_out]),
            lora: None,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, ctx: &mut Ctx<'_, F>, prefix: &str, x: Var) -> Var {
        let name = format!("{prefix}.{}", self.name);
        let w = effective_weight(
            ctx,
            &name,
            &self.weight,
            self.lora.as_ref(),
            self.fan_out(),
            self.fan_in(),
        );
        let b = ctx.bind(format!("{name}.bias"), ParamKind::Base, &self.bias);
        ctx.tape.linear(x, w, Some(b))
    }

    pub fn attach_lora<R: Rng + ?Sized>(
        &mut self,
        rank: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<()> {
        self.lora = Some(LoraAdapter::new(
            self.fan_in(),
            self.fan_out(),
            rank,
            scale,
            rng,
        )?);
        Ok(())
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<F>)) {
        visit_layer(
            &format!("{prefix}.{}", self.name),
            &self.weight,
            &self.bias,
            self.lora.as_ref(),
            f,
        );
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<F>)) {
        let name = format!("{prefix}.{}", self.name);
        visit_layer_mut(
            &name,
            &mut self.weight,
            &mut self.bias,
            self.lora.as_mut(),
            f,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn lora_rank_bounds() {
        let mut rng = seeded(0);
        assert!(LoraAdapter::<f64>::new(4, 8, 0, 1.0, &mut rng).is_err());
        assert!(LoraAdapter::<f64>::new(4, 8, 5, 1.0, &mut rng).is_err());
        let l = LoraAdapter::<f64>::new(4, 8, 4, 1.0, &mut rng).unwrap();
        assert_eq!(l.rank(), 4);
        assert!(l.b.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_with_fresh_lora_is_bit_identical() {
        let mut rng = seeded(1);
        let base = Conv2d::<f64>::new("c", 3, 5, 3, 1, &mut rng);
        let mut wrapped = base.clone();
        wrapped.attach_lora(2, 1.0, &mut rng).unwrap();
        let x = Tensor::randn(&[2, 3, 6, 6], 1.0, &mut rng);
        let run = |layer: &Conv2d<f64>| {
            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&mut tape, Trainable::Nothing);
            let xv = ctx.tape.constant(x.clone());
            let y = layer.forward(&mut ctx, "p", xv);
            tape.value(y).clone()
        };
        assert_eq!(run(&base), run(&wrapped));
    }

    #[test]
    fn adapters_only_bind_adapter_grads() {
        let mut rng = seeded(2);
        let mut lin = Linear::<f64>::new("l", 3, 2, &mut rng);
        lin.attach_lora(1, 0.5, &mut rng).unwrap();
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, Trainable::Adapters);
        let x = ctx.tape.constant(Tensor::randn(&[4, 3], 1.0, &mut rng));
        let y = lin.forward(&mut ctx, "m", x);
        let l = ctx.tape.mean(y);
        let g = ctx.tape.backward(l);
        let pg = ctx.param_grads(&g);
        let names: Vec<&str> = pg.map.keys().map(|s| s.as_str()).collect();
        assert_eq!(names, ["m.l.lora_a", "m.l.lora_b"]);
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut pg = ParamGrads::<f64>::default();
        pg.map.insert(
            "a".into(),
            Tensor::from_vec(&[2], alloc::vec![3.0, 4.0]).unwrap(),
        );
        assert_eq!(pg.clip_global_norm(1.0), 5.0);
        assert!((pg.global_norm() - 1.0).abs() < 1e-12);
        assert_eq!(pg.clip_global_norm(2.0), pg.global_norm());
    }
}
