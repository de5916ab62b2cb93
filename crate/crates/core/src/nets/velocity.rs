//! Time- and class-conditioned velocity predictor over latents.
//!
//! A small residual conv net: one block at full latent resolution, one at
//! half resolution, one more at full resolution after a skip connection.
//! Timestep (sinusoidal, through a 2-layer MLP) and class embeddings are
//! summed and added as a per-channel bias inside every block.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Conv2d, Ctx, Linear, Module, ParamKind, Trainable};
use crate::error::{invalid, shape_check, Result};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VelocityConfig {
    pub latent_channels: usize,
    pub width: usize,
    pub time_dim: usize,
    pub num_classes: usize,
}

impl Default for VelocityConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            width: 32,
            time_dim: 32,
            num_classes: crate::degradation::NUM_CLASSES,
        }
    }
}

/// Conditioning signal: a class id or the distinguished null entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Cond {
    Class(usize),
    Null,
}

impl Cond {
    /// Row in the embedding table; the null entry is the last row.
    pub fn index(self, num_classes: usize) -> usize {
        match self {
            Cond::Class(c) => c,
            Cond::Null => num_classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock<F> {
    pub conv1: Conv2d<F>,
    pub conv2: Conv2d<F>,
}

impl<F: Real> ResBlock<F> {
    fn new<R: Rng + ?Sized>(name: &str, width: usize, rng: &mut R) -> Self {
        Self {
            conv1: Conv2d::new(&format!("{name}.conv1"), width, width, 3, 1, rng),
            conv2: Conv2d::new(&format!("{name}.conv2"), width, width, 3, 1, rng),
        }
    }

    fn forward(&self, ctx: &mut Ctx<'_, F>, prefix: &str, x: Var, emb: Var) -> Var {
        let h = ctx.tape.silu(x);
        let h = self.conv1.forward(ctx, prefix, h);
        let h = ctx.tape.channel_bias(h, emb);
        let h = ctx.tape.silu(h);
        let h = self.conv2.forward(ctx, prefix, h);
        ctx.tape.add(x, h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VelocityNet<F> {
    pub config: VelocityConfig,
    pub prefix: String,
    /// When set the output is `input + net(input)`.
    pub residual: bool,
    pub conv_in: Conv2d<F>,
    pub time1: Linear<F>,
    pub time2: Linear<F>,
    /// `[num_classes + 1, width]`; the last row is the null embedding.
    pub class_table: Tensor<F>,
    pub block_hi: ResBlock<F>,
    pub down: Conv2d<F>,
    pub block_lo: ResBlock<F>,
    pub up: Conv2d<F>,
    pub block_out: ResBlock<F>,
    pub conv_out: Conv2d<F>,
}

/// `[n, dim]` sinusoidal features of integer timesteps.
pub fn timestep_embedding<F: Real>(t: &[usize], dim: usize) -> Tensor<F> {
    let half = (dim / 2).max(1);
    let mut data = Vec::with_capacity(t.len() * dim);
    for &step in t {
        for i in 0..dim {
            let freq = Float::exp(-Float::ln(10_000f64) * (i % half) as f64 / half as f64);
            let arg = step as f64 * freq;
            data.push(F::c(if i < half {
                Float::sin(arg)
            } else {
                Float::cos(arg)
            }));
        }
    }
    Tensor::from_vec(&[t.len(), dim], data).expect("embedding shape")
}

impl<F: Real> VelocityNet<F> {
    pub fn new<R: Rng + ?Sized>(config: VelocityConfig, rng: &mut R) -> Self {
        let (c, w) = (config.latent_channels, config.width);
        Self {
            prefix: "vel".into(),
            residual: false,
            conv_in: Conv2d::new("conv_in", c, w, 3, 1, rng),
            time1: Linear::new("time1", config.time_dim, w, rng),
            time2: Linear::new("time2", w, w, rng),
            class_table: Tensor::randn(&[config.num_classes + 1, w], 0.5, rng),
            block_hi: ResBlock::new("block_hi", w, rng),
            down: Conv2d::new("down", w, w, 3, 2, rng),
            block_lo: ResBlock::new("block_lo", w, rng),
            up: Conv2d::new("up", w, w, 3, 1, rng),
            block_out: ResBlock::new("block_out", w, rng),
            conv_out: Conv2d::new("conv_out", w, c, 3, 1, rng),
            config,
        }
    }

    fn convs(&self) -> [&Conv2d<F>; 10] {
        [
            &self.conv_in,
            &self.block_hi.conv1,
            &self.block_hi.conv2,
            &self.down,
            &self.block_lo.conv1,
            &self.block_lo.conv2,
            &self.up,
            &self.block_out.conv1,
            &self.block_out.conv2,
            &self.conv_out,
        ]
    }

    fn convs_mut(&mut self) -> [&mut Conv2d<F>; 10] {
        [
            &mut self.conv_in,
            &mut self.block_hi.conv1,
            &mut self.block_hi.conv2,
            &mut self.down,
            &mut self.block_lo.conv1,
            &mut self.block_lo.conv2,
            &mut self.up,
            &mut self.block_out.conv1,
            &mut self.block_out.conv2,
            &mut self.conv_out,
        ]
    }

    /// Attaches a fresh adapter (`B = 0`) to every conv and dense layer.
    pub fn attach_lora<R: Rng + ?Sized>(
        &mut self,
        rank: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<()> {
        self.time1.attach_lora(rank, scale, rng)?;
        self.time2.attach_lora(rank, scale, rng)?;
        for conv in self.convs_mut() {
            conv.attach_lora(rank, scale, rng)?;
        }
        Ok(())
    }

    pub fn strip_lora(&mut self) {
        self.time1.lora = None;
        self.time2.lora = None;
        for conv in self.convs_mut() {
            conv.lora = None;
        }
    }

    pub fn has_adapters(&self) -> bool {
        self.time1.lora.is_some()
    }

    pub fn lora_rank(&self) -> Option<usize> {
        self.time1.lora.as_ref().map(|l| l.rank())
    }

    fn check_inputs(&self, shape: &[usize], t: &[usize], cond: &[Cond]) -> Result<()> {
        if shape.len() != 4
            || shape[1] != self.config.latent_channels
            || !shape[2].is_multiple_of(2)
            || !shape[3].is_multiple_of(2)
        {
            return Err(crate::error::Error::ShapeMismatch {
                expected: alloc::vec![
                    shape.first().copied().unwrap_or(0),
                    self.config.latent_channels,
                    0,
                    0
                ],
                got: shape.to_vec(),
            });
        }
        let n = shape[0];
        if t.len() != n || cond.len() != n {
            return Err(invalid(format!(
                "batch {n} with {} timesteps and {} conditions",
                t.len(),
                cond.len()
            )));
        }
        if let Some(Cond::Class(c)) = cond
            .iter()
            .find(|c| matches!(c, Cond::Class(k) if *k >= self.config.num_classes))
        {
            return Err(invalid(format!("class id {c} out of range")));
        }
        Ok(())
    }

    pub fn forward(&self, ctx: &mut Ctx<'_, F>, z: Var, t: &[usize], cond: &[Cond]) -> Result<Var> {
        self.check_inputs(ctx.tape.value(z).shape(), t, cond)?;
        let p = self.prefix.as_str();
        let temb = ctx
            .tape
            .constant(timestep_embedding(t, self.config.time_dim));
        let e = self.time1.forward(ctx, p, temb);
        let e = ctx.tape.silu(e);
        let e = self.time2.forward(ctx, p, e);
        let table = ctx.bind(
            format!("{p}.class_table"),
            ParamKind::Base,
            &self.class_table,
        );
        let ids: Vec<usize> = cond
            .iter()
            .map(|c| c.index(self.config.num_classes))
            .collect();
        let ce = ctx.tape.embedding(table, &ids);
        let emb = ctx.tape.add(e, ce);

        let h0 = self.conv_in.forward(ctx, p, z);
        let h1 = self.block_hi.forward(ctx, p, h0, emb);
        let d = ctx.tape.silu(h1);
        let d = self.down.forward(ctx, p, d);
        let d = self.block_lo.forward(ctx, p, d, emb);
        let u = ctx.tape.silu(d);
        let u = ctx.tape.upsample2(u);
        let u = self.up.forward(ctx, p, u);
        let h2 = ctx.tape.add(h1, u);
        let h3 = self.block_out.forward(ctx, p, h2, emb);
        let h3 = ctx.tape.silu(h3);
        let out = self.conv_out.forward(ctx, p, h3);
        Ok(if self.residual {
            ctx.tape.add(z, out)
        } else {
            out
        })
    }

    /// Inference-only prediction.
    pub fn predict(&self, z: &Tensor<F>, t: &[usize], cond: &[Cond]) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, Trainable::Nothing);
        let zv = ctx.tape.constant(z.clone());
        let out = self.forward(&mut ctx, zv, t, cond)?;
        Ok(tape.value(out).clone())
    }

    /// Prediction with one shared timestep for the whole batch.
    pub fn predict_at(&self, z: &Tensor<F>, t: usize, cond: &[Cond]) -> Result<Tensor<F>> {
        let ts: Vec<usize> =
            core::iter::repeat_n(t, z.shape().first().copied().unwrap_or(0)).collect();
        self.predict(z, &ts, cond)
    }

    /// Guided prediction `w * cond + (1 - w) * null`, evaluated as one batch.
    ///
    /// Written in this form so `w = 1` and `w = 0` return the two branches
    /// exactly.
    pub fn cfg_predict(
        &self,
        z: &Tensor<F>,
        t: usize,
        cond: &[Cond],
        w_cfg: f64,
    ) -> Result<Tensor<F>> {
        let n = z.shape().first().copied().unwrap_or(0);
        let both = Tensor::concat_outer(&[z, z])?;
        let mut conds: Vec<Cond> = cond.to_vec();
        conds.extend(core::iter::repeat_n(Cond::Null, cond.len()));
        let out = self.predict_at(&both, t, &conds)?;
        let c = out.slice_outer(0, n);
        let u = out.slice_outer(n, n);
        shape_check(c.shape(), u.shape())?;
        let (w, w0) = (F::c(w_cfg), F::c(1.0 - w_cfg));
        c.zip_map(&u, |a, b| w * a + w0 * b)
    }
}

impl<F: Real> Module<F> for VelocityNet<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, &Tensor<F>)) {
        let p = self.prefix.as_str();
        self.time1.visit(p, f);
        self.time2.visit(p, f);
        f(
            &format!("{p}.class_table"),
            ParamKind::Base,
            &self.class_table,
        );
        for conv in self.convs() {
            conv.visit(p, f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<F>)) {
        let p = self.prefix.clone();
        self.time1.visit_mut(&p, f);
        self.time2.visit_mut(&p, f);
        f(
            &format!("{p}.class_table"),
            ParamKind::Base,
            &mut self.class_table,
        );
        for conv in self.convs_mut() {
            conv.visit_mut(&p, f);
        }
    }
}
