//! Student and replica objectives.
//!
//! Score-distillation terms are returned as gradients with respect to the
//! student latent `z_hat`; the trainer injects them through the surrogate
//! `<stopgrad(g), z_hat>`. Reconstruction and replica losses are ordinary
//! differentiable graphs.

use alloc::format;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_check, Error, Result};
use crate::image::ImageBuffer;
use crate::nets::{AutoEncoder, Cond, Ctx, ParamGrads, Trainable, VelocityNet};
use crate::real::Real;
use crate::scheduler::{add_noise, velocity_target, TimestepSchedule};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default classifier-free guidance weight for teacher and replica scores.
pub const DEFAULT_CFG: f64 = 7.5;

/// Time weighting `w(t)` for score gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    Constant,
    /// `sigma_t^2`.
    SigmaSq,
    /// `sigma_t^2 / (alpha_t^2 + sigma_t^2)`, the inverse signal-to-noise
    /// ratio mapped into `[0, 1]`.
    Snr,
}

/// What the score residuals are built from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreParam {
    /// Raw network outputs.
    #[default]
    Velocity,
    /// Noise predictions `x_t + alpha_t * v`. Differences of these keep
    /// pointing toward the data at low noise once the Jacobian is dropped.
    Epsilon,
}

/// Network output `v` at noisy input `x_t` in the chosen parameterisation.
pub fn score_from_velocity<F: Real>(
    v: &Tensor<F>,
    x_t: &Tensor<F>,
    t: usize,
    sched: &TimestepSchedule,
    param: ScoreParam,
) -> Result<Tensor<F>> {
    match param {
        ScoreParam::Velocity => Ok(v.clone()),
        ScoreParam::Epsilon => {
            shape_check(v.shape(), x_t.shape())?;
            let a = F::c(sched.alpha(t));
            let data = x_t
                .data()
                .iter()
                .zip(v.data())
                .map(|(&x, &v)| x + a * v)
                .collect();
            Ok(Tensor::from_vec(v.shape(), data)?)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub w_of_t: Weighting,
    /// Constant factor on `w(t)`; zero switches every score gradient off.
    pub w_scale: f64,
    pub w_cfg: f64,
    pub score_param: ScoreParam,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            gamma1: 1.0,
            gamma2: 1.0,
            w_of_t: Weighting::Constant,
            w_scale: 1.0,
            w_cfg: DEFAULT_CFG,
            score_param: ScoreParam::Velocity,
        }
    }
}

impl LossWeights {
    // Negated comparisons so NaN fails as well.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(invalid(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.gamma1 > 0.0) {
            return Err(invalid(format!("gamma1 {} must be positive", self.gamma1)));
        }
        if !(self.gamma2 >= 0.0) {
            return Err(invalid(format!(
                "gamma2 {} must be non-negative",
                self.gamma2
            )));
        }
        if !self.w_scale.is_finite() || !self.w_cfg.is_finite() {
            return Err(invalid("weights must be finite"));
        }
        Ok(())
    }

    pub fn w(&self, sched: &TimestepSchedule, t: usize) -> f64 {
        let (s, a) = (sched.sigma(t), sched.alpha(t));
        let base = match self.w_of_t {
            Weighting::Constant => 1.0,
            Weighting::SigmaSq => s * s,
            Weighting::Snr => s * s / (a * a + s * s),
        };
        self.w_scale * base
    }
}

/// Per-step scalars written to the training log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: usize,
    pub t: usize,
    pub gamma1: f64,
    pub recon_perceptual: f64,
    pub recon_latent_mse: f64,
    /// RMS of the full regularisation gradient, including trajectory nodes.
    pub tsd: f64,
    /// RMS of the base-node TSM and VSD residuals.
    pub tsm_component: f64,
    pub vsd_component: f64,
    pub lora_diffusion: f64,
    pub dasm_nodes: usize,
    pub student_grad_norm: f64,
    pub lora_grad_norm: f64,
}

impl LossBreakdown {
    pub fn all_finite(&self) -> bool {
        [
            self.recon_perceptual,
            self.recon_latent_mse,
            self.tsd,
            self.tsm_component,
            self.vsd_component,
            self.lora_diffusion,
            self.student_grad_norm,
            self.lora_grad_norm,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Guided predictions at one pair of noisy latents.
#[derive(Clone, Debug, PartialEq)]
pub struct ScorePredictions<F> {
    /// Teacher on the student branch.
    pub teacher_fake: Tensor<F>,
    /// Teacher on the high-quality branch.
    pub teacher_real: Tensor<F>,
    /// Replica on the student branch.
    pub lora_fake: Tensor<F>,
}

/// The three residual gradients at one noisy pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTerms<F> {
    pub tsd: Tensor<F>,
    pub tsm: Tensor<F>,
    pub vsd: Tensor<F>,
}

/// Frozen teacher, trainable replica and the schedule they share.
#[derive(Clone, Copy)]
pub struct ScoreNets<'a, F> {
    pub teacher: &'a VelocityNet<F>,
    pub lora: &'a VelocityNet<F>,
    pub sched: &'a TimestepSchedule,
}

fn wscale<F: Real>(w: f64, x: &Tensor<F>) -> Tensor<F> {
    let k = F::c(w);
    x.map(|v| k * v)
}

impl<'a, F: Real> ScoreNets<'a, F> {
    pub fn new(
        teacher: &'a VelocityNet<F>,
        lora: &'a VelocityNet<F>,
        sched: &'a TimestepSchedule,
    ) -> Self {
        Self {
            teacher,
            lora,
            sched,
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.sched.steps() {
            return Err(Error::InvalidRange {
                lo: t,
                hi: t,
                max: self.sched.steps(),
            });
        }
        Ok(())
    }

    /// Teacher on both branches (one batch) and replica on the student branch.
    pub fn predictions(
        &self,
        zh_t: &Tensor<F>,
        z_t: &Tensor<F>,
        t: usize,
        cond: &[Cond],
        w_cfg: f64,
    ) -> Result<ScorePredictions<F>> {
        shape_check(zh_t.shape(), z_t.shape())?;
        self.check_t(t)?;
        let n = zh_t.shape()[0];
        let both = Tensor::concat_outer(&[zh_t, z_t])?;
        let mut conds = cond.to_vec();
        conds.extend_from_slice(cond);
        let teacher = self.teacher.cfg_predict(&both, t, &conds, w_cfg)?;
        Ok(ScorePredictions {
            teacher_fake: teacher.slice_outer(0, n),
            teacher_real: teacher.slice_outer(n, n),
            lora_fake: self.lora.cfg_predict(zh_t, t, cond, w_cfg)?,
        })
    }

    /// All three residuals from one set of predictions made at `zh_t` and
    /// `z_t`. TSD is evaluated from its own closed form, not as a blend of
    /// the other two.
    pub fn terms_from(
        &self,
        p: &ScorePredictions<F>,
        zh_t: &Tensor<F>,
        z_t: &Tensor<F>,
        t: usize,
        weights: &LossWeights,
    ) -> Result<ScoreTerms<F>> {
        let w = weights.w(self.sched, t);
        let (wk, lam) = (F::c(w), F::c(weights.lambda));
        let param = weights.score_param;
        let fake = score_from_velocity(&p.teacher_fake, zh_t, t, self.sched, param)?;
        let real = score_from_velocity(&p.teacher_real, z_t, t, self.sched, param)?;
        let replica = score_from_velocity(&p.lora_fake, zh_t, t, self.sched, param)?;
        let tsm = fake.sub(&real)?;
        let vsd = fake.sub(&replica)?;
        let mut tsd = Tensor::zeros(tsm.shape());
        for (i, out) in tsd.data_mut().iter_mut().enumerate() {
            let (pf, pr, lf) = (fake.data()[i], real.data()[i], replica.data()[i]);
            *out = wk * (pf - pr + lam * (pr - lf));
        }
        Ok(ScoreTerms {
            tsd,
            tsm: wscale(w, &tsm),
            vsd: wscale(w, &vsd),
        })
    }

    /// Residuals at already-noised latents.
    pub fn terms_at(
        &self,
        zh_t: &Tensor<F>,
        z_t: &Tensor<F>,
        t: usize,
        cond: &[Cond],
        weights: &LossWeights,
    ) -> Result<ScoreTerms<F>> {
        let p = self.predictions(zh_t, z_t, t, cond, weights.w_cfg)?;
        self.terms_from(&p, zh_t, z_t, t, weights)
    }

    /// `w(t) * (teacher(z_hat_t) - replica(z_hat_t))`.
    pub fn vsd_gradient(
        &self,
        z_hat: &Tensor<F>,
        t: usize,
        eps: &Tensor<F>,
        cond: &[Cond],
        weights: &LossWeights,
    ) -> Result<Tensor<F>> {
        let zh_t = add_noise(z_hat, eps, t, self.sched)?;
        let score =
            |v: Tensor<F>| score_from_velocity(&v, &zh_t, t, self.sched, weights.score_param);
        let a = score(self.teacher.cfg_predict(&zh_t, t, cond, weights.w_cfg)?)?;
        let b = score(self.lora.cfg_predict(&zh_t, t, cond, weights.w_cfg)?)?;
        Ok(wscale(weights.w(self.sched, t), &a.sub(&b)?))
    }

    /// `w(t) * (teacher(z_hat_t) - teacher(z_t))` with the same noise on both
    /// branches. Never reads `lambda`.
    pub fn tsm_gradient(
        &self,
        z_hat: &Tensor<F>,
        z: &Tensor<F>,
        t: usize,
        eps: &Tensor<F>,
        cond: &[Cond],
        weights: &LossWeights,
    ) -> Result<Tensor<F>> {
        shape_check(z_hat.shape(), z.shape())?;
        let zh_t = add_noise(z_hat, eps, t, self.sched)?;
        let z_t = add_noise(z, eps, t, self.sched)?;
        let n = z.shape()[0];
        let mut conds = cond.to_vec();
        conds.extend_from_slice(cond);
        let both = self.teacher.cfg_predict(
            &Tensor::concat_outer(&[&zh_t, &z_t])?,
            t,
            &conds,
            weights.w_cfg,
        )?;
        let param = weights.score_param;
        let fake = score_from_velocity(&both.slice_outer(0, n), &zh_t, t, self.sched, param)?;
        let real = score_from_velocity(&both.slice_outer(n, n), &z_t, t, self.sched, param)?;
        let r = fake.sub(&real)?;
        Ok(wscale(weights.w(self.sched, t), &r))
    }

    /// `w(t) * [teacher(z_hat_t) - teacher(z_t) + lambda * (teacher(z_t) - replica(z_hat_t))]`.
    pub fn tsd_gradient(
        &self,
        z_hat: &Tensor<F>,
        z: &Tensor<F>,
        t: usize,
        eps: &Tensor<F>,
        cond: &[Cond],
        weights: &LossWeights,
    ) -> Result<Tensor<F>> {
        shape_check(z_hat.shape(), z.shape())?;
        let zh_t = add_noise(z_hat, eps, t, self.sched)?;
        let z_t = add_noise(z, eps, t, self.sched)?;
        Ok(self.terms_at(&zh_t, &z_t, t, cond, weights)?.tsd)
    }
}

/// Root mean square of a tensor.
pub fn rms<F: Real>(t: &Tensor<F>) -> f64 {
    if t.is_empty() {
        0.0
    } else {
        (t.norm_sq().f64() / t.len() as f64).sqrt()
    }
}

/// Feature-space distance between image batches `[n, 3, h, w]`: mean over
/// the encoder's three activation maps of the MSE between channel-normalised
/// features. The feature network is never trained through this graph.
pub fn perceptual_graph<F: Real>(
    ctx: &mut Ctx<'_, F>,
    featnet: &AutoEncoder<F>,
    a: Var,
    b: Var,
) -> Var {
    ctx.with(Trainable::Nothing, |ctx| {
        let fa = featnet.encode_graph(ctx, a).features;
        let fb = featnet.encode_graph(ctx, b).features;
        let eps = F::c(1e-10);
        let mut total: Option<Var> = None;
        for (x, y) in fa.iter().zip(&fb) {
            let nx = ctx.tape.channel_norm(*x, eps);
            let ny = ctx.tape.channel_norm(*y, eps);
            let d = ctx.tape.mse(nx, ny);
            total = Some(match total {
                Some(acc) => ctx.tape.add(acc, d),
                None => d,
            });
        }
        let total = total.expect("encoder exposes feature maps");
        ctx.tape.scale(total, F::c(1.0 / fa.len() as f64))
    })
}

/// Perceptual-proxy distance between two images.
pub fn perceptual_distance<F: Real>(
    featnet: &AutoEncoder<F>,
    a: &ImageBuffer,
    b: &ImageBuffer,
) -> Result<f64> {
    a.same_shape(b)?;
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, Trainable::Nothing);
    let av = ctx.tape.constant(ImageBuffer::batch(&[a])?);
    let bv = ctx.tape.constant(ImageBuffer::batch(&[b])?);
    let d = perceptual_graph(&mut ctx, featnet, av, bv);
    Ok(tape.value(d).data()[0].f64())
}

/// Which terms the reconstruction loss carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Perceptual plus latent MSE, no trajectory nodes.
    Early,
    /// Perceptual only, trajectory nodes on.
    Late,
}

/// Graph nodes of the reconstruction loss.
pub struct ReconGraph {
    pub total: Var,
    pub perceptual: Var,
    pub latent_mse: Option<Var>,
}

/// `gamma1 * perceptual(x_hat, x_h) + MSE(z_t, z_hat_t)`; the MSE term is
/// absent in the late phase.
#[allow(clippy::too_many_arguments)]
pub fn reconstruction_graph<F: Real>(
    ctx: &mut Ctx<'_, F>,
    featnet: &AutoEncoder<F>,
    x_hat: Var,
    x_h: Var,
    zh_t: Var,
    z_t: Var,
    weights: &LossWeights,
    phase: Phase,
) -> Result<ReconGraph> {
    shape_check(ctx.tape.value(x_h).shape(), ctx.tape.value(x_hat).shape())?;
    shape_check(ctx.tape.value(z_t).shape(), ctx.tape.value(zh_t).shape())?;
    let perceptual = perceptual_graph(ctx, featnet, x_hat, x_h);
    let scaled = ctx.tape.scale(perceptual, F::c(weights.gamma1));
    let (total, latent_mse) = match phase {
        Phase::Early => {
            let m = ctx.tape.mse(z_t, zh_t);
            (ctx.tape.add(scaled, m), Some(m))
        }
        Phase::Late => (scaled, None),
    };
    Ok(ReconGraph {
        total,
        perceptual,
        latent_mse,
    })
}

/// Value of the reconstruction loss on plain tensors.
#[allow(clippy::too_many_arguments)]
pub fn reconstruction_loss<F: Real>(
    featnet: &AutoEncoder<F>,
    x_hat: &Tensor<F>,
    x_h: &Tensor<F>,
    zh_t: &Tensor<F>,
    z_t: &Tensor<F>,
    weights: &LossWeights,
    phase: Phase,
) -> Result<f64> {
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, Trainable::Nothing);
    let vars: Vec<Var> = [x_hat, x_h, zh_t, z_t]
        .iter()
        .map(|t| ctx.tape.constant((*t).clone()))
        .collect();
    let g = reconstruction_graph(
        &mut ctx, featnet, vars[0], vars[1], vars[2], vars[3], weights, phase,
    )?;
    Ok(tape.value(g.total).data()[0].f64())
}

/// `z_hat_t = alpha_t * z_hat + sigma_t * eps` inside a graph.
pub fn noised_graph<F: Real>(
    ctx: &mut Ctx<'_, F>,
    z: Var,
    eps: &Tensor<F>,
    t: usize,
    sched: &TimestepSchedule,
) -> Result<Var> {
    shape_check(ctx.tape.value(z).shape(), eps.shape())?;
    let scaled = ctx.tape.scale(z, F::c(sched.alpha(t)));
    let s = F::c(sched.sigma(t));
    let noise = ctx.tape.constant(eps.map(|e| s * e));
    Ok(ctx.tape.add(scaled, noise))
}

/// Replica flow-matching loss `mean |replica(z_hat_t) - (eps - z_hat)|^2`,
/// conditional branch only. `z_hat` must not carry gradient.
pub fn lora_diffusion_graph<F: Real>(
    ctx: &mut Ctx<'_, F>,
    lora: &VelocityNet<F>,
    z_hat: Var,
    t: usize,
    eps: &Tensor<F>,
    cond: &[Cond],
    sched: &TimestepSchedule,
) -> Result<Var> {
    if ctx.tape.requires_grad(z_hat) {
        return Err(Error::GradientLinkage(
            "replica loss input is linked to trainable parameters".into(),
        ));
    }
    let z = ctx.tape.value(z_hat).clone();
    let z_t = ctx.tape.constant(add_noise(&z, eps, t, sched)?);
    let target = ctx.tape.constant(velocity_target(&z, eps)?);
    let ts: Vec<usize> = core::iter::repeat_n(t, z.shape()[0]).collect();
    let pred = lora.forward(ctx, z_t, &ts, cond)?;
    Ok(ctx.tape.mse(pred, target))
}

/// Replica loss value and adapter gradients for a detached latent batch.
pub fn lora_diffusion_loss<F: Real>(
    lora: &VelocityNet<F>,
    z_hat: &Tensor<F>,
    t: usize,
    eps: &Tensor<F>,
    cond: &[Cond],
    sched: &TimestepSchedule,
) -> Result<(f64, ParamGrads<F>)> {
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, Trainable::Adapters);
    let z = ctx.tape.constant(z_hat.clone());
    let loss = lora_diffusion_graph(&mut ctx, lora, z, t, eps, cond, sched)?;
    let grads = ctx.tape.backward(loss);
    let pg = ctx.param_grads(&grads);
    Ok((ctx.tape.value(loss).data()[0].f64(), pg))
}
