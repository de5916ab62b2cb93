//! Training loops: autoencoder, teacher, and the alternating student/replica
//! distillation.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dasm::{rollout_accumulate, DasmConfig};
use crate::degradation::{SynthImage, TrainingPair};
use crate::error::{invalid, Error, Result};
use crate::image::ImageBuffer;
use crate::losses::{
    lora_diffusion_loss, noised_graph, reconstruction_graph, rms, LossBreakdown, LossWeights,
    Phase, ScoreNets,
};
use crate::metrics::{frechet_feature_distance, psnr_y};
use crate::nets::{
    lora_wrap, AeConfig, AutoEncoder, Cond, Ctx, Module, ParamGrads, Student, Trainable,
    VelocityConfig, VelocityNet, DEFAULT_LORA_RANK,
};
use crate::optim::{AdamConfig, AdamW};
use crate::real::Real;
use crate::rng::{derived, seeded, streams, Rng};
use crate::scheduler::{
    add_noise, euler_step, velocity_target, ScheduleKind, TimestepSchedule, DEFAULT_SHIFT,
    DEFAULT_STEPS,
};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub kind: ScheduleKind,
    pub shift: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            kind: ScheduleKind::Linear,
            shift: DEFAULT_SHIFT,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<TimestepSchedule> {
        TimestepSchedule::new(self.steps, self.kind, self.shift)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AeTrainConfig {
    pub arch: AeConfig,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Held-out reconstruction MSE counted as converged.
    pub target_mse: f64,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        Self {
            arch: AeConfig::default(),
            steps: 1500,
            batch: 8,
            lr: 2e-3,
            target_mse: 1.6e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherTrainConfig {
    pub arch: VelocityConfig,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Probability of replacing the class with the null condition.
    pub cond_dropout: f64,
    /// Euler steps used by the sampling check.
    pub val_sample_steps: usize,
    pub val_cfg: f64,
}

impl Default for TeacherTrainConfig {
    fn default() -> Self {
        Self {
            arch: VelocityConfig::default(),
            steps: 1500,
            batch: 32,
            lr: 1e-3,
            cond_dropout: 0.1,
            val_sample_steps: 20,
            val_cfg: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr_student: f64,
    pub lr_lora: f64,
    pub lora_rank: usize,
    pub lora_scale: f64,
    pub encoder_rank: usize,
    /// Denoiser timestep for the student; `None` means `T`.
    pub t_cond: Option<usize>,
    pub weights: LossWeights,
    pub dasm: DasmConfig,
    pub t_lo: usize,
    pub t_hi: usize,
    pub gamma1_range: [f64; 2],
    /// Steps over which `gamma1` ramps; `None` means the whole run.
    pub ramp_horizon: Option<usize>,
    /// Fraction of steps after which latent MSE is dropped and trajectory
    /// nodes are enabled.
    pub phase_boundary: f64,
    pub clip_norm: f64,
    /// Checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch: 8,
            lr_student: 1e-4,
            lr_lora: 2e-5,
            lora_rank: DEFAULT_LORA_RANK,
            lora_scale: 1.0,
            encoder_rank: DEFAULT_LORA_RANK,
            t_cond: None,
            weights: LossWeights::default(),
            dasm: DasmConfig::default(),
            t_lo: 50,
            t_hi: 950,
            gamma1_range: [1.0, 2.0],
            ramp_horizon: None,
            phase_boundary: 0.6,
            clip_norm: 1.0,
            checkpoint_every: 0,
        }
    }
}

impl DistillConfig {
    pub fn boundary_step(&self) -> usize {
        (self.phase_boundary * self.steps as f64).round() as usize
    }

    pub fn phase(&self, step: usize) -> Phase {
        if step < self.boundary_step() {
            Phase::Early
        } else {
            Phase::Late
        }
    }

    pub fn gamma1(&self, step: usize) -> f64 {
        let horizon = self.ramp_horizon.unwrap_or(self.steps).max(1);
        ramp_between(step, horizon, self.gamma1_range[0], self.gamma1_range[1])
    }
}

/// Every knob of the three training phases.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub adam: AdamConfig,
    pub autoencoder: AeTrainConfig,
    pub teacher: TeacherTrainConfig,
    pub distill: DistillConfig,
}

impl TrainConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let sched = self.schedule.build()?;
        let d = &self.distill;
        d.weights.validate()?;
        d.dasm.validate()?;
        if d.t_lo < 1 || d.t_hi > sched.steps() - 1 || d.t_lo > d.t_hi {
            return Err(Error::InvalidRange {
                lo: d.t_lo,
                hi: d.t_hi,
                max: sched.steps() - 1,
            });
        }
        if d.t_cond.is_some_and(|t| t > sched.steps()) {
            return Err(invalid("student timestep exceeds T"));
        }
        if d.batch == 0 || self.autoencoder.batch == 0 || self.teacher.batch == 0 {
            return Err(invalid("batch size must be >= 1"));
        }
        if !(0.0..=1.0).contains(&d.phase_boundary) {
            return Err(invalid("phase boundary must be a fraction in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.teacher.cond_dropout) {
            return Err(invalid("condition dropout must be a probability"));
        }
        if !(d.clip_norm > 0.0) {
            return Err(invalid("clip norm must be positive"));
        }
        Ok(())
    }
}

/// Linear 1 -> 2 over `horizon` steps, held at 2 afterwards.
pub fn ramp_gamma1(step: usize, horizon: usize) -> f64 {
    ramp_between(step, horizon, 1.0, 2.0)
}

pub fn ramp_between(step: usize, horizon: usize, from: f64, to: f64) -> f64 {
    let u = (step as f64 / horizon.max(1) as f64).min(1.0);
    from + (to - from) * u
}

fn check_finite(what: &str, v: f64, step: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            what: what.into(),
            step: step as u64,
        })
    }
}

fn check_grads<F: Real>(what: &str, g: &ParamGrads<F>, step: usize) -> Result<()> {
    if g.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            what: format!("{what} gradient"),
            step: step as u64,
        })
    }
}

/// Epoch-shuffled index stream; each epoch has its own seed-derived order.
#[derive(Clone, Debug)]
pub struct BatchOrder {
    seed: u64,
    stream: u64,
    len: usize,
    epoch: u64,
    cursor: usize,
    order: Vec<usize>,
}

impl BatchOrder {
    pub fn new(seed: u64, stream: u64, len: usize) -> Self {
        let mut s = Self {
            seed,
            stream,
            len,
            epoch: 0,
            cursor: 0,
            order: Vec::new(),
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.len).collect();
        self.order
            .shuffle(&mut derived(self.seed, self.stream, self.epoch));
        self.cursor = 0;
    }

    pub fn next_batch(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.cursor == self.len {
                self.epoch += 1;
                self.reshuffle();
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Latents of `images` under `ae`, one `[1, c, h, w]` tensor each.
pub fn encode_each<F: Real>(
    ae: &AutoEncoder<F>,
    images: &[&ImageBuffer],
) -> Result<Vec<Tensor<F>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(16) {
        let z = ae.encode_images(chunk)?;
        out.extend((0..chunk.len()).map(|i| z.slice_outer(i, 1)));
    }
    Ok(out)
}

fn stack<F: Real>(parts: &[&Tensor<F>]) -> Result<Tensor<F>> {
    Tensor::concat_outer(parts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeReport {
    pub steps: usize,
    pub final_train_mse: f64,
    pub val_mse: f64,
    pub val_psnr: f64,
    /// Held-out round-trip PSNR the checkpoint guarantees.
    pub psnr_floor: f64,
    pub latent_scale: f64,
    pub converged: bool,
    pub decoder_checksum: String,
}

/// Mean round-trip PSNR and pixel MSE over `images`.
pub fn roundtrip_quality<F: Real>(
    ae: &AutoEncoder<F>,
    images: &[ImageBuffer],
) -> Result<(f64, f64)> {
    let (mut psnr, mut mse) = (0.0, 0.0);
    for chunk in images.chunks(16) {
        let refs: Vec<&ImageBuffer> = chunk.iter().collect();
        let out = ae.decode(&ae.encode_images(&refs)?)?;
        for (a, b) in out.iter().zip(chunk) {
            psnr += psnr_y(a, b)?;
            mse += a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| ((x - y) as f64).powi(2))
                .sum::<f64>()
                / a.data().len() as f64;
        }
    }
    let n = images.len().max(1) as f64;
    Ok((psnr / n, mse / n))
}

/// Pixel-MSE autoencoder training. Afterwards the latent scale is set so
/// training latents have unit standard deviation.
pub fn train_autoencoder<F: Real>(
    cfg: &TrainConfig,
    train: &[ImageBuffer],
    val: &[ImageBuffer],
    on_step: &mut dyn FnMut(usize, f64),
) -> Result<(AutoEncoder<F>, AeReport)> {
    let c = &cfg.autoencoder;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InsufficientSamples {
            need: 1,
            got: train.len().min(val.len()),
        });
    }
    let mut ae = AutoEncoder::<F>::new(c.arch.clone(), &mut derived(cfg.seed, streams::INIT, 0));
    let mut opt = AdamW::new(cfg.adam.clone());
    let mut order = BatchOrder::new(cfg.seed, streams::TRAIN, train.len());
    let mut last = f64::NAN;
    for step in 0..c.steps {
        let idx = order.next_batch(c.batch);
        let refs: Vec<&ImageBuffer> = idx.iter().map(|&i| &train[i]).collect();
        let x = ImageBuffer::batch::<F>(&refs)?;
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, Trainable::All);
        let xv = ctx.tape.constant(x);
        let enc = ae.encode_graph(&mut ctx, xv);
        let out = ae.decode_graph(&mut ctx, enc.latent);
        let loss = ctx.tape.mse(out, xv);
        let lv = ctx.tape.value(loss).data()[0].f64();
        check_finite("autoencoder loss", lv, step)?;
        let grads = ctx.tape.backward(loss);
        let pg = ctx.param_grads(&grads);
        check_grads("autoencoder", &pg, step)?;
        opt.step(&mut ae, &pg, c.lr * cosine_factor(step, c.steps));
        last = lv;
        on_step(step, lv);
    }
    let train_refs: Vec<&ImageBuffer> = train.iter().collect();
    let lat = encode_each(&ae, &train_refs)?;
    let n: usize = lat.iter().map(Tensor::len).sum();
    let mean = lat.iter().map(|z| z.sum().f64()).sum::<f64>() / n as f64;
    let var = lat
        .iter()
        .flat_map(|z| z.data().iter().map(move |v| (v.f64() - mean).powi(2)))
        .sum::<f64>()
        / n as f64;
    if var > 0.0 {
        ae.latent_scale = 1.0 / var.sqrt();
    }
    let (val_psnr, val_mse) = roundtrip_quality(&ae, val)?;
    let report = AeReport {
        steps: c.steps,
        final_train_mse: last,
        val_mse,
        val_psnr,
        psnr_floor: (val_psnr - 1.0).floor(),
        latent_scale: ae.latent_scale,
        converged: val_mse <= c.target_mse,
        decoder_checksum: ae.decoder_checksum(),
    };
    Ok((ae, report))
}

/// Half-cosine decay to 10% of the base rate.
fn cosine_factor(step: usize, total: usize) -> f64 {
    let u = step as f64 / total.max(1) as f64;
    0.1 + 0.9 * 0.5 * (1.0 + (core::f64::consts::PI * u).cos())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherReport {
    pub steps: usize,
    pub final_train_loss: f64,
    pub val_loss: f64,
    /// Fréchet feature distance of Euler samples to the held-out set.
    pub sample_ffd: Option<f64>,
    pub checksum: String,
}

/// Timesteps `T = t_0 > t_1 > ... > t_k = 0` evenly spaced over `k` steps.
pub fn sampling_timesteps(total: usize, k: usize) -> Vec<usize> {
    let k = k.max(1);
    (0..=k)
        .map(|i| ((k - i) as f64 * total as f64 / k as f64).round() as usize)
        .collect()
}

/// Euler sampling from pure noise.
pub fn sample_latents<F: Real>(
    net: &VelocityNet<F>,
    shape: &[usize],
    cond: &[Cond],
    steps: usize,
    w_cfg: f64,
    sched: &TimestepSchedule,
    rng: &mut Rng,
) -> Result<Tensor<F>> {
    let mut z = Tensor::randn(shape, 1.0, rng);
    let ts = sampling_timesteps(sched.steps(), steps);
    for w in ts.windows(2) {
        let v = net.cfg_predict(&z, w[0], cond, w_cfg)?;
        z = euler_step(&z, &v, w[0], w[1], sched)?;
    }
    Ok(z)
}

/// Mean flow-matching loss on fixed draws over `latents`.
pub fn velocity_loss<F: Real>(
    net: &VelocityNet<F>,
    latents: &[Tensor<F>],
    classes: &[usize],
    sched: &TimestepSchedule,
    seed: u64,
) -> Result<f64> {
    let mut rng = derived(seed, streams::SAMPLE, 1);
    let (mut total, mut count) = (0.0, 0usize);
    for (z0, &c) in latents.iter().zip(classes) {
        let t = rand::Rng::gen_range(&mut rng, 1..=sched.steps());
        let eps = Tensor::randn(z0.shape(), 1.0, &mut rng);
        let z_t = add_noise(z0, &eps, t, sched)?;
        let v = net.predict(&z_t, &[t], &[Cond::Class(c)])?;
        let target = velocity_target(z0, &eps)?;
        total += v.sub(&target)?.norm_sq().f64() / v.len() as f64;
        count += 1;
    }
    Ok(total / count.max(1) as f64)
}

/// Flow-matching training of the conditional velocity net on frozen latents.
pub fn train_teacher<F: Real>(
    cfg: &TrainConfig,
    train: &[SynthImage],
    val: &[SynthImage],
    ae: &AutoEncoder<F>,
    on_step: &mut dyn FnMut(usize, f64),
) -> Result<(VelocityNet<F>, TeacherReport)> {
    let c = &cfg.teacher;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InsufficientSamples {
            need: 1,
            got: train.len().min(val.len()),
        });
    }
    if c.arch.latent_channels != ae.config.latent_channels {
        return Err(invalid("teacher and autoencoder latent channels differ"));
    }
    let sched = cfg.schedule.build()?;
    let refs: Vec<&ImageBuffer> = train.iter().map(|s| &s.image).collect();
    let latents = encode_each(ae, &refs)?;
    let mut net = VelocityNet::<F>::new(c.arch.clone(), &mut derived(cfg.seed, streams::INIT, 1));
    let mut opt = AdamW::new(cfg.adam.clone());
    let mut order = BatchOrder::new(cfg.seed, streams::TRAIN + 100, train.len());
    let mut rng = derived(cfg.seed, streams::TRAIN, 1);
    let mut last = f64::NAN;
    for step in 0..c.steps {
        let idx = order.next_batch(c.batch);
        let z0 = stack(&idx.iter().map(|&i| &latents[i]).collect::<Vec<_>>())?;
        let ts: Vec<usize> = idx
            .iter()
            .map(|_| rand::Rng::gen_range(&mut rng, 1..=sched.steps()))
            .collect();
        let cond: Vec<Cond> = idx
            .iter()
            .map(|&i| {
                if rand::Rng::gen_bool(&mut rng, c.cond_dropout) {
                    Cond::Null
                } else {
                    Cond::Class(train[i].class_id)
                }
            })
            .collect();
        let eps = Tensor::randn(z0.shape(), 1.0, &mut rng);
        let per = z0.len() / idx.len();
        let mut z_t = z0.clone();
        for (k, &t) in ts.iter().enumerate() {
            let (a, s) = (F::c(sched.alpha(t)), F::c(sched.sigma(t)));
            let range = k * per..(k + 1) * per;
            for (dst, (&z, &e)) in z_t.data_mut()[range.clone()]
                .iter_mut()
                .zip(z0.data()[range.clone()].iter().zip(&eps.data()[range]))
            {
                *dst = a * z + s * e;
            }
        }
        let target = velocity_target(&z0, &eps)?;
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, Trainable::Base);
        let zv = ctx.tape.constant(z_t);
        let pred = net.forward(&mut ctx, zv, &ts, &cond)?;
        let tv = ctx.tape.constant(target);
        let loss = ctx.tape.mse(pred, tv);
        let lv = ctx.tape.value(loss).data()[0].f64();
        check_finite("teacher loss", lv, step)?;
        let grads = ctx.tape.backward(loss);
        let pg = ctx.param_grads(&grads);
        check_grads("teacher", &pg, step)?;
        opt.step(&mut net, &pg, c.lr * cosine_factor(step, c.steps));
        last = lv;
        on_step(step, lv);
    }

    let val_refs: Vec<&ImageBuffer> = val.iter().map(|s| &s.image).collect();
    let val_lat = encode_each(ae, &val_refs)?;
    let classes: Vec<usize> = val.iter().map(|s| s.class_id).collect();
    let val_loss = velocity_loss(&net, &val_lat, &classes, &sched, cfg.seed)?;
    let samples = generate_images(
        &net,
        ae,
        &classes,
        c.val_sample_steps,
        c.val_cfg,
        &sched,
        cfg.seed,
    )?;
    let val_images: Vec<ImageBuffer> = val.iter().map(|s| s.image.clone()).collect();
    let sample_ffd = match frechet_feature_distance(&samples, &val_images, ae) {
        Ok(d) => Some(d),
        Err(Error::InsufficientSamples { .. }) => None,
        Err(e) => return Err(e),
    };
    let report = TeacherReport {
        steps: c.steps,
        final_train_loss: last,
        val_loss,
        sample_ffd,
        checksum: crate::nets::module_checksum(&net),
    };
    Ok((net, report))
}

/// Decoded Euler samples, one per entry of `classes`.
pub fn generate_images<F: Real>(
    net: &VelocityNet<F>,
    ae: &AutoEncoder<F>,
    classes: &[usize],
    steps: usize,
    w_cfg: f64,
    sched: &TimestepSchedule,
    seed: u64,
) -> Result<Vec<ImageBuffer>> {
    let mut rng = derived(seed, streams::SAMPLE, 2);
    let mut out = Vec::with_capacity(classes.len());
    for chunk in classes.chunks(16) {
        let cond: Vec<Cond> = chunk.iter().map(|&c| Cond::Class(c)).collect();
        let shape = [chunk.len(), ae.config.latent_channels, 16, 16];
        let z = sample_latents(net, &shape, &cond, steps, w_cfg, sched, &mut rng)?;
        out.extend(ae.decode(&z)?);
    }
    Ok(out)
}

/// Mutable distillation state: student, replica, optimisers, rng, counters.
#[derive(Debug)]
pub struct TrainState<F> {
    pub student: Student<F>,
    pub lora: VelocityNet<F>,
    pub opt_student: AdamW<F>,
    pub opt_lora: AdamW<F>,
    pub step: usize,
    pub rng: Rng,
    pub order: BatchOrder,
    /// Sum of every logged breakdown, for running means.
    pub totals: LossBreakdown,
}

impl<F: Real> Clone for TrainState<F> {
    fn clone(&self) -> Self {
        Self {
            student: self.student.clone(),
            lora: self.lora.clone(),
            opt_student: self.opt_student.clone(),
            opt_lora: self.opt_lora.clone(),
            step: self.step,
            rng: self.rng.clone(),
            order: self.order.clone(),
            totals: self.totals.clone(),
        }
    }
}

impl<F: Real> TrainState<F> {
    pub fn new(
        cfg: &TrainConfig,
        ae: &AutoEncoder<F>,
        teacher: &VelocityNet<F>,
        factor: usize,
        n_pairs: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = &cfg.distill;
        let sched = cfg.schedule.build()?;
        let student = Student::new(
            ae,
            teacher,
            factor,
            d.t_cond.unwrap_or(sched.steps()),
            d.encoder_rank,
            cfg.seed,
        )?;
        let lora = lora_wrap(teacher, d.lora_rank, d.lora_scale, cfg.seed)?;
        Ok(Self {
            student,
            lora,
            opt_student: AdamW::new(cfg.adam.clone()),
            opt_lora: AdamW::new(cfg.adam.clone()),
            step: 0,
            rng: seeded(crate::rng::derive_seed(cfg.seed, streams::TRAIN, 2)),
            order: BatchOrder::new(cfg.seed, streams::TRAIN + 200, n_pairs),
            totals: LossBreakdown::default(),
        })
    }

    /// Running mean of the logged breakdowns.
    pub fn running_mean(&self) -> LossBreakdown {
        let k = 1.0 / self.step.max(1) as f64;
        let t = &self.totals;
        LossBreakdown {
            step: self.step,
            t: 0,
            gamma1: t.gamma1 * k,
            recon_perceptual: t.recon_perceptual * k,
            recon_latent_mse: t.recon_latent_mse * k,
            tsd: t.tsd * k,
            tsm_component: t.tsm_component * k,
            vsd_component: t.vsd_component * k,
            lora_diffusion: t.lora_diffusion * k,
            dasm_nodes: 0,
            student_grad_norm: t.student_grad_norm * k,
            lora_grad_norm: t.lora_grad_norm * k,
        }
    }

    fn accumulate(&mut self, b: &LossBreakdown) {
        let t = &mut self.totals;
        t.gamma1 += b.gamma1;
        t.recon_perceptual += b.recon_perceptual;
        t.recon_latent_mse += b.recon_latent_mse;
        t.tsd += b.tsd;
        t.tsm_component += b.tsm_component;
        t.vsd_component += b.vsd_component;
        t.lora_diffusion += b.lora_diffusion;
        t.student_grad_norm += b.student_grad_norm;
        t.lora_grad_norm += b.lora_grad_norm;
    }
}

/// Training pairs together with the frozen encoder's high-quality latents.
pub struct DistillData<'a, F> {
    pub pairs: &'a [TrainingPair],
    pub hq_latents: Vec<Tensor<F>>,
}

impl<'a, F: Real> DistillData<'a, F> {
    pub fn new(pairs: &'a [TrainingPair], ae: &AutoEncoder<F>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InsufficientSamples { need: 1, got: 0 });
        }
        let refs: Vec<&ImageBuffer> = pairs.iter().map(|p| &p.hq).collect();
        Ok(Self {
            pairs,
            hq_latents: encode_each(ae, &refs)?,
        })
    }

    /// Upscale factor implied by the first pair; every pair must agree.
    pub fn factor(&self) -> Result<usize> {
        let p = &self.pairs[0];
        let f = p.hq.width() / p.lq.width().max(1);
        for q in self.pairs {
            if q.lq.height() * f != q.hq.height() || q.lq.width() * f != q.hq.width() {
                return Err(Error::InvalidSize(format!(
                    "pair {}x{} -> {}x{} is not a x{f} upscale",
                    q.lq.height(),
                    q.lq.width(),
                    q.hq.height(),
                    q.hq.width()
                )));
            }
        }
        Ok(f)
    }
}

/// One student update followed by one replica update.
///
/// The student objective is `L_rec + gamma2 * <stopgrad(g), z_hat> / numel`
/// where `g` is the accumulated TSD gradient. The replica then trains on the
/// detached student latent with fresh `t` and noise.
pub fn distill_step<F: Real>(
    state: &mut TrainState<F>,
    batch: &[usize],
    data: &DistillData<'_, F>,
    teacher: &VelocityNet<F>,
    ae: &AutoEncoder<F>,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let d = &cfg.distill;
    let sched = cfg.schedule.build()?;
    let step = state.step;
    let phase = d.phase(step);
    let mut weights = d.weights.clone();
    weights.gamma1 = d.gamma1(step);

    let lq: Vec<&ImageBuffer> = batch.iter().map(|&i| &data.pairs[i].lq).collect();
    let hq: Vec<&ImageBuffer> = batch.iter().map(|&i| &data.pairs[i].hq).collect();
    let cond: Vec<Cond> = batch
        .iter()
        .map(|&i| Cond::Class(data.pairs[i].class_id))
        .collect();
    let z = stack(
        &batch
            .iter()
            .map(|&i| &data.hq_latents[i])
            .collect::<Vec<_>>(),
    )?;
    let x_up = state.student.prepare_input(&lq)?;
    let x_h = ImageBuffer::batch::<F>(&hq)?;

    let t = sched.sample_timestep(&mut state.rng, d.t_lo, d.t_hi)?;
    let eps = Tensor::randn(z.shape(), 1.0, &mut state.rng);
    let z_t = add_noise(&z, &eps, t, &sched)?;

    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, Trainable::All);
    let xv = ctx.tape.constant(x_up);
    let g = state.student.forward_graph(&mut ctx, xv)?;
    let zh_t = noised_graph(&mut ctx, g.latent, &eps, t, &sched)?;
    let z_tv = ctx.tape.constant(z_t.clone());
    let xh = ctx.tape.constant(x_h);
    let recon = reconstruction_graph(&mut ctx, ae, g.image, xh, zh_t, z_tv, &weights, phase)?;

    let mut out = LossBreakdown {
        step,
        t,
        gamma1: weights.gamma1,
        recon_perceptual: ctx.tape.value(recon.perceptual).data()[0].f64(),
        recon_latent_mse: recon
            .latent_mse
            .map_or(0.0, |m| ctx.tape.value(m).data()[0].f64()),
        ..Default::default()
    };
    check_finite("perceptual loss", out.recon_perceptual, step)?;
    check_finite("latent mse", out.recon_latent_mse, step)?;

    let mut loss = recon.total;
    if weights.gamma2 > 0.0 {
        let zh_t_val = ctx.tape.value(zh_t).clone();
        let nets = ScoreNets::new(teacher, &state.lora, &sched);
        let dasm = if phase == Phase::Late {
            d.dasm.clone()
        } else {
            DasmConfig::off()
        };
        let reg = rollout_accumulate(&nets, &zh_t_val, &z_t, t, &dasm, &cond, &weights)?;
        out.tsd = weights.gamma2 * rms(&reg.total);
        out.tsm_component = rms(&reg.base.tsm);
        out.vsd_component = rms(&reg.base.vsd);
        out.dasm_nodes = reg.trajectory.len();
        check_finite("tsd gradient", out.tsd, step)?;
        let k = F::c(weights.gamma2 / reg.total.len() as f64);
        let inject = reg.total.map(|v| k * v);
        let surrogate = ctx.tape.dot_const(g.latent, inject);
        loss = ctx.tape.add(loss, surrogate);
    }
    let grads = ctx.tape.backward(loss);
    let mut pg = ctx.param_grads(&grads);
    check_grads("student", &pg, step)?;
    out.student_grad_norm = pg.clip_global_norm(d.clip_norm);
    let z_hat = tape.value(g.latent).clone();
    drop(tape);
    state
        .opt_student
        .step(&mut state.student, &pg, d.lr_student);

    let t2 = sched.sample_timestep(&mut state.rng, d.t_lo, d.t_hi)?;
    let eps2 = Tensor::randn(z_hat.shape(), 1.0, &mut state.rng);
    let (ld, mut lg) = lora_diffusion_loss(&state.lora, &z_hat, t2, &eps2, &cond, &sched)?;
    out.lora_diffusion = ld;
    check_finite("replica loss", ld, step)?;
    check_grads("replica", &lg, step)?;
    out.lora_grad_norm = lg.clip_global_norm(d.clip_norm);
    state.opt_lora.step(&mut state.lora, &lg, d.lr_lora);

    state.step += 1;
    state.accumulate(&out);
    Ok(out)
}

/// Per-step observer for [`distill`].
pub type StepHook<'a, F, E> =
    dyn FnMut(&LossBreakdown, &TrainState<F>) -> core::result::Result<(), E> + 'a;

/// Full distillation run; `on_step` sees every breakdown and the state after
/// the step, and may abort the run with its own error type.
pub fn distill<F: Real, E: From<Error>>(
    cfg: &TrainConfig,
    pairs: &[TrainingPair],
    teacher: &VelocityNet<F>,
    ae: &AutoEncoder<F>,
    on_step: &mut StepHook<'_, F, E>,
) -> core::result::Result<TrainState<F>, E> {
    let data = DistillData::new(pairs, ae)?;
    let mut state = TrainState::new(cfg, ae, teacher, data.factor()?, pairs.len())?;
    while state.step < cfg.distill.steps {
        let batch = state.order.next_batch(cfg.distill.batch);
        let b = distill_step(&mut state, &batch, &data, teacher, ae, cfg)?;
        on_step(&b, &state)?;
    }
    Ok(state)
}

/// Parameter-group sizes of a module, for manifests.
pub fn param_summary<F: Real, M: Module<F> + ?Sized>(m: &M) -> (usize, usize) {
    use crate::nets::ParamKind;
    (
        m.param_count(Some(ParamKind::Base)),
        m.param_count(Some(ParamKind::Adapter)),
    )
}
