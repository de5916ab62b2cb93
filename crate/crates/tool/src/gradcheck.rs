//! Numerical oracles: finite-difference gradient checks, algebraic identities
//! and exact-zero sentinels on micro networks.
//!
//! Finite-difference errors are reported per parameter tensor as
//! `max|analytic - numeric| / max(max|numeric|, max|analytic|)` and the worst
//! tensor is kept.

use std::time::Instant;

use sr_distill_core::dasm::{accumulate_tsd, rollout, rollout_accumulate, DasmConfig};
use sr_distill_core::losses::{
    lora_diffusion_loss, noised_graph, reconstruction_graph, LossWeights, Phase, ScoreNets,
    ScoreParam,
};
use sr_distill_core::nets::{
    lora_wrap, AeConfig, AutoEncoder, Cond, Ctx, Module, ParamGrads, ParamKind, Student, Trainable,
    VelocityConfig, VelocityNet,
};
use sr_distill_core::real::Real;
use sr_distill_core::rng::seeded;
use sr_distill_core::scheduler::{
    add_noise, euler_step, velocity_target, ScheduleKind, TimestepSchedule,
};
use sr_distill_core::tape::Tape;
use sr_distill_core::tensor::Tensor;

use crate::error::{Result, ToolError};

pub const ORACLES: [&str; 9] = [
    "tsd-identity",
    "fd-vsd",
    "fd-tsm",
    "fd-tsd",
    "fd-recon",
    "fd-lora",
    "sentinels",
    "scheduler",
    "dasm",
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Precision {
    F64,
    F32,
}

impl Precision {
    pub fn fd_step(self) -> f64 {
        match self {
            Precision::F64 => 1e-4,
            Precision::F32 => 1e-3,
        }
    }

    pub fn tolerance(self, oracle: &str) -> f64 {
        match (self, oracle) {
            (_, "sentinels") => 0.0,
            (Precision::F32, _) => 1e-2,
            (Precision::F64, o) if o.starts_with("fd-") => 1e-4,
            (Precision::F64, _) => 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub name: String,
    pub max_err: f64,
    pub tolerance: f64,
    pub cases: usize,
    pub seconds: f64,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.max_err.is_finite() && self.max_err <= self.tolerance
    }
}

/// Micro-scale networks and inputs shared by the oracles.
pub struct Micro<F> {
    pub ae: AutoEncoder<F>,
    pub teacher: VelocityNet<F>,
    pub lora: VelocityNet<F>,
    pub student: Student<F>,
    pub sched: TimestepSchedule,
    pub x_up: Tensor<F>,
    pub x_h: Tensor<F>,
    pub z: Tensor<F>,
    pub eps: Tensor<F>,
    pub t: usize,
    pub cond: Vec<Cond>,
}

const BATCH: usize = 2;

fn randomise<F: Real, M: Module<F>>(m: &mut M, kind: Option<ParamKind>, std: f64, seed: u64) {
    let mut rng = seeded(seed);
    m.visit_mut(&mut |_, k, t| {
        if kind.is_none_or(|want| want == k) {
            *t = Tensor::randn(t.shape(), std, &mut rng);
        }
    });
}

fn uniform_images<F: Real>(shape: &[usize], seed: u64) -> Tensor<F> {
    let mut rng = seeded(seed);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| F::c(rand::Rng::gen_range(&mut rng, 0.05..0.95)))
        .collect();
    Tensor::from_vec(shape, data).expect("shape matches data")
}

impl<F: Real> Micro<F> {
    /// Every weight is random, including adapters and the student's output
    /// layer, so no gradient path is trivially zero.
    pub fn new(seed: u64) -> Result<Self> {
        let mut ae = AutoEncoder::new(
            AeConfig {
                widths: [3, 4],
                latent_channels: 2,
            },
            &mut seeded(seed),
        );
        ae.latent_scale = 1.7;
        let vcfg = VelocityConfig {
            latent_channels: 2,
            width: 3,
            time_dim: 4,
            num_classes: 2,
        };
        let teacher = VelocityNet::new(vcfg, &mut seeded(seed + 1));
        let mut lora = lora_wrap(&teacher, 2, 1.0, seed + 2)?;
        randomise(&mut lora, Some(ParamKind::Adapter), 0.3, seed + 3);
        let mut student = Student::new(&ae, &teacher, 4, 1000, 1, seed + 4)?;
        randomise(&mut student.denoiser, None, 0.3, seed + 5);
        randomise(&mut student.ae, Some(ParamKind::Adapter), 0.3, seed + 6);
        let mut rng = seeded(seed + 7);
        let shape = [BATCH, 2, 4, 4];
        Ok(Self {
            x_up: uniform_images(&[BATCH, 3, 16, 16], seed + 8),
            x_h: uniform_images(&[BATCH, 3, 16, 16], seed + 9),
            z: Tensor::randn(&shape, 1.0, &mut rng),
            eps: Tensor::randn(&shape, 1.0, &mut rng),
            t: rand::Rng::gen_range(&mut rng, 50..=950),
            cond: vec![Cond::Class(1), Cond::Null],
            ae,
            teacher,
            lora,
            student,
            sched: TimestepSchedule::linear(1000)?,
        })
    }

    pub fn nets(&self) -> ScoreNets<'_, F> {
        ScoreNets::new(&self.teacher, &self.lora, &self.sched)
    }

    pub fn student_latent(&self, student: &Student<F>) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, Trainable::Nothing);
        let x = ctx.tape.constant(self.x_up.clone());
        let g = student.forward_graph(&mut ctx, x)?;
        Ok(tape.value(g.latent).clone())
    }
}

fn student_trainable_count<F: Real>(m: &Micro<F>) -> usize {
    m.student.denoiser.param_count(None) + m.student.ae.param_count(Some(ParamKind::Adapter))
}

/// Central differences of `f` over every parameter named in `analytic`.
fn fd_error<F: Real, M: Module<F>>(
    module: &mut M,
    analytic: &ParamGrads<F>,
    h: f64,
    f: &mut dyn FnMut(&M) -> Result<f64>,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (name, grad) in &analytic.map {
        let mut numeric = Vec::with_capacity(grad.len());
        for i in 0..grad.len() {
            let mut orig = F::zero();
            let mut nudge = |m: &mut M, delta: f64| {
                m.visit_mut(&mut |n, _, t| {
                    if n == name {
                        if delta == 0.0 {
                            t.data_mut()[i] = orig;
                        } else {
                            orig = t.data()[i];
                            t.data_mut()[i] = orig + F::c(delta);
                        }
                    }
                })
            };
            nudge(module, h);
            let up = f(module)?;
            nudge(module, 0.0);
            nudge(module, -h);
            let down = f(module)?;
            nudge(module, 0.0);
            numeric.push((up - down) / (2.0 * h));
        }
        let a: Vec<f64> = grad.data().iter().map(|v| v.f64()).collect();
        let scale = a.iter().chain(&numeric).fold(0.0f64, |m, v| m.max(v.abs()));
        let diff = a
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        if scale > 0.0 {
            worst = worst.max(diff / scale);
        }
    }
    Ok(worst)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Score {
    Vsd,
    Tsm,
    Tsd,
}

/// Surrogate `gamma2 * <g, z_hat(theta)> / numel` with `g` frozen at the
/// current parameters: autodiff versus central differences.
fn fd_score<F: Real>(m: &mut Micro<F>, which: Score, h: f64) -> Result<f64> {
    let weights = LossWeights {
        gamma2: 0.8,
        ..LossWeights::default()
    };
    let z_hat = m.student_latent(&m.student)?;
    let nets = m.nets();
    let g = match which {
        Score::Vsd => nets.vsd_gradient(&z_hat, m.t, &m.eps, &m.cond, &weights)?,
        Score::Tsm => nets.tsm_gradient(&z_hat, &m.z, m.t, &m.eps, &m.cond, &weights)?,
        Score::Tsd => nets.tsd_gradient(&z_hat, &m.z, m.t, &m.eps, &m.cond, &weights)?,
    };
    let k = F::c(weights.gamma2 / g.len() as f64);
    let inject = g.map(|v| k * v);
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, Trainable::All);
    let x = ctx.tape.constant(m.x_up.clone());
    let out = m.student.forward_graph(&mut ctx, x)?;
    let loss = ctx.tape.dot_const(out.latent, inject.clone());
    let grads = ctx.tape.backward(loss);
    let analytic = ctx.param_grads(&grads);
    let mut student = m.student.clone();
    let probe = |s: &Student<F>| -> Result<f64> { Ok(m.student_latent(s)?.dot(&inject)?.f64()) };
    fd_error(&mut student, &analytic, h, &mut { probe })
}

fn fd_recon<F: Real>(m: &Micro<F>, h: f64) -> Result<f64> {
    let weights = LossWeights {
        gamma1: 1.3,
        ..LossWeights::default()
    };
    let z_t = add_noise(&m.z, &m.eps, m.t, &m.sched)?;
    let graph = |s: &Student<F>, trainable: Trainable| -> Result<(f64, ParamGrads<F>)> {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, trainable);
        let x = ctx.tape.constant(m.x_up.clone());
        let out = s.forward_graph(&mut ctx, x)?;
        let zh_t = noised_graph(&mut ctx, out.latent, &m.eps, m.t, &m.sched)?;
        let zt = ctx.tape.constant(z_t.clone());
        let xh = ctx.tape.constant(m.x_h.clone());
        let r = reconstruction_graph(
            &mut ctx,
            &m.ae,
            out.image,
            xh,
            zh_t,
            zt,
            &weights,
            Phase::Early,
        )?;
        let value = ctx.tape.value(r.total).data()[0].f64();
        if trainable == Trainable::Nothing {
            return Ok((value, ParamGrads::default()));
        }
        let grads = ctx.tape.backward(r.total);
        Ok((value, ctx.param_grads(&grads)))
    };
    let (_, analytic) = graph(&m.student, Trainable::All)?;
    let mut student = m.student.clone();
    fd_error(&mut student, &analytic, h, &mut |s| {
        Ok(graph(s, Trainable::Nothing)?.0)
    })
}

fn fd_lora<F: Real>(m: &Micro<F>, h: f64) -> Result<f64> {
    let z_hat = m.student_latent(&m.student)?;
    let (_, analytic) = lora_diffusion_loss(&m.lora, &z_hat, m.t, &m.eps, &m.cond, &m.sched)?;
    if analytic.map.keys().any(|n| !n.contains(".lora_")) {
        return Err(ToolError::Validation(
            "replica loss produced gradients for base weights".into(),
        ));
    }
    let mut lora = m.lora.clone();
    fd_error(&mut lora, &analytic, h, &mut |l| {
        Ok(lora_diffusion_loss(l, &z_hat, m.t, &m.eps, &m.cond, &m.sched)?.0)
    })
}

/// Largest elementwise gap between `tsd` and the blend, relative to the
/// magnitude of the terms at that element.
fn blend_error<F: Real>(tsd: &Tensor<F>, tsm: &Tensor<F>, vsd: &Tensor<F>, lambda: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for ((&a, &m), &v) in tsd.data().iter().zip(tsm.data()).zip(vsd.data()) {
        let (a, m, v) = (a.f64(), m.f64(), v.f64());
        let blend = (1.0 - lambda) * m + lambda * v;
        let scale = a.abs().max(blend.abs()).max(m.abs()).max(v.abs());
        if scale > 0.0 {
            worst = worst.max((a - blend).abs() / scale);
        }
    }
    worst
}

fn tsd_identity<F: Real>(seed: u64) -> Result<(f64, usize)> {
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for fixture in 0..20 {
        let m = Micro::<F>::new(seed + 100 * fixture)?;
        let nets = m.nets();
        let z_hat = m.student_latent(&m.student)?;
        for (lambda, score_param) in PARAMS
            .iter()
            .flat_map(|&p| [0.0, 0.25, 0.5, 0.75, 1.0].map(|l| (l, p)))
        {
            let w = LossWeights {
                lambda,
                score_param,
                ..LossWeights::default()
            };
            let tsd = nets.tsd_gradient(&z_hat, &m.z, m.t, &m.eps, &m.cond, &w)?;
            let tsm = nets.tsm_gradient(&z_hat, &m.z, m.t, &m.eps, &m.cond, &w)?;
            let vsd = nets.vsd_gradient(&z_hat, m.t, &m.eps, &m.cond, &w)?;
            worst = worst.max(blend_error(&tsd, &tsm, &vsd, lambda));
            cases += 1;
        }
    }
    Ok((worst, cases))
}

const PARAMS: [ScoreParam; 2] = [ScoreParam::Velocity, ScoreParam::Epsilon];

fn max_abs<F: Real>(t: &Tensor<F>) -> f64 {
    t.max_abs().f64()
}

/// Each case must be exactly zero; returns the largest magnitude seen.
fn sentinels<F: Real>(seed: u64) -> Result<(f64, usize)> {
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for fixture in 0..5 {
        let m = Micro::<F>::new(seed + 10 * fixture)?;
        let w = LossWeights {
            score_param: PARAMS[fixture as usize % 2],
            ..LossWeights::default()
        };
        let z_hat = m.student_latent(&m.student)?;
        let nets = m.nets();
        worst = worst.max(max_abs(
            &nets.tsm_gradient(&m.z, &m.z, m.t, &m.eps, &m.cond, &w)?,
        ));
        let fresh = lora_wrap(&m.teacher, 2, 1.0, seed + 77)?;
        let fresh_nets = ScoreNets::new(&m.teacher, &fresh, &m.sched);
        worst = worst.max(max_abs(
            &fresh_nets.vsd_gradient(&z_hat, m.t, &m.eps, &m.cond, &w)?,
        ));
        let off = LossWeights { w_scale: 0.0, ..w };
        let terms = nets.terms_at(
            &add_noise(&z_hat, &m.eps, m.t, &m.sched)?,
            &add_noise(&m.z, &m.eps, m.t, &m.sched)?,
            m.t,
            &m.cond,
            &off,
        )?;
        for g in [&terms.tsd, &terms.tsm, &terms.vsd] {
            worst = worst.max(max_abs(g));
        }
        cases += 5;
    }
    Ok((worst, cases))
}

fn rel_dist<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<f64> {
    let diff = max_abs(&a.sub(b)?);
    Ok(diff / max_abs(b).max(f64::MIN_POSITIVE))
}

/// Euler integration of the exact velocity from `T` back to 0, plus the
/// boundary values of both schedule kinds.
fn scheduler_oracle<F: Real>(seed: u64) -> Result<(f64, usize)> {
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    let mut rng = seeded(seed);
    for kind in [ScheduleKind::Linear, ScheduleKind::Shifted] {
        let sched = TimestepSchedule::new(1000, kind, 3.0)?;
        let bounds = (sched.sigma(0), sched.sigma(1000));
        if bounds != (0.0, 1.0) {
            worst = worst.max(
                (bounds.0)
                    .abs()
                    .max((bounds.1 - 1.0).abs())
                    .max(f64::MIN_POSITIVE),
            );
        }
        for steps in [1, 7, 20, 1000] {
            let z0 = Tensor::<F>::randn(&[2, 2, 4, 4], 1.0, &mut rng);
            let eps = Tensor::<F>::randn(&[2, 2, 4, 4], 1.0, &mut rng);
            let v = velocity_target(&z0, &eps)?;
            let mut z = add_noise(&z0, &eps, 1000, &sched)?;
            let ts = sr_distill_core::trainer::sampling_timesteps(1000, steps);
            for w in ts.windows(2) {
                z = euler_step(&z, &v, w[0], w[1], &sched)?;
            }
            worst = worst.max(rel_dist(&z, &z0)?);
            cases += 1;
        }
    }
    Ok((worst, cases))
}

/// TSD at one node from three separate guided predictions.
fn direct_tsd<F: Real>(
    m: &Micro<F>,
    zh: &Tensor<F>,
    z: &Tensor<F>,
    t: usize,
    w: &LossWeights,
) -> Result<Tensor<F>> {
    // Noise predictions rebuilt from z_t = alpha z0 + sigma eps, v = eps - z0.
    let a = match w.score_param {
        ScoreParam::Velocity => None,
        ScoreParam::Epsilon => Some(m.sched.alpha(t)),
    };
    let score = |v: Tensor<F>, x: &Tensor<F>| -> Result<Tensor<F>> {
        Ok(match a {
            None => v,
            Some(a) => x.add(&v.scale(F::c(a)))?,
        })
    };
    let fake = score(m.teacher.cfg_predict(zh, t, &m.cond, w.w_cfg)?, zh)?;
    let real = score(m.teacher.cfg_predict(z, t, &m.cond, w.w_cfg)?, z)?;
    let replica = score(m.lora.cfg_predict(zh, t, &m.cond, w.w_cfg)?, zh)?;
    let wt = w.w(&m.sched, t);
    let data = fake
        .data()
        .iter()
        .zip(real.data())
        .zip(replica.data())
        .map(|((&f, &r), &l)| F::c(wt * (f.f64() - r.f64() + w.lambda * (r.f64() - l.f64()))))
        .collect();
    Ok(Tensor::from_vec(zh.shape(), data)?)
}

/// Fused and separate accumulation against an independent per-node sum.
fn dasm_oracle<F: Real>(seed: u64) -> Result<(f64, usize)> {
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    let m = Micro::<F>::new(seed)?;
    let nets = m.nets();
    let zh_t = add_noise(&m.student_latent(&m.student)?, &m.eps, 400, &m.sched)?;
    let z_t = add_noise(&m.z, &m.eps, 400, &m.sched)?;
    for (nodes, score_param) in PARAMS.iter().flat_map(|&p| [1, 2, 4].map(|n| (n, p))) {
        let w = LossWeights {
            score_param,
            ..LossWeights::default()
        };
        // 400 keeps every node; 160 and 120 drop nodes below the floor of 50.
        for (t, expect) in [(400, nodes), (160, nodes.min(2)), (120, nodes.min(1))] {
            let cfg = DasmConfig {
                nodes,
                stride: 50,
                ..DasmConfig::default()
            };
            let traj = rollout(
                &zh_t, &z_t, t, &cfg, &m.lora, &m.teacher, &m.cond, &m.sched, w.w_cfg,
            )?;
            if traj.len() != expect {
                return Err(ToolError::Validation(format!(
                    "N={nodes} t={t}: {} nodes, expected {expect}",
                    traj.len()
                )));
            }
            let mut brute = direct_tsd(&m, &zh_t, &z_t, t, &w)?;
            for node in &traj {
                let g = direct_tsd(&m, &node.z_hat_t, &node.z_t, node.t, &w)?;
                for (b, x) in brute.data_mut().iter_mut().zip(g.data()) {
                    *b += F::c(node.weight) * *x;
                }
            }
            let sep = accumulate_tsd((&zh_t, &z_t, t), &traj, &nets, &m.cond, &w)?;
            let fused = rollout_accumulate(&nets, &zh_t, &z_t, t, &cfg, &m.cond, &w)?.total;
            let scale = max_abs(&brute).max(f64::MIN_POSITIVE);
            worst = worst
                .max(max_abs(&sep.sub(&brute)?) / scale)
                .max(max_abs(&fused.sub(&brute)?) / scale);
            cases += 1;
        }
    }
    Ok((worst, cases))
}

fn run_typed<F: Real>(name: &str, seed: u64, h: f64) -> Result<(f64, usize)> {
    let fd = |which| -> Result<(f64, usize)> {
        let mut worst: f64 = 0.0;
        for k in 0..2 {
            let mut m = Micro::<F>::new(seed + k)?;
            if student_trainable_count(&m) > 1000 {
                return Err(ToolError::Validation(
                    "micro student exceeds 1000 parameters".into(),
                ));
            }
            worst = worst.max(fd_score(&mut m, which, h)?);
        }
        Ok((worst, 2))
    };
    match name {
        "tsd-identity" => tsd_identity::<F>(seed),
        "fd-vsd" => fd(Score::Vsd),
        "fd-tsm" => fd(Score::Tsm),
        "fd-tsd" => fd(Score::Tsd),
        "fd-recon" => Ok((fd_recon(&Micro::<F>::new(seed)?, h)?, 1)),
        "fd-lora" => Ok((fd_lora(&Micro::<F>::new(seed)?, h)?, 1)),
        "sentinels" => sentinels::<F>(seed),
        "scheduler" => scheduler_oracle::<F>(seed),
        "dasm" => dasm_oracle::<F>(seed),
        other => Err(ToolError::Args(format!(
            "unknown oracle `{other}`; known: {}",
            ORACLES.join(", ")
        ))),
    }
}

pub fn run_oracle(name: &str, precision: Precision, seed: u64) -> Result<OracleReport> {
    let start = Instant::now();
    let h = precision.fd_step();
    let (max_err, cases) = match precision {
        Precision::F64 => run_typed::<f64>(name, seed, h)?,
        Precision::F32 => run_typed::<f32>(name, seed, h)?,
    };
    Ok(OracleReport {
        name: name.into(),
        max_err,
        tolerance: precision.tolerance(name),
        cases,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Runs `only` (or every oracle when empty).
pub fn run_all(only: &[String], precision: Precision, seed: u64) -> Result<Vec<OracleReport>> {
    let names: Vec<&str> = if only.is_empty() {
        ORACLES.to_vec()
    } else {
        only.iter().map(String::as_str).collect()
    };
    names
        .into_iter()
        .map(|n| run_oracle(n, precision, seed))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn micro_student_is_small() {
        let m = Micro::<f64>::new(0).unwrap();
        assert!(
            student_trainable_count(&m) <= 1000,
            "{}",
            student_trainable_count(&m)
        );
        assert!(m.lora.param_count(None) <= 1000 + m.lora.param_count(Some(ParamKind::Adapter)));
    }

    #[test]
    fn unknown_oracle_is_an_argument_error() {
        assert_eq!(
            run_oracle("nope", Precision::F64, 0)
                .unwrap_err()
                .exit_code(),
            2
        );
    }

    #[test]
    fn fd_detects_a_wrong_gradient() {
        let m = Micro::<f64>::new(3).unwrap();
        let z_hat = m.student_latent(&m.student).unwrap();
        let (_, mut g) =
            lora_diffusion_loss(&m.lora, &z_hat, m.t, &m.eps, &m.cond, &m.sched).unwrap();
        for t in g.map.values_mut() {
            *t = t.scale(1.01);
        }
        let mut lora = m.lora.clone();
        let err = fd_error(&mut lora, &g, 1e-4, &mut |l| {
            Ok(lora_diffusion_loss(l, &z_hat, m.t, &m.eps, &m.cond, &m.sched)?.0)
        })
        .unwrap();
        assert!(err > 5e-3, "{err}");
    }

    #[test]
    fn cheap_oracles_pass() {
        for name in ["sentinels", "scheduler", "fd-lora"] {
            let r = run_oracle(name, Precision::F64, 1).unwrap();
            assert!(r.passed(), "{r:?}");
        }
    }
}
