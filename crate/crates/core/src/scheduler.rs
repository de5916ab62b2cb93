//! Flow-matching noise schedule.
//!
//! A latent at timestep `t` sits on the straight path
//! `z_t = (1 - sigma_t) * z0 + sigma_t * eps`, with `sigma_0 = 0` (data) and
//! `sigma_T = 1` (pure noise). Networks regress the constant path velocity
//! `eps - z0`, and sampling walks the path backwards with Euler steps.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_check, Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// `sigma_t = t / T`.
    Linear,
    /// `sigma_t = s*u / (1 + (s-1)*u)` with `u = t / T`.
    Shifted,
}

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_SHIFT: f64 = 3.0;

/// Discretised schedule `sigma_t` for `t = 0..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimestepSchedule {
    steps: usize,
    kind: ScheduleKind,
    shift: f64,
    sigmas: Vec<f64>,
}

impl TimestepSchedule {
    pub fn new(steps: usize, kind: ScheduleKind, shift: f64) -> Result<Self> {
        if steps < 2 {
            return Err(invalid("schedule needs at least 2 steps"));
        }
        if kind == ScheduleKind::Shifted && !(shift > 0.0 && shift.is_finite()) {
            return Err(invalid("shift must be positive"));
        }
        let n = steps as f64;
        let mut sigmas: Vec<f64> = (0..=steps)
            .map(|t| {
                let u = t as f64 / n;
                match kind {
                    ScheduleKind::Linear => u,
                    ScheduleKind::Shifted => shift * u / (1.0 + (shift - 1.0) * u),
                }
            })
            .collect();
        // Endpoints are pinned: the shifted closed form can miss 1.0 by an ulp.
        sigmas[0] = 0.0;
        sigmas[steps] = 1.0;
        Ok(Self {
            steps,
            kind,
            shift,
            sigmas,
        })
    }

    pub fn linear(steps: usize) -> Result<Self> {
        Self::new(steps, ScheduleKind::Linear, DEFAULT_SHIFT)
    }

    /// `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.sigmas[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps {
            Err(Error::InvalidRange {
                lo: t,
                hi: t,
                max: self.steps,
            })
        } else {
            Ok(())
        }
    }

    /// Uniform integer timestep in `[lo, hi]`.
    pub fn sample_timestep<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        lo: usize,
        hi: usize,
    ) -> Result<usize> {
        if lo > hi || hi > self.steps {
            return Err(Error::InvalidRange {
                lo,
                hi,
                max: self.steps,
            });
        }
        Ok(rng.gen_range(lo..=hi))
    }
}

/// `(1 - sigma_t) * z0 + sigma_t * eps`.
pub fn add_noise<F: Real>(
    z0: &Tensor<F>,
    eps: &Tensor<F>,
    t: usize,
    sched: &TimestepSchedule,
) -> Result<Tensor<F>> {
    sched.check_t(t)?;
    let s = F::c(sched.sigma(t));
    let a = F::c(sched.alpha(t));
    z0.zip_map(eps, |z, e| a * z + s * e)
}

/// One Euler step `z_t + (sigma_prev - sigma_t) * v` towards the data end.
pub fn euler_step<F: Real>(
    z_t: &Tensor<F>,
    v: &Tensor<F>,
    t: usize,
    t_prev: usize,
    sched: &TimestepSchedule,
) -> Result<Tensor<F>> {
    sched.check_t(t)?;
    if t_prev >= t {
        return Err(invalid("euler_step requires t_prev < t"));
    }
    let d = F::c(sched.sigma(t_prev) - sched.sigma(t));
    z_t.zip_map(v, |z, vv| z + d * vv)
}

/// Flow-matching regression target `eps - z0`.
pub fn velocity_target<F: Real>(z0: &Tensor<F>, eps: &Tensor<F>) -> Result<Tensor<F>> {
    eps.sub(z0)
}

/// A noise draw together with the regression target it induces.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisePairing<F> {
    pub eps: Tensor<F>,
    pub t: usize,
    pub target_velocity: Tensor<F>,
}

impl<F: Real> NoisePairing<F> {
    pub fn new(z0: &Tensor<F>, eps: Tensor<F>, t: usize) -> Result<Self> {
        shape_check(z0.shape(), eps.shape())?;
        let target_velocity = velocity_target(z0, &eps)?;
        Ok(Self {
            eps,
            t,
            target_velocity,
        })
    }

    pub fn draw<R: Rng + ?Sized>(z0: &Tensor<F>, t: usize, rng: &mut R) -> Self {
        let eps = Tensor::randn(z0.shape(), 1.0, rng);
        let target_velocity = velocity_target(z0, &eps).expect("same shape");
        Self {
            eps,
            t,
            target_velocity,
        }
    }

    pub fn noised(&self, z0: &Tensor<F>, sched: &TimestepSchedule) -> Result<Tensor<F>> {
        add_noise(z0, &self.eps, self.t, sched)
    }
}
