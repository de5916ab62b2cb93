//! Trajectory sampling for score distillation.
//!
//! From a noisy pair at timestep `t`, both branches are walked backwards with
//! Euler steps of stride `s`: the student branch with the replica, the
//! high-quality branch with the teacher. TSD gradients at the visited nodes
//! are added to the base gradient. Nothing here is differentiated; the total
//! reaches the student only through its latent.

use alloc::format;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_check, Result};
use crate::losses::{LossWeights, ScoreNets, ScoreTerms};
use crate::nets::{Cond, VelocityNet};
use crate::real::Real;
use crate::scheduler::{euler_step, TimestepSchedule};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeWeighting {
    /// `1 / N` for every node.
    #[default]
    Uniform,
    /// `0.5^i` for node `i`.
    Decay,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DasmConfig {
    /// Trajectory nodes `N`.
    pub nodes: usize,
    /// Timestep stride `s`.
    pub stride: usize,
    pub weight_kind: NodeWeighting,
    /// Nodes below this timestep are skipped.
    pub t_floor: usize,
}

impl Default for DasmConfig {
    fn default() -> Self {
        Self {
            nodes: 4,
            stride: 50,
            weight_kind: NodeWeighting::Uniform,
            t_floor: 50,
        }
    }
}

impl DasmConfig {
    pub fn off() -> Self {
        Self {
            nodes: 0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(invalid("trajectory stride must be >= 1"));
        }
        Ok(())
    }

    pub fn weight(&self, i: usize) -> f64 {
        match self.weight_kind {
            NodeWeighting::Uniform => 1.0 / self.nodes.max(1) as f64,
            NodeWeighting::Decay => 0.5f64.powi(i as i32),
        }
    }

    /// `(i, t - i*s)` for every node at or above the floor.
    pub fn node_timesteps(&self, t: usize) -> Vec<(usize, usize)> {
        (1..=self.nodes)
            .map_while(|i| {
                t.checked_sub(i * self.stride)
                    .filter(|&cur| cur >= self.t_floor)
                    .map(|cur| (i, cur))
            })
            .collect()
    }
}

/// One trajectory node.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySample<F> {
    /// Student branch, stepped with the replica.
    pub z_hat_t: Tensor<F>,
    /// High-quality branch, stepped with the teacher.
    pub z_t: Tensor<F>,
    pub t: usize,
    pub weight: f64,
}

/// Walks both branches from `t` down the configured nodes.
#[allow(clippy::too_many_arguments)]
pub fn rollout<F: Real>(
    zh_t: &Tensor<F>,
    z_t: &Tensor<F>,
    t: usize,
    cfg: &DasmConfig,
    lora: &VelocityNet<F>,
    teacher: &VelocityNet<F>,
    cond: &[Cond],
    sched: &TimestepSchedule,
    w_cfg: f64,
) -> Result<Vec<TrajectorySample<F>>> {
    cfg.validate()?;
    shape_check(zh_t.shape(), z_t.shape())?;
    let mut out = Vec::new();
    let (mut zh, mut z) = (zh_t.clone(), z_t.clone());
    for (i, cur) in cfg.node_timesteps(t) {
        let pre = cur + cfg.stride;
        let vh = lora.cfg_predict(&zh, pre, cond, w_cfg)?;
        let v = teacher.cfg_predict(&z, pre, cond, w_cfg)?;
        zh = euler_step(&zh, &vh, pre, cur, sched)?;
        z = euler_step(&z, &v, pre, cur, sched)?;
        out.push(TrajectorySample {
            z_hat_t: zh.clone(),
            z_t: z.clone(),
            t: cur,
            weight: cfg.weight(i),
        });
    }
    Ok(out)
}

/// Base TSD gradient plus the weighted TSD gradient of every node.
pub fn accumulate_tsd<F: Real>(
    base: (&Tensor<F>, &Tensor<F>, usize),
    trajectory: &[TrajectorySample<F>],
    nets: &ScoreNets<'_, F>,
    cond: &[Cond],
    weights: &LossWeights,
) -> Result<Tensor<F>> {
    let (zh_t, z_t, t) = base;
    let mut last = t;
    for node in trajectory {
        shape_check(zh_t.shape(), node.z_hat_t.shape())?;
        shape_check(zh_t.shape(), node.z_t.shape())?;
        if node.t >= last {
            return Err(invalid(format!(
                "trajectory node at {} does not follow {}",
                node.t, last
            )));
        }
        last = node.t;
    }
    let mut total = nets.terms_at(zh_t, z_t, t, cond, weights)?.tsd;
    for node in trajectory {
        let g = nets
            .terms_at(&node.z_hat_t, &node.z_t, node.t, cond, weights)?
            .tsd;
        total.axpy(F::c(node.weight), &g)?;
    }
    Ok(total)
}

/// Result of the fused rollout used during training.
pub struct DasmOutput<F> {
    pub total: Tensor<F>,
    pub base: ScoreTerms<F>,
    pub trajectory: Vec<TrajectorySample<F>>,
}

/// Rollout and accumulation in one pass.
///
/// The replica and teacher predictions a node needs for its TSD term are the
/// same ones that step the trajectory to the next node, so each node costs
/// one prediction set instead of two. Equal to `rollout` followed by
/// `accumulate_tsd`.
pub fn rollout_accumulate<F: Real>(
    nets: &ScoreNets<'_, F>,
    zh_t: &Tensor<F>,
    z_t: &Tensor<F>,
    t: usize,
    cfg: &DasmConfig,
    cond: &[Cond],
    weights: &LossWeights,
) -> Result<DasmOutput<F>> {
    cfg.validate()?;
    let p = nets.predictions(zh_t, z_t, t, cond, weights.w_cfg)?;
    let base = nets.terms_from(&p, zh_t, z_t, t, weights)?;
    let mut total = base.tsd.clone();
    let mut trajectory = Vec::new();
    let (mut zh, mut z, mut pred) = (zh_t.clone(), z_t.clone(), p);
    for (i, cur) in cfg.node_timesteps(t) {
        let pre = cur + cfg.stride;
        zh = euler_step(&zh, &pred.lora_fake, pre, cur, nets.sched)?;
        z = euler_step(&z, &pred.teacher_real, pre, cur, nets.sched)?;
        pred = nets.predictions(&zh, &z, cur, cond, weights.w_cfg)?;
        let w = cfg.weight(i);
        total.axpy(F::c(w), &nets.terms_from(&pred, &zh, &z, cur, weights)?.tsd)?;
        trajectory.push(TrajectorySample {
            z_hat_t: zh.clone(),
            z_t: z.clone(),
            t: cur,
            weight: w,
        });
    }
    Ok(DasmOutput {
        total,
        base,
        trajectory,
    })
}
