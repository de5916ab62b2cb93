use proptest::prelude::*;

use sr_distill_core::dasm::{rollout, DasmConfig};
use sr_distill_core::degradation::{degrade, synth_hq, DegradationRecipe};
use sr_distill_core::losses::{LossWeights, ScoreNets, ScoreParam};
use sr_distill_core::nets::{lora_wrap, Cond, Module, ParamKind, VelocityConfig, VelocityNet};
use sr_distill_core::rng::seeded;
use sr_distill_core::scheduler::{add_noise, euler_step, TimestepSchedule};
use sr_distill_core::tensor::Tensor;

fn small_net(seed: u64) -> VelocityNet<f64> {
    VelocityNet::new(
        VelocityConfig {
            latent_channels: 2,
            width: 3,
            time_dim: 4,
            num_classes: 2,
        },
        &mut seeded(seed),
    )
}

fn randomise_adapters(net: &mut VelocityNet<f64>, seed: u64) {
    let mut rng = seeded(seed);
    net.visit_mut(&mut |_, k, t| {
        if k == ParamKind::Adapter {
            *t = Tensor::randn(t.shape(), 0.3, &mut rng);
        }
    });
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn degraded_images_stay_in_unit_range(seed in 0u64..1000, blur in 0.0f64..2.0, noise in 0.0f64..0.3, keep in 0.05f64..1.0) {
        let hq = &synth_hq(1, 16, seed).unwrap()[0].image;
        let recipe = DegradationRecipe {
            blur_sigma_range: [0.0, blur],
            noise_sigma_range: [0.0, noise],
            compression_keep: keep,
            ..DegradationRecipe::default()
        };
        let a = degrade(hq, &recipe, &mut seeded(seed)).unwrap();
        prop_assert_eq!((a.height(), a.width()), (4, 4));
        prop_assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(a, degrade(hq, &recipe, &mut seeded(seed)).unwrap());
    }

    #[test]
    fn fresh_adapters_leave_the_net_unchanged(seed in 0u64..500, t in 0usize..=1000, rank in 1usize..4) {
        let base = small_net(seed);
        let wrapped = lora_wrap(&base, rank, 1.0, seed + 1).unwrap();
        let z = Tensor::randn(&[2, 2, 4, 4], 1.0, &mut seeded(seed + 2));
        let cond = [Cond::Class(1), Cond::Null];
        let a = base.predict_at(&z, t, &cond).unwrap();
        prop_assert_eq!(a.shape(), z.shape());
        prop_assert_eq!(a, wrapped.predict_at(&z, t, &cond).unwrap());
    }

    #[test]
    fn null_condition_is_stable(seed in 0u64..500, t in 0usize..=1000) {
        let net = small_net(seed);
        let z = Tensor::randn(&[1, 2, 4, 4], 1.0, &mut seeded(seed));
        prop_assert_eq!(net.predict_at(&z, t, &[Cond::Null]).unwrap(), net.predict_at(&z, t, &[Cond::Null]).unwrap());
    }

    #[test]
    fn tsd_is_the_lambda_blend(seed in 0u64..300, lambda in 0.0f64..=1.0, t in 50usize..=950, cfg in 1.0f64..8.0, eps_form in any::<bool>()) {
        let teacher = small_net(seed);
        let mut lora = lora_wrap(&teacher, 2, 1.0, seed).unwrap();
        randomise_adapters(&mut lora, seed + 7);
        let sched = TimestepSchedule::linear(1000).unwrap();
        let nets = ScoreNets::new(&teacher, &lora, &sched);
        let mut rng = seeded(seed + 3);
        let (zh, z, eps) = (
            Tensor::randn(&[2, 2, 4, 4], 1.0, &mut rng),
            Tensor::randn(&[2, 2, 4, 4], 1.0, &mut rng),
            Tensor::randn(&[2, 2, 4, 4], 1.0, &mut rng),
        );
        let score_param = if eps_form { ScoreParam::Epsilon } else { ScoreParam::Velocity };
        let w = LossWeights { lambda, w_cfg: cfg, score_param, ..LossWeights::default() };
        let cond = [Cond::Class(0), Cond::Class(1)];
        let tsd = nets.tsd_gradient(&zh, &z, t, &eps, &cond, &w).unwrap();
        let tsm = nets.tsm_gradient(&zh, &z, t, &eps, &cond, &w).unwrap();
        let vsd = nets.vsd_gradient(&zh, t, &eps, &cond, &w).unwrap();
        let blend = tsm.scale(1.0 - lambda).add(&vsd.scale(lambda)).unwrap();
        for i in 0..tsd.len() {
            let scale = [tsd.data()[i], blend.data()[i], tsm.data()[i], vsd.data()[i]]
                .iter().fold(1e-300f64, |m, v| m.max(v.abs()));
            prop_assert!((tsd.data()[i] - blend.data()[i]).abs() / scale <= 1e-6);
        }
    }

    #[test]
    fn trajectory_follows_euler_recurrence(seed in 0u64..200, t in 0usize..=1000, nodes in 0usize..6, stride in 1usize..120) {
        let teacher = small_net(seed);
        let mut lora = lora_wrap(&teacher, 2, 1.0, seed).unwrap();
        randomise_adapters(&mut lora, seed + 1);
        let sched = TimestepSchedule::linear(1000).unwrap();
        let mut rng = seeded(seed + 9);
        let z0h = Tensor::randn(&[1, 2, 4, 4], 1.0, &mut rng);
        let z0 = Tensor::randn(&[1, 2, 4, 4], 1.0, &mut rng);
        let eps = Tensor::randn(&[1, 2, 4, 4], 1.0, &mut rng);
        let (zh, z) = (add_noise(&z0h, &eps, t, &sched).unwrap(), add_noise(&z0, &eps, t, &sched).unwrap());
        let cfg = DasmConfig { nodes, stride, ..DasmConfig::default() };
        let cond = [Cond::Class(1)];
        let traj = rollout(&zh, &z, t, &cfg, &lora, &teacher, &cond, &sched, 7.5).unwrap();
        prop_assert!(traj.len() <= nodes);
        let (mut ph, mut pz, mut pt) = (zh, z, t);
        for node in &traj {
            prop_assert_eq!(node.t + stride, pt);
            prop_assert!(node.t >= cfg.t_floor);
            let vh = lora.cfg_predict(&ph, pt, &cond, 7.5).unwrap();
            let v = teacher.cfg_predict(&pz, pt, &cond, 7.5).unwrap();
            prop_assert_eq!(&node.z_hat_t, &euler_step(&ph, &vh, pt, node.t, &sched).unwrap());
            prop_assert_eq!(&node.z_t, &euler_step(&pz, &v, pt, node.t, &sched).unwrap());
            (ph, pz, pt) = (node.z_hat_t.clone(), node.z_t.clone(), node.t);
        }
        let expected = (1..=nodes).take_while(|i| t >= i * stride && t - i * stride >= cfg.t_floor).count();
        prop_assert_eq!(traj.len(), expected);
    }
}
