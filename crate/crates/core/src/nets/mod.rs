//! Networks: latent codec, velocity predictor, one-step student, adapters.

mod autoencoder;
mod layers;
mod student;
mod velocity;

use alloc::string::String;

use sha2::{Digest, Sha256};

pub use autoencoder::{AeConfig, AutoEncoder, Encoded, REDUCTION};
pub use layers::{Conv2d, Ctx, Linear, LoraAdapter, Module, ParamGrads, ParamKind, Trainable};
pub use student::{Student, StudentGraph};
pub use velocity::{timestep_embedding, Cond, ResBlock, VelocityConfig, VelocityNet};

use crate::error::Result;
use crate::real::Real;
use crate::rng::{derived, streams};
use crate::tensor::Tensor;

/// Default adapter rank at desk scale.
pub const DEFAULT_LORA_RANK: usize = 4;
/// Adapter rank used for full-size models.
pub const REFERENCE_LORA_RANK: usize = 64;

/// Incremental SHA-256 over named tensors.
pub struct Checksum(Sha256);

impl Default for Checksum {
    fn default() -> Self {
        Self::new()
    }
}

impl Checksum {
    pub fn new() -> Self {
        Self(Sha256::new())
    }

    pub fn update<F: Real>(&mut self, name: &str, t: &Tensor<F>) {
        self.0.update(name.as_bytes());
        self.0.update([0u8]);
        for &d in t.shape() {
            self.0.update((d as u64).to_le_bytes());
        }
        for &v in t.data() {
            self.0.update(v.f64().to_bits().to_le_bytes());
        }
    }

    pub fn finish(self) -> String {
        use core::fmt::Write;
        let mut s = String::with_capacity(64);
        for b in self.0.finalize() {
            let _ = write!(s, "{b:02x}");
        }
        s
    }
}

/// Hash of every parameter (base and adapters) of a module.
pub fn module_checksum<F: Real, M: Module<F> + ?Sized>(m: &M) -> String {
    let mut h = Checksum::new();
    m.visit(&mut |name, _, t| h.update(name, t));
    h.finish()
}

/// Trainable replica of `base` with fresh adapters on every layer.
pub fn lora_wrap<F: Real>(
    base: &VelocityNet<F>,
    rank: usize,
    scale: f64,
    seed: u64,
) -> Result<VelocityNet<F>> {
    let mut net = base.clone();
    net.strip_lora();
    net.attach_lora(rank, scale, &mut derived(seed, streams::LORA, 0))?;
    Ok(net)
}

/// `null + w * (cond - null)` with both branches evaluated in one batch.
pub fn cfg_predict<F: Real>(
    net: &VelocityNet<F>,
    z_t: &Tensor<F>,
    t: usize,
    cond: &[Cond],
    w_cfg: f64,
) -> Result<Tensor<F>> {
    net.cfg_predict(z_t, t, cond, w_cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn micro() -> VelocityNet<f64> {
        VelocityNet::new(
            VelocityConfig {
                latent_channels: 2,
                width: 3,
                time_dim: 4,
                num_classes: 2,
            },
            &mut seeded(1),
        )
    }

    #[test]
    fn fresh_lora_is_exact_noop() {
        let base = VelocityNet::<f32>::new(VelocityConfig::default(), &mut seeded(4));
        let wrapped = lora_wrap(&base, DEFAULT_LORA_RANK, 1.0, 9).unwrap();
        assert!(wrapped.param_count(Some(ParamKind::Adapter)) > 0);
        assert_eq!(
            wrapped.param_count(Some(ParamKind::Base)),
            base.param_count(None)
        );
        let mut rng = seeded(5);
        for i in 0..100 {
            let z = Tensor::randn(&[1, 4, 8, 8], 1.0, &mut rng);
            let cond = [if i % 3 == 0 {
                Cond::Null
            } else {
                Cond::Class(i % 4)
            }];
            let t = (i * 37) % 1001;
            assert_eq!(
                base.predict_at(&z, t, &cond).unwrap(),
                wrapped.predict_at(&z, t, &cond).unwrap()
            );
        }
    }

    #[test]
    fn lora_rank_above_fan_in_fails() {
        assert!(lora_wrap(&micro(), 5, 1.0, 0).is_err());
        assert!(lora_wrap(&micro(), 0, 1.0, 0).is_err());
    }

    #[test]
    fn checksum_tracks_values_and_names() {
        let net = micro();
        let a = module_checksum(&net);
        assert_eq!(a.len(), 64);
        assert_eq!(a, module_checksum(&net.clone()));
        let mut other = net.clone();
        other.conv_out.bias.data_mut()[0] += 1e-12;
        assert_ne!(a, module_checksum(&other));
        let mut renamed = net.clone();
        renamed.prefix = "x".into();
        assert_ne!(a, module_checksum(&renamed));
    }
}
