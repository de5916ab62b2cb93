//! Convolutional latent codec with 4x spatial reduction.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Conv2d, Ctx, Module, ParamKind, Trainable};
use crate::error::{Error, Result};
use crate::image::{ImageBuffer, CHANNELS};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Spatial reduction between image and latent.
pub const REDUCTION: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeConfig {
    /// Hidden widths at full and reduced resolution.
    pub widths: [usize; 2],
    pub latent_channels: usize,
}

impl Default for AeConfig {
    fn default() -> Self {
        Self {
            widths: [16, 32],
            latent_channels: 4,
        }
    }
}

/// Encoder activations used as perceptual features, plus the latent.
pub struct Encoded {
    pub latent: Var,
    pub features: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AutoEncoder<F> {
    pub config: AeConfig,
    pub prefix: String,
    /// Multiplies raw encoder output so latents have roughly unit spread.
    pub latent_scale: f64,
    pub encoder: Vec<Conv2d<F>>,
    pub decoder: Vec<Conv2d<F>>,
    pub encoder_frozen: bool,
    pub decoder_frozen: bool,
}

impl<F: Real> AutoEncoder<F> {
    pub fn new<R: Rng + ?Sized>(config: AeConfig, rng: &mut R) -> Self {
        let [w1, w2] = config.widths;
        let lat = config.latent_channels;
        let encoder = vec![
            Conv2d::new("enc0", CHANNELS, w1, 3, 1, rng),
            Conv2d::new("enc1", w1, w2, 3, 2, rng),
            Conv2d::new("enc2", w2, w2, 3, 2, rng),
            Conv2d::new("enc3", w2, lat, 3, 1, rng),
        ];
        let decoder = vec![
            Conv2d::new("dec0", lat, w2, 3, 1, rng),
            Conv2d::new("dec1", w2, w2, 3, 1, rng),
            Conv2d::new("dec2", w2, w1, 3, 1, rng),
            Conv2d::new("dec3", w1, CHANNELS, 3, 1, rng),
        ];
        Self {
            config,
            prefix: "ae".into(),
            latent_scale: 1.0,
            encoder,
            decoder,
            encoder_frozen: false,
            decoder_frozen: false,
        }
    }

    pub fn latent_shape(&self, n: usize, h: usize, w: usize) -> [usize; 4] {
        [n, self.config.latent_channels, h / REDUCTION, w / REDUCTION]
    }

    /// Encoder pass on `[n, 3, h, w]` images in `[0, 1]`.
    pub fn encode_graph(&self, ctx: &mut Ctx<'_, F>, x: Var) -> Encoded {
        let policy = if self.encoder_frozen {
            Trainable::Nothing
        } else {
            ctx.trainable
        };
        ctx.with(policy, |ctx| {
            let prefix = self.prefix.as_str();
            let mut h = ctx.tape.affine(x, F::c(2.0), -F::one());
            let mut features = Vec::with_capacity(3);
            for layer in &self.encoder[..3] {
                h = layer.forward(ctx, prefix, h);
                h = ctx.tape.silu(h);
                features.push(h);
            }
            let z = self.encoder[3].forward(ctx, prefix, h);
            let latent = ctx.tape.scale(z, F::c(self.latent_scale));
            Encoded { latent, features }
        })
    }

    /// Decoder pass; output is unclamped so losses keep their gradients.
    pub fn decode_graph(&self, ctx: &mut Ctx<'_, F>, z: Var) -> Var {
        let policy = if self.decoder_frozen {
            Trainable::Nothing
        } else {
            ctx.trainable
        };
        ctx.with(policy, |ctx| {
            let prefix = self.prefix.as_str();
            let h = ctx.tape.scale(z, F::c(1.0 / self.latent_scale));
            let h = self.decoder[0].forward(ctx, prefix, h);
            let h = ctx.tape.silu(h);
            let h = ctx.tape.upsample2(h);
            let h = self.decoder[1].forward(ctx, prefix, h);
            let h = ctx.tape.silu(h);
            let h = ctx.tape.upsample2(h);
            let h = self.decoder[2].forward(ctx, prefix, h);
            let h = ctx.tape.silu(h);
            let h = self.decoder[3].forward(ctx, prefix, h);
            ctx.tape.affine(h, F::c(0.5), F::c(0.5))
        })
    }

    fn check_image_dims(h: usize, w: usize) -> Result<()> {
        if !h.is_multiple_of(REDUCTION) || !w.is_multiple_of(REDUCTION) || h == 0 || w == 0 {
            return Err(Error::InvalidSize(format!(
                "image {h}x{w} not divisible by {REDUCTION}"
            )));
        }
        Ok(())
    }

    /// Latents `[n, c, h/4, w/4]` for a batch of images.
    pub fn encode_images(&self, images: &[&ImageBuffer]) -> Result<Tensor<F>> {
        let x = ImageBuffer::batch::<F>(images)?;
        let (_, _, h, w) = x.dims4();
        Self::check_image_dims(h, w)?;
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, Trainable::Nothing);
        let xv = ctx.tape.constant(x);
        let enc = self.encode_graph(&mut ctx, xv);
        Ok(tape.value(enc.latent).clone())
    }

    pub fn encode(&self, image: &ImageBuffer) -> Result<Tensor<F>> {
        self.encode_images(&[image])
    }

    /// Decodes a latent batch into clamped images.
    pub fn decode(&self, z: &Tensor<F>) -> Result<Vec<ImageBuffer>> {
        if z.shape().len() != 4 || z.shape()[1] != self.config.latent_channels {
            return Err(Error::ShapeMismatch {
                expected: vec![0, self.config.latent_channels, 0, 0],
                got: z.shape().to_vec(),
            });
        }
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, Trainable::Nothing);
        let zv = ctx.tape.constant(z.clone());
        let out = self.decode_graph(&mut ctx, zv);
        let t = tape.value(out);
        (0..z.shape()[0])
            .map(|i| ImageBuffer::from_tensor(t, i))
            .collect()
    }

    pub fn visit_decoder(&self, f: &mut dyn FnMut(&str, ParamKind, &Tensor<F>)) {
        for l in &self.decoder {
            l.visit(&self.prefix, f);
        }
    }

    /// Content hash of the decoder weights, independent of the name prefix.
    pub fn decoder_checksum(&self) -> String {
        let mut h = super::Checksum::new();
        for l in &self.decoder {
            l.visit("", &mut |name, _, t| h.update(name, t));
        }
        h.finish()
    }
}

impl<F: Real> Module<F> for AutoEncoder<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, &Tensor<F>)) {
        for l in self.encoder.iter().chain(&self.decoder) {
            l.visit(&self.prefix, f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<F>)) {
        let prefix = self.prefix.clone();
        for l in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            l.visit_mut(&prefix, f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn encode_shape_contract() {
        let ae = AutoEncoder::<f32>::new(AeConfig::default(), &mut seeded(0));
        let img = ImageBuffer::filled(64, 64, [0.3, 0.6, 0.9]);
        let z = ae.encode(&img).unwrap();
        assert_eq!(z.shape(), &[1, 4, 16, 16]);
        assert_eq!(ae.encode(&img).unwrap(), z);
        assert!(ae.encode(&ImageBuffer::new(30, 32)).is_err());
    }

    #[test]
    fn decode_is_shape_inverse_and_clamped() {
        let ae = AutoEncoder::<f32>::new(AeConfig::default(), &mut seeded(1));
        let z = Tensor::randn(&[2, 4, 16, 16], 3.0, &mut seeded(2));
        let imgs = ae.decode(&z).unwrap();
        assert_eq!(imgs.len(), 2);
        assert_eq!((imgs[0].height(), imgs[0].width()), (64, 64));
        assert!(imgs
            .iter()
            .all(|i| i.data().iter().all(|&v| (0.0..=1.0).contains(&v))));
        assert!(ae.decode(&Tensor::zeros(&[1, 3, 4, 4])).is_err());
    }

    #[test]
    fn frozen_decoder_binds_nothing() {
        let mut ae = AutoEncoder::<f64>::new(
            AeConfig {
                widths: [2, 3],
                latent_channels: 2,
            },
            &mut seeded(3),
        );
        ae.decoder_frozen = true;
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, Trainable::All);
        let x = ctx.tape.constant(Tensor::full(&[1, 3, 8, 8], 0.5));
        let enc = ae.encode_graph(&mut ctx, x);
        let _ = ae.decode_graph(&mut ctx, enc.latent);
        assert!(ctx.bound_names().all(|n| n.contains(".enc")));
        assert_eq!(ctx.bound_names().count(), 8);
    }
}
