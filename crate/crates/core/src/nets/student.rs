//! One-step generator: upsample, adapted encoder, one denoiser call, frozen decoder.

use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use super::autoencoder::AutoEncoder;
use super::layers::{Ctx, Module, ParamKind, Trainable};
use super::velocity::{Cond, VelocityNet};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::real::Real;
use crate::rng::{derived, streams};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug)]
pub struct Student<F> {
    pub ae: AutoEncoder<F>,
    pub denoiser: VelocityNet<F>,
    /// Timestep fed to the denoiser.
    pub t_cond: usize,
    /// Output resolution over input resolution.
    pub factor: usize,
    evals: AtomicU64,
}

impl<F: Real> Clone for Student<F> {
    fn clone(&self) -> Self {
        Self {
            ae: self.ae.clone(),
            denoiser: self.denoiser.clone(),
            t_cond: self.t_cond,
            factor: self.factor,
            evals: AtomicU64::new(self.evals()),
        }
    }
}

/// Tape handles for one student pass.
pub struct StudentGraph {
    pub latent: Var,
    pub image: Var,
}

impl<F: Real> Student<F> {
    /// Builds a student whose output equals `decode(encode(upsample(x)))` at init.
    ///
    /// The denoiser copies the teacher trunk and zeroes its output conv, so
    /// the residual correction starts at exactly zero.
    pub fn new(
        ae: &AutoEncoder<F>,
        teacher: &VelocityNet<F>,
        factor: usize,
        t_cond: usize,
        encoder_rank: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = derived(seed, streams::LORA, 1);
        let mut ae = ae.clone();
        ae.prefix = "student.ae".into();
        ae.encoder_frozen = false;
        ae.decoder_frozen = true;
        for conv in ae.encoder.iter_mut() {
            conv.lora = None;
            conv.attach_lora(encoder_rank.min(conv.fan_in()), 1.0, &mut rng)?;
        }
        for conv in ae.decoder.iter_mut() {
            conv.lora = None;
        }
        let mut denoiser = teacher.clone();
        denoiser.strip_lora();
        denoiser.prefix = "student.den".into();
        denoiser.residual = true;
        denoiser.conv_out.zero();
        Ok(Self {
            ae,
            denoiser,
            t_cond,
            factor,
            evals: AtomicU64::new(0),
        })
    }

    /// Number of denoiser evaluations since construction or the last reset.
    pub fn evals(&self) -> u64 {
        self.evals.load(Ordering::Relaxed)
    }

    pub fn reset_evals(&self) {
        self.evals.store(0, Ordering::Relaxed);
    }

    /// Bilinearly upsampled `[n, 3, f*h, f*w]` input batch.
    pub fn prepare_input(&self, lq: &[&ImageBuffer]) -> Result<Tensor<F>> {
        if self.factor == 0 {
            return Err(Error::InvalidArgument("upscale factor must be >= 1".into()));
        }
        let up: Vec<ImageBuffer> = lq
            .iter()
            .map(|x| x.resize_bilinear(x.height() * self.factor, x.width() * self.factor))
            .collect();
        let refs: Vec<&ImageBuffer> = up.iter().collect();
        ImageBuffer::batch(&refs)
    }

    /// Graph for upsampled inputs `x_up`.
    ///
    /// Encoder base weights never train; only its adapters do. Every denoiser
    /// parameter is trainable under `Base` or `All`. The decoder is frozen.
    pub fn forward_graph(&self, ctx: &mut Ctx<'_, F>, x_up: Var) -> Result<StudentGraph> {
        let n = ctx.tape.value(x_up).shape()[0];
        let enc_policy = match ctx.trainable {
            Trainable::Nothing | Trainable::Base => Trainable::Nothing,
            Trainable::Adapters | Trainable::All => Trainable::Adapters,
        };
        let enc = ctx.with(enc_policy, |ctx| self.ae.encode_graph(ctx, x_up));
        let t: Vec<usize> = core::iter::repeat_n(self.t_cond, n).collect();
        let cond: Vec<Cond> = core::iter::repeat_n(Cond::Null, n).collect();
        let latent = self.denoiser.forward(ctx, enc.latent, &t, &cond)?;
        self.evals.fetch_add(n as u64, Ordering::Relaxed);
        let image = self.ae.decode_graph(ctx, latent);
        Ok(StudentGraph { latent, image })
    }

    /// Inference on a batch of low-resolution images.
    pub fn forward_batch(&self, lq: &[&ImageBuffer]) -> Result<(Tensor<F>, Vec<ImageBuffer>)> {
        let x = self.prepare_input(lq)?;
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, Trainable::Nothing);
        let xv = ctx.tape.constant(x);
        let g = self.forward_graph(&mut ctx, xv)?;
        let img = tape.value(g.image);
        let images = (0..lq.len())
            .map(|i| ImageBuffer::from_tensor(img, i))
            .collect::<Result<Vec<_>>>()?;
        Ok((tape.value(g.latent).clone(), images))
    }

    /// Latent and clamped output image for one input.
    pub fn student_forward(&self, lq: &ImageBuffer) -> Result<(Tensor<F>, ImageBuffer)> {
        let (z, mut imgs) = self.forward_batch(&[lq])?;
        Ok((z, imgs.remove(0)))
    }
}

impl<F: Real> Module<F> for Student<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, &Tensor<F>)) {
        self.ae.visit(f);
        self.denoiser.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<F>)) {
        self.ae.visit_mut(f);
        self.denoiser.visit_mut(f);
    }
}
