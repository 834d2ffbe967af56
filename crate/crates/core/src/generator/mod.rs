//! Agent-aware variational autoencoder over observations.

mod check;
mod loss;
mod saliency;
mod train;

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::Observation;
use crate::error::{Error, Result};
use crate::io::checkpoint::{check_names, sequential_from, Checkpoint, ModelKind};
use crate::nn::kernels::conv_out;
use crate::nn::{ForwardOpts, ForwardPass, LayerSpec, NodeId, Sequential, Tape, Tensor};

pub use check::{generator_loss_gradcheck, GeneratorCheckInput};
pub use loss::{agent_perception_loss, attentive_recon_loss, expand_masks, kl_to_standard_normal, record_loss, LossNodes, LossWeights};
pub use saliency::{box_blur, saliency_mask, saliency_masks, SaliencyMask};
pub use train::{train_generator, GeneratorConfig, LossMode, StepLoss, TrainCurves};

/// Shape parameters of the encoder/decoder pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorArch {
    pub input: [usize; 3],
    pub latent: usize,
    pub base_filters: usize,
    pub stages: usize,
}

impl GeneratorArch {
    pub fn validate(&self) -> Result<()> {
        let [k, h, w] = self.input;
        if k == 0 || h == 0 || w == 0 || self.latent == 0 || self.base_filters == 0 || self.stages == 0 {
            return Err(Error::config("generator extents must be positive"));
        }
        if h != w {
            return Err(Error::config("generator expects square observations"));
        }
        let native = h.next_power_of_two();
        if native >> self.stages == 0 {
            return Err(Error::config(format!("{} stages are too many for {h}x{w} inputs", self.stages)));
        }
        Ok(())
    }

    fn top_filters(&self) -> usize {
        self.base_filters << (self.stages - 1)
    }

    /// Conv stages (3x3, stride 2) with batch-norm and ReLU, then a dense
    /// head emitting `[mu, log_var]`.
    pub fn encoder_specs(&self) -> Vec<LayerSpec> {
        let [k, h, _] = self.input;
        let mut specs = Vec::new();
        let (mut c, mut e) = (k, h);
        for i in 0..self.stages {
            let f = self.base_filters << i;
            specs.push(LayerSpec::conv(c, f));
            specs.push(LayerSpec::BatchNorm { features: f });
            specs.push(LayerSpec::Relu);
            c = f;
            e = conv_out(e, 3, 2, 1).expect("validated extent");
        }
        specs.push(LayerSpec::Flatten);
        specs.push(LayerSpec::dense(c * e * e, 2 * self.latent));
        specs
    }

    /// Mirror of the encoder: dense projection, stride-2 deconvs halving the
    /// channel count, sigmoid output and a centre crop to the input size.
    pub fn decoder_specs(&self) -> Vec<LayerSpec> {
        let [k, h, w] = self.input;
        let start = h.next_power_of_two() >> self.stages;
        let top = self.top_filters();
        let mut specs = vec![
            LayerSpec::dense(self.latent, top * start * start),
            LayerSpec::Relu,
            LayerSpec::Unflatten { channels: top, height: start, width: start },
        ];
        for i in (0..self.stages).rev() {
            let cin = self.base_filters << i;
            if i == 0 {
                specs.push(LayerSpec::deconv(cin, k));
            } else {
                let cout = self.base_filters << (i - 1);
                specs.push(LayerSpec::deconv(cin, cout));
                specs.push(LayerSpec::BatchNorm { features: cout });
                specs.push(LayerSpec::Relu);
            }
        }
        specs.push(LayerSpec::Sigmoid);
        specs.push(LayerSpec::Crop { height: h, width: w });
        specs
    }
}

const OUTPUT_BIAS_INIT: f32 = -4.0;

/// Encoder `f(s) = (mu, log_var)` and decoder `g(mu, sigma, z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    arch: GeneratorArch,
    encoder: Sequential,
    decoder: Sequential,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(arch: GeneratorArch, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let encoder = Sequential::new(arch.encoder_specs(), rng);
        let mut decoder = Sequential::new(arch.decoder_specs(), rng);
        // Start from a dark canvas: pixels the mask ignores then stay near 0.
        if let Some(last) = decoder.layers_mut().iter_mut().rev().find(|l| l.params.len() == 2) {
            last.params[1].data_mut().iter_mut().for_each(|b| *b = OUTPUT_BIAS_INIT);
        }
        Ok(Self { arch, encoder, decoder })
    }

    pub fn from_parts(arch: GeneratorArch, encoder: Sequential, decoder: Sequential) -> Result<Self> {
        arch.validate()?;
        if encoder.specs() != arch.encoder_specs() || decoder.specs() != arch.decoder_specs() {
            return Err(Error::dim("encoder/decoder layers do not match the architecture"));
        }
        Ok(Self { arch, encoder, decoder })
    }

    pub fn arch(&self) -> &GeneratorArch {
        &self.arch
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent
    }

    pub fn encoder(&self) -> &Sequential {
        &self.encoder
    }

    pub fn decoder(&self) -> &Sequential {
        &self.decoder
    }

    pub(crate) fn nets_mut(&mut self) -> (&mut Sequential, &mut Sequential) {
        (&mut self.encoder, &mut self.decoder)
    }

    fn check_batch(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1..] != self.arch.input {
            return Err(Error::dim(format!("generator expects [N, {:?}], got {shape:?}", self.arch.input)));
        }
        Ok(())
    }

    /// Records the encoder; returns `(pass, mu, log_var)` with `[N, n]` latents.
    pub fn encode_on_tape(&self, tape: &mut Tape, x: NodeId, opts: ForwardOpts) -> Result<(ForwardPass, NodeId, NodeId)> {
        self.check_batch(tape.shape(x))?;
        let pass = self.encoder.forward(tape, x, opts)?;
        let n = self.arch.latent;
        let mu = tape.slice_cols(pass.output, 0, n)?;
        let log_var = tape.slice_cols(pass.output, n, n)?;
        Ok((pass, mu, log_var))
    }

    /// Records `decoder(mu + exp(log_var / 2) * z)`; `z` is a constant `[N, n]` tensor.
    pub fn decode_on_tape(&self, tape: &mut Tape, mu: NodeId, log_var: NodeId, z: &Tensor, opts: ForwardOpts) -> Result<ForwardPass> {
        let n = self.arch.latent;
        let s = tape.shape(mu).to_vec();
        if s.len() != 2 || s[1] != n || tape.shape(log_var) != s.as_slice() || z.shape() != s.as_slice() {
            return Err(Error::dim(format!("latent shapes {:?}/{:?}/{:?} for n={n}", s, tape.shape(log_var), z.shape())));
        }
        if !(tape.value(mu).is_finite() && tape.value(log_var).is_finite() && z.is_finite()) {
            return Err(Error::numeric("non-finite latent vector"));
        }
        let half = tape.scale(log_var, 0.5);
        let sigma = tape.exp(half);
        let zc = tape.constant(z.clone());
        let noise = tape.mul(sigma, zc)?;
        let latent = tape.add(mu, noise)?;
        self.decoder.forward(tape, latent, opts)
    }

    /// `(mu, log_var)` for every observation of an `[N, k, H, W]` batch.
    pub fn encode_batch(&self, batch: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_batch(batch.shape())?;
        let out = self.encoder.infer(batch)?;
        let (nb, n) = (batch.shape()[0], self.arch.latent);
        let mut mu = Vec::with_capacity(nb * n);
        let mut lv = Vec::with_capacity(nb * n);
        for row in out.data().chunks(2 * n) {
            mu.extend_from_slice(&row[..n]);
            lv.extend_from_slice(&row[n..]);
        }
        Ok((Tensor::new(vec![nb, n], mu)?, Tensor::new(vec![nb, n], lv)?))
    }

    pub fn encode(&self, s: &Observation) -> Result<(Vec<f32>, Vec<f32>)> {
        let (mu, lv) = self.encode_batch(&s.batched())?;
        Ok((mu.into_data(), lv.into_data()))
    }

    /// Decodes `[N, n]` latents into an `[N, k, H, W]` batch.
    pub fn decode_batch(&self, mu: &Tensor, log_var: &Tensor, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new(crate::nn::GradMode::Standard);
        let m = tape.constant(mu.clone());
        let l = tape.constant(log_var.clone());
        let pass = self.decode_on_tape(&mut tape, m, l, z, ForwardOpts::EVAL)?;
        Ok(tape.value(pass.output).clone())
    }

    pub fn decode(&self, mu: &[f32], log_var: &[f32], z: &[f32]) -> Result<Observation> {
        let n = self.arch.latent;
        if mu.len() != n || log_var.len() != n || z.len() != n {
            return Err(Error::dim(format!("latent vectors must have length {n}")));
        }
        let t = |v: &[f32]| Tensor::new(vec![1, n], v.to_vec());
        let out = self.decode_batch(&t(mu)?, &t(log_var)?, &t(z)?)?;
        let [k, h, w] = self.arch.input;
        Observation::new(out.reshape(&[k, h, w])?)
    }

    /// Mean reconstruction `g(f(s), z = 0)` of every observation in a batch.
    pub fn reconstruct_batch(&self, batch: &Tensor) -> Result<Tensor> {
        let (mu, lv) = self.encode_batch(batch)?;
        let z = Tensor::zeros(mu.shape());
        self.decode_batch(&mu, &lv, &z)
    }

    pub fn reconstruct(&self, s: &Observation) -> Result<Observation> {
        let out = self.reconstruct_batch(&s.batched())?;
        let [k, h, w] = self.arch.input;
        Observation::new(out.reshape(&[k, h, w])?)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors: Vec<(String, Tensor)> = self.encoder.named_tensors("enc.").into_iter().map(|(n, t)| (n, t.clone())).collect();
        tensors.extend(self.decoder.named_tensors("dec.").into_iter().map(|(n, t)| (n, t.clone())));
        Checkpoint::new(ModelKind::Generator, &self.arch, tensors)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let arch: GeneratorArch = ck.architecture()?;
        arch.validate().map_err(|e| Error::Format { offset: 9, msg: e.to_string() })?;
        let encoder = sequential_from(ck, arch.encoder_specs(), "enc.")?;
        let decoder = sequential_from(ck, arch.decoder_specs(), "dec.")?;
        let mut names = encoder.named_tensors("enc.");
        names.extend(decoder.named_tensors("dec."));
        check_names(ck, &names)?;
        Self::from_parts(arch, encoder, decoder)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path, ModelKind::Generator)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{reset, EnvConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn small_arch() -> GeneratorArch {
        GeneratorArch { input: [2, 32, 32], latent: 8, base_filters: 4, stages: 3 }
    }

    fn gen() -> Generator {
        Generator::new(small_arch(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    #[test]
    fn encoder_emits_two_n_reals_deterministically() {
        let g = gen();
        let (_, obs) = reset(&EnvConfig::minipong(0)).unwrap();
        let (mu, lv) = g.encode(&obs).unwrap();
        assert_eq!((mu.len(), lv.len()), (8, 8));
        assert_eq!(g.encode(&obs).unwrap(), (mu, lv));
        assert_eq!(g.encoder().output_shape(&[1, 2, 32, 32]).unwrap(), vec![1, 16]);
    }

    #[test]
    fn decoder_output_in_unit_range_and_shaped() {
        let g = gen();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mu = Tensor::randn(&[1, 8], 3.0, &mut rng);
        let s = g.decode(mu.data(), &[0.0; 8], &[0.5; 8]).unwrap();
        assert_eq!(s.shape(), [2, 32, 32]);
        assert!(s.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_noise_decodes_the_mean() {
        let g = gen();
        let mu = [0.3f32; 8];
        let a = g.decode(&mu, &[1.5; 8], &[0.0; 8]).unwrap();
        let b = g.decode(&mu, &[-4.0; 8], &[0.0; 8]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_latent_is_numeric_error() {
        let g = gen();
        let mut mu = [0.0f32; 8];
        mu[2] = f32::NAN;
        assert!(matches!(g.decode(&mu, &[0.0; 8], &[0.0; 8]), Err(Error::Numeric(_))));
    }

    #[test]
    fn large_decoder_crops_128_to_84() {
        let arch = GeneratorArch { input: [2, 84, 84], latent: 100, base_filters: 32, stages: 4 };
        let dec = arch.decoder_specs();
        let mut s = vec![1, 100];
        for spec in &dec[..dec.len() - 1] {
            s = spec.output_shape(&s).unwrap();
        }
        assert_eq!(s, vec![1, 2, 128, 128]);
        assert_eq!(dec.last().unwrap().output_shape(&s).unwrap(), vec![1, 2, 84, 84]);
        let enc = arch.encoder_specs();
        let filters: Vec<usize> = enc
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Conv2d { out_channels, .. } => Some(*out_channels),
                _ => None,
            })
            .collect();
        assert_eq!(filters, vec![32, 64, 128, 256]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let g = gen();
        let bytes = g.checkpoint().unwrap().to_bytes();
        let back = Generator::from_checkpoint(&Checkpoint::from_bytes(&bytes, ModelKind::Generator).unwrap()).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.checkpoint().unwrap().to_bytes(), bytes);
        assert!(Checkpoint::from_bytes(&bytes, ModelKind::Agent).is_err());
    }
}
