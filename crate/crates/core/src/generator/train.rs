use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::expand_masks;
use super::{record_loss, saliency_masks, Generator, GeneratorArch, LossWeights, SaliencyMask};
use crate::agent::QNetwork;
use crate::env::Observation;
use crate::error::{Error, Result};
use crate::io::FrameDataset;
use crate::nn::{Adam, AdamConfig, ForwardOpts, GradMode, Tape, Tensor};

/// Which loss terms are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// Saliency-weighted reconstruction plus agent perception.
    Full,
    /// Saliency-weighted reconstruction only.
    LpOnly,
    /// Uniform-mask reconstruction only.
    PlainVae,
}

impl LossMode {
    pub const ALL: [LossMode; 3] = [LossMode::Full, LossMode::LpOnly, LossMode::PlainVae];

    pub fn weights(self, base: LossWeights) -> LossWeights {
        match self {
            LossMode::Full => base,
            LossMode::LpOnly | LossMode::PlainVae => LossWeights { eta: 0.0, ..base },
        }
    }

    pub fn uses_saliency(self) -> bool {
        self != LossMode::PlainVae
    }

    pub fn name(self) -> &'static str {
        match self {
            LossMode::Full => "full",
            LossMode::LpOnly => "lp-only",
            LossMode::PlainVae => "plain-vae",
        }
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::input(format!("unknown loss mode `{s}` (expected full, lp-only or plain-vae)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub arch: GeneratorArch,
    pub mode: LossMode,
    pub weights: LossWeights,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub blur: bool,
    /// Where to write the last finite generator if training diverges.
    pub diagnostic_path: Option<PathBuf>,
}

impl GeneratorConfig {
    pub fn new(arch: GeneratorArch, mode: LossMode) -> Self {
        Self { arch, mode, weights: LossWeights::default(), epochs: 10, batch_size: 16, lr: 1e-3, blur: true, diagnostic_path: None }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.batch_size < 2 {
            return Err(Error::config("generator batch size must be at least 2"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("invalid generator learning rate {}", self.lr)));
        }
        let LossWeights { eta, lambda } = self.weights;
        if !(eta >= 0.0 && lambda >= 0.0 && eta.is_finite() && lambda.is_finite()) {
            return Err(Error::config("loss weights must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// One logged optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub epoch: usize,
    pub l_p: f32,
    pub l_a: f32,
    pub kl: f32,
    pub total: f32,
    pub eta: f32,
    pub lambda: f32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainCurves {
    pub steps: Vec<StepLoss>,
    /// Mean total loss per epoch.
    pub epoch_totals: Vec<f32>,
    /// Frames whose saliency mask fell back to uniform.
    pub uniform_masks: usize,
}

/// Fits a generator to `dataset` against the frozen `agent`.
pub fn train_generator(dataset: &FrameDataset, agent: &QNetwork, config: &GeneratorConfig, seed: u64) -> Result<(Generator, TrainCurves)> {
    config.validate()?;
    if dataset.len() < config.batch_size {
        return Err(Error::input(format!("dataset has {} frames, fewer than one batch of {}", dataset.len(), config.batch_size)));
    }
    if dataset.shape != config.arch.input || agent.input_shape() != config.arch.input {
        return Err(Error::dim(format!(
            "dataset {:?}, agent {:?} and generator {:?} shapes differ",
            dataset.shape,
            agent.input_shape(),
            config.arch.input
        )));
    }
    let [k, h, w] = config.arch.input;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gen = Generator::new(config.arch.clone(), &mut rng)?;
    let weights = config.mode.weights(config.weights);

    let masks: Vec<SaliencyMask> = if config.mode.uses_saliency() {
        saliency_masks(agent, &dataset.frames, config.blur)?
    } else {
        vec![SaliencyMask::uniform(h, w); dataset.len()]
    };
    let mut curves = TrainCurves { uniform_masks: masks.iter().filter(|m| m.uniform_fallback).count(), ..Default::default() };
    if config.mode.uses_saliency() && curves.uniform_masks > 0 {
        log::warn!("{} of {} saliency masks fell back to uniform", curves.uniform_masks, dataset.len());
    }
    let q_all = agent.q_values_batch(&Observation::batch(&dataset.frames)?)?;
    let m = agent.action_count();

    let (mut adam_enc, mut adam_dec) = (Adam::new(AdamConfig::with_lr(config.lr)), Adam::new(AdamConfig::with_lr(config.lr)));
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0f64;
        let mut epoch_steps = 0;
        for idx in order.chunks(config.batch_size).filter(|c| c.len() >= 2) {
            let b = idx.len();
            let s = Observation::batch(idx.iter().map(|&i| &dataset.frames[i]))?;
            let mask_refs: Vec<&SaliencyMask> = idx.iter().map(|&i| &masks[i]).collect();
            let mask_t = expand_masks(&mask_refs, k)?;
            let mut q = Vec::with_capacity(b * m);
            for &i in idx {
                q.extend_from_slice(&q_all.data()[i * m..(i + 1) * m]);
            }
            let q = Tensor::new(vec![b, m], q)?;
            let z = Tensor::randn(&[b, config.arch.latent], 1.0, &mut rng);

            let step = (|| -> Result<_> {
                let mut tape = Tape::new(GradMode::Standard);
                let x = tape.constant(s.clone());
                let (enc_pass, mu, lv) = gen.encode_on_tape(&mut tape, x, ForwardOpts::TRAIN)?;
                let dec_pass = gen.decode_on_tape(&mut tape, mu, lv, &z, ForwardOpts::TRAIN)?;
                let nodes = record_loss(&mut tape, agent, &s, &mask_t, &q, dec_pass.output, mu, lv, weights)?;
                let vals = nodes.values(&tape);
                if vals.iter().any(|v| !v.is_finite()) {
                    return Err(Error::numeric(format!("non-finite generator loss {vals:?}")));
                }
                tape.backward(nodes.total)?;
                Ok((tape, enc_pass, dec_pass, vals))
            })();
            let (tape, enc_pass, dec_pass, [l_p, l_a, kl, total]) = match step {
                Ok(v) => v,
                Err(e) => {
                    let at = format!("epoch {epoch}, step {}", curves.steps.len());
                    if let Some(path) = &config.diagnostic_path {
                        gen.save(path)?;
                        return Err(Error::numeric(format!("{e} at {at}; last finite generator saved to {}", path.display())));
                    }
                    return Err(Error::numeric(format!("{e} at {at}")));
                }
            };
            let (enc, dec) = gen.nets_mut();
            adam_enc.step_network(enc, &tape, &enc_pass)?;
            adam_dec.step_network(dec, &tape, &dec_pass)?;
            enc.update_running_stats(&enc_pass);
            dec.update_running_stats(&dec_pass);
            log::debug!("epoch {epoch} step {}: l_p={l_p:.6} l_a={l_a:.6} kl={kl:.4} total={total:.6}", curves.steps.len());
            curves.steps.push(StepLoss { epoch, l_p, l_a, kl, total, eta: weights.eta, lambda: weights.lambda });
            epoch_sum += total as f64;
            epoch_steps += 1;
        }
        let mean = (epoch_sum / epoch_steps.max(1) as f64) as f32;
        log::info!("generator {} epoch {epoch}: mean loss {mean:.6}", config.mode);
        curves.epoch_totals.push(mean);
    }
    Ok((gen, curves))
}
