//! Finite-difference check of the complete generator objective.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{record_loss, Generator, LossWeights};
use crate::agent::QNetwork;
use crate::error::{Error, Result};
use crate::nn::gradcheck::relative_errors;
use crate::nn::reference::RefNet;
use crate::nn::{ForwardOpts, GradCheckReport, GradMode, Tape, Tensor};

pub struct GeneratorCheckInput<'a> {
    pub generator: &'a Generator,
    pub agent: &'a QNetwork,
    /// `[N, k, H, W]` target batch.
    pub s: &'a Tensor,
    /// `[N, k, H, W]` expanded mask weights.
    pub masks: &'a Tensor,
    /// `[N, n]` reparameterization noise.
    pub z: &'a Tensor,
    pub weights: LossWeights,
}

struct Shadow {
    enc: RefNet,
    dec: RefNet,
    agent: RefNet,
    enc_params: usize,
}

impl Shadow {
    fn param_mut(&mut self, i: usize) -> &mut f64 {
        if i < self.enc_params {
            self.enc.param_mut(i)
        } else {
            self.dec.param_mut(i - self.enc_params)
        }
    }

    /// Total loss in `f64` and the ReLU sign pattern of every network.
    fn loss(&self, inp: &GeneratorCheckInput<'_>, q_target: &[f64]) -> Result<(f64, Vec<i8>)> {
        let s: Vec<f64> = inp.s.data().iter().map(|&v| v as f64).collect();
        let shape = inp.s.shape();
        let (nb, n) = (shape[0], inp.generator.latent_dim());
        let enc = self.enc.forward(&s, shape, true)?;
        let mut latent = vec![0.0; nb * n];
        let mut kl = 0.0;
        for b in 0..nb {
            for i in 0..n {
                let (mu, lv) = (enc.values[b * 2 * n + i], enc.values[b * 2 * n + n + i]);
                latent[b * n + i] = mu + (0.5 * lv).exp() * inp.z.data()[b * n + i] as f64;
                kl += 0.5 * (mu * mu + lv.exp() - lv - 1.0);
            }
        }
        let dec = self.dec.forward(&latent, &[nb, n], true)?;
        let l_p: f64 = dec.values.iter().zip(&s).zip(inp.masks.data()).map(|((a, b), &m)| m as f64 * (a - b).powi(2)).sum();
        let q = self.agent.forward(&dec.values, shape, false)?;
        let l_a: f64 = q.values.iter().zip(q_target).map(|(a, b)| (a - b).powi(2)).sum();
        let w = inp.weights;
        let total = (l_p + w.eta as f64 * l_a + w.lambda as f64 * kl) / nb as f64;
        let mut signs = enc.relu_signs;
        signs.extend(dec.relu_signs);
        signs.extend(q.relu_signs);
        Ok((total, signs))
    }
}

/// Compares tape gradients of the training objective (batch statistics,
/// frozen agent) w.r.t. up to `max_coords` generator parameters against
/// central differences on an `f64` shadow.
pub fn generator_loss_gradcheck(inp: &GeneratorCheckInput<'_>, tolerance: f64, max_coords: usize, seed: u64) -> Result<GradCheckReport> {
    let q_target = inp.agent.q_values_batch(inp.s)?;
    let mut tape = Tape::new(GradMode::Standard);
    let x = tape.constant(inp.s.clone());
    let g = inp.generator;
    let (enc_pass, mu, lv) = g.encode_on_tape(&mut tape, x, ForwardOpts::TRAIN)?;
    let dec_pass = g.decode_on_tape(&mut tape, mu, lv, inp.z, ForwardOpts::TRAIN)?;
    let nodes = record_loss(&mut tape, inp.agent, inp.s, inp.masks, &q_target, dec_pass.output, mu, lv, inp.weights)?;
    tape.backward(nodes.total)?;
    let mut ad = Vec::new();
    for &p in enc_pass.params.iter().chain(&dec_pass.params) {
        let grad = tape.grad(p).ok_or_else(|| Error::state("generator parameter without gradient"))?;
        ad.extend(grad.iter().map(|&v| v as f64));
    }

    let enc = RefNet::from_sequential(g.encoder());
    let shadow = Shadow { enc_params: enc.param_count(), enc, dec: RefNet::from_sequential(g.decoder()), agent: RefNet::from_sequential(inp.agent.network()) };
    // The f32 target is what the tape saw; differentiate against the same constant.
    let qt: Vec<f64> = q_target.data().iter().map(|&v| v as f64).collect();
    let total = ad.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = if total <= max_coords { (0..total).collect() } else { sample(&mut rng, total, max_coords).into_vec() };
    coords.sort_unstable();

    let step = 1e-4;
    let (_, base_signs) = shadow.loss(inp, &qt)?;
    let (mut ad_kept, mut fd_kept, mut excluded) = (Vec::new(), Vec::new(), 0);
    for &c in &coords {
        let eval = |delta: f64| {
            let mut sh = Shadow { enc: shadow.enc.clone(), dec: shadow.dec.clone(), agent: shadow.agent.clone(), enc_params: shadow.enc_params };
            *sh.param_mut(c) += delta;
            sh.loss(inp, &qt)
        };
        let (lp, sp) = eval(step)?;
        let (lm, sm) = eval(-step)?;
        if sp != base_signs || sm != base_signs {
            excluded += 1;
            continue;
        }
        fd_kept.push((lp - lm) / (2.0 * step));
        ad_kept.push(ad[c]);
    }
    let max_rel_err = relative_errors(&ad_kept, &fd_kept, 1e-3).into_iter().fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_err, checked: fd_kept.len(), excluded, tolerance, passed: max_rel_err <= tolerance && !fd_kept.is_empty() })
}

#[cfg(test)]
mod tests {
    use super::super::loss::expand_masks;
    use super::super::{saliency_masks, GeneratorArch};
    use super::*;
    use crate::env::{Env, EnvConfig, Observation};

    #[test]
    fn full_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let agent = QNetwork::new([2, 32, 32], 3, &[4, 8], 16, &mut rng);
        let arch = GeneratorArch { input: [2, 32, 32], latent: 4, base_filters: 2, stages: 3 };
        let generator = Generator::new(arch, &mut rng).unwrap();
        let mut env = Env::new(&EnvConfig::minipong(4)).unwrap();
        let mut frames = vec![env.reset()];
        for a in [0, 2, 1] {
            frames.push(env.step(a).unwrap().observation);
        }
        let masks = saliency_masks(&agent, &frames, true).unwrap();
        let masks = expand_masks(&masks.iter().collect::<Vec<_>>(), 2).unwrap();
        let s = Observation::batch(&frames).unwrap();
        let z = Tensor::randn(&[4, 4], 1.0, &mut rng);
        // Large eta so the agent path contributes visibly to every gradient.
        let inp = GeneratorCheckInput { generator: &generator, agent: &agent, s: &s, masks: &masks, z: &z, weights: LossWeights { eta: 10.0, lambda: 0.1 } };
        let rep = generator_loss_gradcheck(&inp, 1e-3, 150, 0).unwrap();
        assert!(rep.passed, "{rep:?}");
        assert!(rep.checked >= 100, "{rep:?}");
    }
}
