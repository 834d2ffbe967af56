//! Gradient descent in the generator's latent space towards states that a
//! target function of the agent's q-values rates as interesting.

mod targets;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::QNetwork;
use crate::env::Observation;
use crate::error::{Error, Result};
use crate::generator::{kl_to_standard_normal, Generator};
use crate::nn::{Adam, AdamConfig, ForwardOpts, GradMode, Tape, Tensor};

pub use targets::{action_max_target, s_minus, s_plus, t_minus, t_plus, t_pm, Target, TargetSpec};

/// Largest `|log sigma^2|` accepted before a sample counts as diverged.
const LOG_VAR_LIMIT: f32 = 60.0;

/// `KL(N(mu, sigma^2) || N(0, I))` of a latent point.
pub fn latent_regularizer(mu: &[f32], log_var: &[f32]) -> f64 {
    kl_to_standard_normal(mu, log_var)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZPolicy {
    /// One noise draw per sample, held for the whole descent.
    FixedSeed,
    /// A fresh draw at every step.
    ResamplePerStep,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub target: TargetSpec,
    pub alpha: f32,
    pub steps: usize,
    pub lr: f32,
    pub z_policy: ZPolicy,
    pub samples: usize,
}

impl SynthesisConfig {
    pub fn new(target: Target) -> Self {
        Self { target: TargetSpec::new(target, 10.0), alpha: 1e-2, steps: 200, lr: 1e-2, z_policy: ZPolicy::FixedSeed, samples: 16 }
    }

    pub fn validate(&self, action_count: usize) -> Result<()> {
        self.target.validate(action_count)?;
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!("alpha must be finite and nonnegative, got {}", self.alpha)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("invalid synthesis step size {}", self.lr)));
        }
        if self.samples == 0 {
            return Err(Error::config("at least one sample must be requested"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisSample {
    pub state: Observation,
    pub q: Vec<f32>,
    pub mu: Vec<f32>,
    pub log_var: Vec<f32>,
    /// Energy of every iterate, starting with the prior draw.
    pub energy_trace: Vec<f64>,
    /// Optimization left the finite region; the best iterate was kept.
    pub diverged: bool,
}

impl SynthesisSample {
    pub fn initial_energy(&self) -> f64 {
        self.energy_trace[0]
    }

    pub fn final_energy(&self) -> f64 {
        *self.energy_trace.last().expect("trace holds the initial energy")
    }
}

/// Energies of a batch of latent points and their gradients.
#[derive(Clone, Debug)]
pub struct EnergyEval {
    pub energy: Vec<f64>,
    pub q: Tensor,
    pub states: Tensor,
    pub grad_mu: Vec<f32>,
    pub grad_log_var: Vec<f32>,
}

/// `E(x) = T(A(g(x, z))) + alpha * R(x)` for every row of the `[B, n]`
/// batch, with gradients through the frozen decoder and agent.
pub fn energy(gen: &Generator, agent: &QNetwork, target: &TargetSpec, alpha: f32, mu: &Tensor, log_var: &Tensor, z: &Tensor) -> Result<EnergyEval> {
    if gen.arch().input != agent.input_shape() {
        return Err(Error::dim(format!("generator {:?} and agent {:?} observation shapes differ", gen.arch().input, agent.input_shape())));
    }
    let mut tape = Tape::new(GradMode::Standard);
    let m = tape.leaf(mu.clone(), true);
    let l = tape.leaf(log_var.clone(), true);
    let dec = gen.decode_on_tape(&mut tape, m, l, z, ForwardOpts::EVAL)?;
    let qp = agent.forward(&mut tape, dec.output, ForwardOpts::EVAL)?;
    let q = tape.value(qp.output).clone();
    let states = tape.value(dec.output).clone();
    let (b, n, na) = (mu.shape()[0], gen.latent_dim(), agent.action_count());
    let mut seed = Vec::with_capacity(b * na);
    let mut energies = Vec::with_capacity(b);
    for i in 0..b {
        let row: Vec<f64> = q.data()[i * na..(i + 1) * na].iter().map(|&v| v as f64).collect();
        let (t, g) = target.value_and_grad(&row)?;
        let r = latent_regularizer(&mu.data()[i * n..(i + 1) * n], &log_var.data()[i * n..(i + 1) * n]);
        energies.push(t + alpha as f64 * r);
        seed.extend(g.iter().map(|&v| v as f32));
    }
    tape.backward_with_seed(qp.output, &seed)?;
    let grad = |id| tape.grad(id).map(|g| g.to_vec()).ok_or_else(|| Error::state("latent leaf without gradient"));
    let mut grad_mu = grad(m)?;
    let mut grad_log_var = grad(l)?;
    for (g, &v) in grad_mu.iter_mut().zip(mu.data()) {
        *g += alpha * v;
    }
    for (g, &v) in grad_log_var.iter_mut().zip(log_var.data()) {
        *g += alpha * 0.5 * (v.exp() - 1.0);
    }
    if energies.iter().any(|e| !e.is_finite()) || grad_mu.iter().chain(&grad_log_var).any(|g| !g.is_finite()) {
        return Err(Error::numeric("non-finite energy or gradient"));
    }
    Ok(EnergyEval { energy: energies, q, states, grad_mu, grad_log_var })
}

fn rows(t: &Tensor, idx: &[usize], n: usize) -> Tensor {
    let mut d = Vec::with_capacity(idx.len() * n);
    for &i in idx {
        d.extend_from_slice(&t.data()[i * n..(i + 1) * n]);
    }
    Tensor::new(vec![idx.len(), n], d).expect("row gather")
}

/// Evaluates the active rows; rows whose evaluation fails come back as `None`.
fn evaluate_rows(
    gen: &Generator,
    agent: &QNetwork,
    config: &SynthesisConfig,
    mu: &Tensor,
    lv: &Tensor,
    z: &Tensor,
    active: &[usize],
) -> Result<Vec<Option<(f64, Vec<f32>, Vec<f32>)>>> {
    let n = gen.latent_dim();
    let whole = energy(gen, agent, &config.target, config.alpha, &rows(mu, active, n), &rows(lv, active, n), &rows(z, active, n));
    match whole {
        Ok(e) => Ok((0..active.len())
            .map(|j| Some((e.energy[j], e.grad_mu[j * n..(j + 1) * n].to_vec(), e.grad_log_var[j * n..(j + 1) * n].to_vec())))
            .collect()),
        Err(Error::Numeric(_)) => active
            .iter()
            .map(|&i| match energy(gen, agent, &config.target, config.alpha, &rows(mu, &[i], n), &rows(lv, &[i], n), &rows(z, &[i], n)) {
                Ok(e) => Ok(Some((e.energy[0], e.grad_mu, e.grad_log_var))),
                Err(Error::Numeric(_)) => Ok(None),
                Err(e) => Err(e),
            })
            .collect(),
        Err(e) => Err(e),
    }
}

/// Runs `config.steps` Adam steps on the energy from independent prior
/// draws. Sample `i` depends only on `(seed, i)`.
pub fn synthesize(gen: &Generator, agent: &QNetwork, config: &SynthesisConfig, seed: u64) -> Result<Vec<SynthesisSample>> {
    config.validate(agent.action_count())?;
    let (b, n) = (config.samples, gen.latent_dim());
    let mut rngs: Vec<ChaCha8Rng> = (0..b)
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(i as u64);
            r
        })
        .collect();
    let draw = |rngs: &mut [ChaCha8Rng]| -> Tensor {
        let d = rngs.iter_mut().flat_map(|r| Tensor::randn(&[n], 1.0, r).into_data()).collect();
        Tensor::new(vec![b, n], d).expect("latent batch")
    };
    let mut mu = draw(&mut rngs);
    let mut lv = Tensor::zeros(&[b, n]);
    let mut z = draw(&mut rngs);

    let mut traces: Vec<Vec<f64>> = vec![Vec::with_capacity(config.steps + 1); b];
    let mut best: Vec<(f64, Vec<f32>, Vec<f32>, Vec<f32>)> = vec![(f64::INFINITY, vec![], vec![], vec![]); b];
    let mut diverged = vec![false; b];
    let mut adam = Adam::new(AdamConfig::with_lr(config.lr));
    for step in 0..=config.steps {
        if step > 0 && config.z_policy == ZPolicy::ResamplePerStep {
            z = draw(&mut rngs);
        }
        let active: Vec<usize> = (0..b).filter(|&i| !diverged[i]).collect();
        if active.is_empty() {
            break;
        }
        let evals = evaluate_rows(gen, agent, config, &mu, &lv, &z, &active)?;
        let mut gm = vec![0.0; b * n];
        let mut gl = vec![0.0; b * n];
        for (&i, ev) in active.iter().zip(evals) {
            match ev {
                Some((e, g_mu, g_lv)) => {
                    traces[i].push(e);
                    if e < best[i].0 || step == 0 {
                        let row = |t: &Tensor| t.data()[i * n..(i + 1) * n].to_vec();
                        best[i] = (e, row(&mu), row(&lv), row(&z));
                    }
                    gm[i * n..(i + 1) * n].copy_from_slice(&g_mu);
                    gl[i * n..(i + 1) * n].copy_from_slice(&g_lv);
                }
                None if step == 0 => return Err(Error::numeric(format!("sample {i}: energy of the prior draw is not finite"))),
                None => {
                    log::warn!("synthesis sample {i} diverged at step {step}; keeping the best iterate");
                    diverged[i] = true;
                }
            }
        }
        if step == config.steps {
            break;
        }
        let (mu_prev, lv_prev) = (mu.clone(), lv.clone());
        adam.step(&mut [&mut mu, &mut lv], &[Some(&gm), Some(&gl)])?;
        for i in 0..b {
            let span = i * n..(i + 1) * n;
            let bad = mu.data()[span.clone()].iter().any(|v| !v.is_finite())
                || lv.data()[span.clone()].iter().any(|v| !v.is_finite() || v.abs() > LOG_VAR_LIMIT);
            if bad && !diverged[i] {
                log::warn!("synthesis sample {i} left the finite region at step {step}; keeping the best iterate");
                diverged[i] = true;
            }
            if diverged[i] {
                mu.data_mut()[span.clone()].copy_from_slice(&mu_prev.data()[span.clone()]);
                lv.data_mut()[span.clone()].copy_from_slice(&lv_prev.data()[span]);
            }
        }
    }

    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let (m_i, l_i, z_i) = if diverged[i] {
            (best[i].1.clone(), best[i].2.clone(), best[i].3.clone())
        } else {
            let row = |t: &Tensor| t.data()[i * n..(i + 1) * n].to_vec();
            (row(&mu), row(&lv), row(&z))
        };
        let state = gen.decode(&m_i, &l_i, &z_i)?;
        let q = agent.q_values(&state)?;
        out.push(SynthesisSample { state, q, mu: m_i, log_var: l_i, energy_trace: std::mem::take(&mut traces[i]), diverged: diverged[i] });
    }
    Ok(out)
}

/// Mean final target value and regularizer for each `alpha`.
pub fn alpha_sweep(gen: &Generator, agent: &QNetwork, config: &SynthesisConfig, alphas: &[f32], seed: u64) -> Result<Vec<(f32, f64, f64)>> {
    alphas
        .iter()
        .map(|&alpha| {
            let samples = synthesize(gen, agent, &SynthesisConfig { alpha, ..*config }, seed)?;
            let n = samples.len() as f64;
            let mut t = 0.0;
            let mut r = 0.0;
            for s in &samples {
                let q: Vec<f64> = s.q.iter().map(|&v| v as f64).collect();
                t += config.target.value(&q)?;
                r += latent_regularizer(&s.mu, &s.log_var);
            }
            Ok((alpha, t / n, r / n))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::GeneratorArch;
    use crate::nn::gradcheck::relative_errors;
    use crate::nn::reference::RefNet;

    fn models() -> (Generator, QNetwork) {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let arch = GeneratorArch { input: [2, 32, 32], latent: 6, base_filters: 4, stages: 3 };
        (Generator::new(arch, &mut rng).unwrap(), QNetwork::new([2, 32, 32], 3, &[4, 8], 16, &mut rng))
    }

    #[test]
    fn regularizer_matches_generator_kl_bitwise() {
        let mu = [0.3f32, -1.2, 2.0];
        let lv = [0.1f32, -0.7, 1.3];
        assert_eq!(latent_regularizer(&mu, &lv).to_bits(), kl_to_standard_normal(&mu, &lv).to_bits());
        assert_eq!(latent_regularizer(&[0.0; 3], &[0.0; 3]), 0.0);
        assert!(latent_regularizer(&[1.0], &[0.0]) < latent_regularizer(&[1.5], &[0.0]));
    }

    #[test]
    fn energy_gradient_matches_finite_differences() {
        let (g, a) = models();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mu = Tensor::randn(&[1, 6], 1.0, &mut rng);
        let lv = Tensor::randn(&[1, 6], 0.3, &mut rng);
        let z = Tensor::randn(&[1, 6], 1.0, &mut rng);
        let dec = RefNet::from_sequential(g.decoder());
        let agent = RefNet::from_sequential(a.network());
        for kind in [Target::TMinus, Target::TPm, Target::ActionMax(1), Target::SPlus] {
            let spec = TargetSpec::new(kind, 10.0);
            let ev = energy(&g, &a, &spec, 0.5, &mu, &lv, &z).unwrap();
            let e64 = |x: &[f64]| -> (f64, Vec<i8>) {
                let (m, l) = x.split_at(6);
                let latent: Vec<f64> = (0..6).map(|i| m[i] + (0.5 * l[i]).exp() * z.data()[i] as f64).collect();
                let s = dec.forward(&latent, &[1, 6], false).unwrap();
                let q = agent.forward(&s.values, &[1, 2, 32, 32], false).unwrap();
                let r: f64 = (0..6).map(|i| 0.5 * (m[i] * m[i] + l[i].exp() - l[i] - 1.0)).sum();
                let mut signs = s.relu_signs;
                signs.extend(q.relu_signs);
                (spec.value(&q.values).unwrap() + 0.5 * r, signs)
            };
            let x0: Vec<f64> = mu.data().iter().chain(lv.data()).map(|&v| v as f64).collect();
            let (_, base) = e64(&x0);
            let (mut ad, mut fd) = (vec![], vec![]);
            for i in 0..12 {
                let h = 1e-5;
                let (mut p, mut m) = (x0.clone(), x0.clone());
                p[i] += h;
                m[i] -= h;
                let ((ep, sp), (em, sm)) = (e64(&p), e64(&m));
                if sp != base || sm != base {
                    continue;
                }
                fd.push((ep - em) / (2.0 * h));
                ad.push(if i < 6 { ev.grad_mu[i] } else { ev.grad_log_var[i - 6] } as f64);
            }
            assert!(fd.len() >= 10);
            let worst = relative_errors(&ad, &fd, 1e-3).into_iter().fold(0.0, f64::max);
            assert!(worst <= 1e-3, "{kind:?}: {worst}");
        }
    }

    #[test]
    fn zero_steps_is_a_prior_sample_and_alpha_zero_is_bare_target() {
        let (g, a) = models();
        let cfg = SynthesisConfig { steps: 0, samples: 3, alpha: 0.0, ..SynthesisConfig::new(Target::SPlus) };
        let out = synthesize(&g, &a, &cfg, 7).unwrap();
        for (i, s) in out.iter().enumerate() {
            assert_eq!(s.energy_trace.len(), 1);
            assert!(s.log_var.iter().all(|&v| v == 0.0));
            let mut r = ChaCha8Rng::seed_from_u64(7);
            r.set_stream(i as u64);
            let mu = Tensor::randn(&[6], 1.0, &mut r).into_data();
            assert_eq!(s.mu, mu);
            let z = Tensor::randn(&[6], 1.0, &mut r).into_data();
            assert_eq!(s.state, g.decode(&mu, &[0.0; 6], &z).unwrap());
            let q: Vec<f64> = s.q.iter().map(|&v| v as f64).collect();
            assert!((s.initial_energy() - s_plus(&q).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn s_plus_and_s_minus_energies_sum_to_twice_the_regularizer() {
        let (g, a) = models();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mu = Tensor::randn(&[2, 6], 1.0, &mut rng);
        let lv = Tensor::randn(&[2, 6], 0.3, &mut rng);
        let z = Tensor::randn(&[2, 6], 1.0, &mut rng);
        let p = energy(&g, &a, &TargetSpec::new(Target::SPlus, 1.0), 0.2, &mu, &lv, &z).unwrap();
        let m = energy(&g, &a, &TargetSpec::new(Target::SMinus, 1.0), 0.2, &mu, &lv, &z).unwrap();
        for i in 0..2 {
            let r = latent_regularizer(&mu.data()[i * 6..i * 6 + 6], &lv.data()[i * 6..i * 6 + 6]);
            assert!((p.energy[i] + m.energy[i] - 2.0 * 0.2f32 as f64 * r).abs() < 1e-9);
        }
    }

    #[test]
    fn descent_is_reproducible_and_lowers_energy() {
        let (g, a) = models();
        let cfg = SynthesisConfig { steps: 30, samples: 4, ..SynthesisConfig::new(Target::ActionMax(0)) };
        let x = synthesize(&g, &a, &cfg, 3).unwrap();
        assert_eq!(x, synthesize(&g, &a, &cfg, 3).unwrap());
        for s in &x {
            assert_eq!(s.energy_trace.len(), 31);
            assert!(s.final_energy() < s.initial_energy());
        }
        // A sample does not depend on how many others run beside it.
        let one = synthesize(&g, &a, &SynthesisConfig { samples: 1, ..cfg }, 3).unwrap();
        assert_eq!(one[0].state.data().len(), x[0].state.data().len());
        for (u, v) in one[0].mu.iter().zip(&x[0].mu) {
            assert!((u - v).abs() < 1e-4);
        }
        let rs = SynthesisConfig { z_policy: ZPolicy::ResamplePerStep, ..cfg };
        assert_eq!(synthesize(&g, &a, &rs, 3).unwrap(), synthesize(&g, &a, &rs, 3).unwrap());
    }

    #[test]
    fn invalid_config_is_rejected() {
        let (g, a) = models();
        let bad = SynthesisConfig::new(Target::ActionMax(3));
        assert!(matches!(synthesize(&g, &a, &bad, 0), Err(Error::Input(_))));
        let bad = SynthesisConfig { alpha: -1.0, ..SynthesisConfig::new(Target::TPlus) };
        assert!(matches!(synthesize(&g, &a, &bad, 0), Err(Error::Config(_))));
    }
}
