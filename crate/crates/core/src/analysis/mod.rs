//! Evaluation protocols: agent scores on reconstructions, novelty of
//! synthesized states against the training set, and retrieval of the
//! closest training frame.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{argmax, evaluate_policy, QNetwork};
use crate::env::{EnvConfig, Observation};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::nn::Tensor;
use crate::synthesis::TargetSpec;

/// Relative change beyond which a pixel counts as different.
pub const PIXEL_DIFF_THRESHOLD: f64 = 0.25;
const PIXEL_EPS: f64 = 1e-3;
/// Sample-fraction thresholds of the novelty histogram.
pub const NOVELTY_THRESHOLDS: [f64; 7] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7];

/// Maps an observation to the one the agent is shown.
pub trait Reconstruct {
    fn reconstruct(&mut self, s: &Observation) -> Result<Observation>;
}

/// Decodes the posterior mean (`z = 0`).
pub struct MeanReconstruction<'a>(pub &'a Generator);

impl Reconstruct for MeanReconstruction<'_> {
    fn reconstruct(&mut self, s: &Observation) -> Result<Observation> {
        self.0.reconstruct(s)
    }
}

/// Decodes with a fresh `z ~ N(0, I)` per frame.
pub struct SampledReconstruction<'a> {
    pub generator: &'a Generator,
    pub rng: ChaCha8Rng,
}

impl<'a> SampledReconstruction<'a> {
    pub fn new(generator: &'a Generator, seed: u64) -> Self {
        Self { generator, rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl Reconstruct for SampledReconstruction<'_> {
    fn reconstruct(&mut self, s: &Observation) -> Result<Observation> {
        let (mu, lv) = self.generator.encode(s)?;
        let z = Tensor::randn(&[mu.len()], 1.0, &mut self.rng).into_data();
        self.generator.decode(&mu, &lv, &z)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconEvalReport {
    pub label: String,
    pub seed: u64,
    pub raw: Vec<f32>,
    pub reconstructed: Vec<f32>,
}

fn mean(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64).sum::<f64>() / v.len().max(1) as f64
}

impl ReconEvalReport {
    pub fn raw_mean(&self) -> f64 {
        mean(&self.raw)
    }

    pub fn reconstructed_mean(&self) -> f64 {
        mean(&self.reconstructed)
    }
}

/// Plays `episodes` paired episodes twice with the greedy agent: once on
/// true observations and once on reconstructions. The environment always
/// advances on the true state.
pub fn evaluate_on_reconstructions(
    agent: &QNetwork,
    recon: &mut impl Reconstruct,
    env_config: &EnvConfig,
    episodes: usize,
    label: &str,
) -> Result<ReconEvalReport> {
    if env_config.observation_shape() != agent.input_shape() {
        return Err(Error::dim(format!("environment {:?} and agent {:?} shapes differ", env_config.observation_shape(), agent.input_shape())));
    }
    let raw = evaluate_policy(env_config, episodes, |s| Ok(argmax(&agent.q_values(s)?)))?;
    let reconstructed = evaluate_policy(env_config, episodes, |s| {
        let r = recon.reconstruct(s)?;
        if r.shape() != s.shape() {
            return Err(Error::dim(format!("reconstruction {:?} for observation {:?}", r.shape(), s.shape())));
        }
        Ok(argmax(&agent.q_values(&r)?))
    })?;
    Ok(ReconEvalReport { label: label.to_owned(), seed: env_config.seed, raw, reconstructed })
}

fn same_shape(a: &Observation, b: &Observation) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!("observations {:?} and {:?} differ in shape", a.shape(), b.shape())));
    }
    Ok(())
}

/// Fraction of pixels whose relative change exceeds 25% on any stacked frame.
pub fn pixel_diff_fraction(a: &Observation, b: &Observation) -> Result<f64> {
    same_shape(a, b)?;
    let [k, h, w] = a.shape();
    let d = h * w;
    let (x, y) = (a.data(), b.data());
    let differing = (0..d)
        .filter(|&p| {
            (0..k).any(|c| {
                let (u, v) = (x[c * d + p] as f64, y[c * d + p] as f64);
                (u - v).abs() / u.max(v).max(PIXEL_EPS) > PIXEL_DIFF_THRESHOLD
            })
        })
        .count();
    Ok(differing as f64 / d as f64)
}

/// Mean squared difference over all entries.
pub fn mse(a: &Observation, b: &Observation) -> Result<f64> {
    same_shape(a, b)?;
    Ok(a.data().iter().zip(b.data()).map(|(&u, &v)| (u as f64 - v as f64).powi(2)).sum::<f64>() / a.data().len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoveltyReport {
    /// Differing-pixel fraction of each sample against its nearest frame.
    pub fractions: Vec<f64>,
    /// MSE-nearest training frame of each sample.
    pub nearest: Vec<usize>,
    pub thresholds: Vec<f64>,
    /// Percentage of samples whose fraction exceeds each threshold.
    pub cumulative: Vec<f64>,
}

pub fn novelty_histogram(samples: &[Observation], training: &[Observation]) -> Result<NoveltyReport> {
    if training.is_empty() {
        return Err(Error::input("novelty needs a nonempty training set"));
    }
    if samples.is_empty() {
        return Err(Error::input("novelty needs at least one sample"));
    }
    let mut fractions = Vec::with_capacity(samples.len());
    let mut nearest = Vec::with_capacity(samples.len());
    for s in samples {
        let (i, _) = nearest_training_frame(s, None, training, None, &Metric::L2)?;
        nearest.push(i);
        fractions.push(pixel_diff_fraction(s, &training[i])?);
    }
    let cumulative = NOVELTY_THRESHOLDS
        .iter()
        .map(|&t| 100.0 * fractions.iter().filter(|&&f| f > t).count() as f64 / samples.len() as f64)
        .collect();
    Ok(NoveltyReport { fractions, nearest, thresholds: NOVELTY_THRESHOLDS.to_vec(), cumulative })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Metric {
    L2,
    /// Distance between target values of the q-vectors.
    Objective(TargetSpec),
}

/// Closest training frame to `query`; the first index wins ties.
/// The objective metric needs q-vectors for the query and every frame.
pub fn nearest_training_frame(
    query: &Observation,
    query_q: Option<&[f32]>,
    frames: &[Observation],
    frame_q: Option<&[Vec<f32>]>,
    metric: &Metric,
) -> Result<(usize, f64)> {
    if frames.is_empty() {
        return Err(Error::input("retrieval needs a nonempty training set"));
    }
    let dists: Vec<f64> = match metric {
        Metric::L2 => frames.iter().map(|f| mse(query, f)).collect::<Result<_>>()?,
        Metric::Objective(target) => {
            let (qq, fq) = match (query_q, frame_q) {
                (Some(a), Some(b)) if b.len() == frames.len() => (a, b),
                _ => return Err(Error::input("objective retrieval needs q-vectors for the query and every training frame")),
            };
            let t = |q: &[f32]| target.value(&q.iter().map(|&v| v as f64).collect::<Vec<_>>());
            let tq = t(qq)?;
            fq.iter().map(|q| Ok((tq - t(q)?).abs())).collect::<Result<_>>()?
        }
    };
    let mut best = (0, dists[0]);
    for (i, &d) in dists.iter().enumerate().skip(1) {
        if d < best.1 {
            best = (i, d);
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthesis::Target;
    use rand::Rng;

    fn random_obs(rng: &mut ChaCha8Rng) -> Observation {
        let zero = rng.gen_bool(0.3);
        let data = (0..2 * 8 * 8).map(|_| if zero && rng.gen_bool(0.5) { 0.0 } else { rng.gen::<f32>() }).collect();
        Observation::new(Tensor::new(vec![2, 8, 8], data).unwrap()).unwrap()
    }

    fn diff_oracle(a: &Observation, b: &Observation) -> f64 {
        let mut count = 0;
        for y in 0..8 {
            for x in 0..8 {
                let mut differs = false;
                for c in 0..2 {
                    let i = c * 64 + y * 8 + x;
                    let (u, v) = (a.data()[i] as f64, b.data()[i] as f64);
                    let scale = if u > v { u } else { v };
                    let scale = if scale < 1e-3 { 1e-3 } else { scale };
                    if (u - v).abs() / scale > 0.25 {
                        differs = true;
                    }
                }
                if differs {
                    count += 1;
                }
            }
        }
        count as f64 / 64.0
    }

    #[test]
    fn pixel_diff_cases_and_oracle() {
        let ones = Observation::new(Tensor::full(&[2, 8, 8], 1.0)).unwrap();
        let zeros = Observation::new(Tensor::zeros(&[2, 8, 8])).unwrap();
        assert_eq!(pixel_diff_fraction(&ones, &ones).unwrap(), 0.0);
        assert_eq!(pixel_diff_fraction(&ones, &zeros).unwrap(), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let (a, b) = (random_obs(&mut rng), random_obs(&mut rng));
            assert_eq!(pixel_diff_fraction(&a, &b).unwrap(), diff_oracle(&a, &b));
            assert_eq!(pixel_diff_fraction(&a, &b).unwrap(), pixel_diff_fraction(&b, &a).unwrap());
        }
        let small = Observation::new(Tensor::zeros(&[1, 8, 8])).unwrap();
        assert!(matches!(pixel_diff_fraction(&ones, &small), Err(Error::Dimension(_))));
    }

    #[test]
    fn self_samples_are_not_novel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let train: Vec<Observation> = (0..30).map(|_| random_obs(&mut rng)).collect();
        let rep = novelty_histogram(&train[5..15], &train).unwrap();
        assert_eq!(rep.cumulative[0], 0.0);
        assert_eq!(rep.nearest, (5..15).collect::<Vec<_>>());
        assert!(matches!(novelty_histogram(&train, &[]), Err(Error::Input(_))));
    }

    #[test]
    fn retrieval_metrics() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let train: Vec<Observation> = (0..20).map(|_| random_obs(&mut rng)).collect();
        assert_eq!(nearest_training_frame(&train[7], None, &train, None, &Metric::L2).unwrap(), (7, 0.0));
        let q: Vec<Vec<f32>> = (0..20).map(|i| vec![i as f32, 1.0, -0.5]).collect();
        let metric = Metric::Objective(TargetSpec::new(Target::SPlus, 10.0));
        // q-sum 9.6 is nearest to frame 9 (sum 9.5)
        assert_eq!(nearest_training_frame(&train[0], Some(&[9.1, 0.5, 0.0]), &train, Some(&q), &metric).unwrap().0, 9);
        // equidistant between frames 9 and 10: lowest index
        assert_eq!(nearest_training_frame(&train[0], Some(&[10.0, 0.0, 0.0]), &train, Some(&q), &metric).unwrap().0, 9);
        assert!(matches!(nearest_training_frame(&train[0], None, &train, Some(&q), &metric), Err(Error::Input(_))));
        assert!(matches!(nearest_training_frame(&train[0], Some(&[1.0; 3]), &train, None, &metric), Err(Error::Input(_))));
    }

    struct Identity;

    impl Reconstruct for Identity {
        fn reconstruct(&mut self, s: &Observation) -> Result<Observation> {
            Ok(s.clone())
        }
    }

    #[test]
    fn identity_reconstruction_scores_identically() {
        let agent = QNetwork::new([2, 32, 32], 3, &[4], 8, &mut ChaCha8Rng::seed_from_u64(3));
        let cfg = EnvConfig { max_steps: 120, ..EnvConfig::minipong(5) };
        let rep = evaluate_on_reconstructions(&agent, &mut Identity, &cfg, 4, "identity").unwrap();
        assert_eq!(rep.raw.len(), 4);
        assert_eq!(rep.raw, rep.reconstructed);
        let bad = EnvConfig::griddrive(crate::env::PedMode::Reasonable, 0);
        assert!(matches!(evaluate_on_reconstructions(&agent, &mut Identity, &bad, 1, "x"), Err(Error::Dimension(_))));
    }
}
