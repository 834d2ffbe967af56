use super::SaliencyMask;
use crate::agent::QNetwork;
use crate::env::Observation;
use crate::error::{Error, Result};
use crate::nn::{ForwardOpts, NodeId, Tape, Tensor};

/// `0.5 * sum(mu^2 + sigma^2 - log sigma^2 - 1)`.
pub fn kl_to_standard_normal(mu: &[f32], log_var: &[f32]) -> f64 {
    mu.iter()
        .zip(log_var)
        .map(|(&m, &l)| {
            let (m, l) = (m as f64, l as f64);
            0.5 * (m * m + l.exp() - l - 1.0)
        })
        .sum()
}

/// Mask-weighted squared error, summed over stacked frames per pixel.
pub fn attentive_recon_loss(s: &Observation, s_hat: &Observation, mask: &SaliencyMask) -> Result<f64> {
    let [k, h, w] = s.shape();
    if s_hat.shape() != s.shape() || mask.height != h || mask.width != w {
        return Err(Error::dim(format!("attentive loss on {:?}, {:?} with a {}x{} mask", s.shape(), s_hat.shape(), mask.height, mask.width)));
    }
    let d = h * w;
    let (a, b) = (s.data(), s_hat.data());
    let mut total = 0.0;
    for (p, &m) in mask.weights.iter().enumerate() {
        let err: f64 = (0..k).map(|c| ((b[c * d + p] - a[c * d + p]) as f64).powi(2)).sum();
        total += m as f64 * err;
    }
    Ok(total)
}

/// Squared distance between the agent's q-vectors on `s` and `s_hat`.
pub fn agent_perception_loss(agent: &QNetwork, s: &Observation, s_hat: &Observation) -> Result<f64> {
    let (q, q_hat) = (agent.q_values(s)?, agent.q_values(s_hat)?);
    Ok(q.iter().zip(&q_hat).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Agent perception weight.
    pub eta: f32,
    /// KL weight.
    pub lambda: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { eta: 1e-3, lambda: 1e-4 }
    }
}

/// Scalar nodes of the batch-mean loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub l_p: NodeId,
    pub l_a: NodeId,
    pub kl: NodeId,
    pub total: NodeId,
}

impl LossNodes {
    pub fn values(&self, tape: &Tape) -> [f32; 4] {
        [self.l_p, self.l_a, self.kl, self.total].map(|n| tape.value(n).data()[0])
    }
}

/// Broadcasts `[N, H, W]` masks over `k` channels.
pub fn expand_masks(masks: &[&SaliencyMask], k: usize) -> Result<Tensor> {
    let first = masks.first().ok_or_else(|| Error::input("empty mask batch"))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(masks.len() * k * h * w);
    for m in masks {
        if (m.height, m.width) != (h, w) {
            return Err(Error::dim("masks in a batch differ in shape"));
        }
        for _ in 0..k {
            data.extend_from_slice(&m.weights);
        }
    }
    Tensor::new(vec![masks.len(), k, h, w], data)
}

/// Records the batch-mean loss `l_p + eta * l_a + lambda * kl` on `tape`.
///
/// `s` is the target batch, `masks` its expanded `[N, k, H, W]` weights and
/// `q_target` the frozen agent's `[N, m]` q-values on `s`. With `eta == 0`
/// the agent term is evaluated for logging only and kept off the gradient.
#[allow(clippy::too_many_arguments)]
pub fn record_loss(
    tape: &mut Tape,
    agent: &QNetwork,
    s: &Tensor,
    masks: &Tensor,
    q_target: &Tensor,
    s_hat: NodeId,
    mu: NodeId,
    log_var: NodeId,
    weights: LossWeights,
) -> Result<LossNodes> {
    let n = s.shape()[0];
    if tape.shape(s_hat) != s.shape() || masks.shape() != s.shape() || q_target.shape() != [n, agent.action_count()] {
        return Err(Error::dim(format!(
            "loss inputs {:?} / {:?} / mask {:?} / q {:?}",
            tape.shape(s_hat),
            s.shape(),
            masks.shape(),
            q_target.shape()
        )));
    }
    let inv_n = 1.0 / n as f32;

    let target = tape.constant(s.clone());
    let mask = tape.constant(masks.clone());
    let diff = tape.sub(s_hat, target)?;
    let sq = tape.square(diff);
    let weighted = tape.mul(sq, mask)?;
    let sum_p = tape.sum(weighted);
    let l_p = tape.scale(sum_p, inv_n);

    let mu2 = tape.square(mu);
    let var = tape.exp(log_var);
    let t = tape.add(mu2, var)?;
    let t = tape.sub(t, log_var)?;
    let t = tape.add_scalar(t, -1.0);
    let sum_kl = tape.sum(t);
    let kl = tape.scale(sum_kl, 0.5 * inv_n);

    let l_a = if weights.eta != 0.0 {
        let q_hat = agent.forward(tape, s_hat, ForwardOpts::EVAL)?.output;
        let qt = tape.constant(q_target.clone());
        let dq = tape.sub(q_hat, qt)?;
        let dq2 = tape.square(dq);
        let sum_a = tape.sum(dq2);
        tape.scale(sum_a, inv_n)
    } else {
        let q_hat = agent.q_values_batch(tape.value(s_hat))?;
        let v: f64 = q_hat.data().iter().zip(q_target.data()).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum();
        tape.constant(Tensor::scalar((v / n as f64) as f32))
    };

    let wkl = tape.scale(kl, weights.lambda);
    let mut total = tape.add(l_p, wkl)?;
    if weights.eta != 0.0 {
        let wa = tape.scale(l_a, weights.eta);
        total = tape.add(total, wa)?;
    }
    Ok(LossNodes { l_p, l_a, kl, total })
}
