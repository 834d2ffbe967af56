//! Q-network agents: the action-value interface `A(s)`, epsilon-greedy
//! behaviour, double-DQN training and dataset collection.

mod collect;
mod dqn;
mod replay;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::Observation;
use crate::error::{Error, Result};
use crate::nn::{ForwardOpts, ForwardPass, LayerSpec, NodeId, Sequential, Tape, Tensor};

pub use collect::{collect_dataset, evaluate_policy};
pub use dqn::{double_dqn_targets, huber, train_dqn, DqnLearner, TrainLog};
pub use replay::{Batch, ReplayBuffer, Transition};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub gamma: f32,
    pub train_steps: usize,
    /// Environment steps between target-network syncs.
    pub sync_period: usize,
    pub eps_start: f32,
    pub eps_end: f32,
    /// Steps over which epsilon decays linearly from `eps_start` to `eps_end`.
    pub eps_anneal_steps: usize,
    pub batch_size: usize,
    pub replay_capacity: usize,
    /// Steps of experience gathered before the first update.
    pub learning_starts: usize,
    /// Environment steps per gradient update.
    pub train_every: usize,
    pub lr: f32,
    pub huber_delta: f32,
    pub conv_filters: Vec<usize>,
    pub hidden: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            train_steps: 50_000,
            sync_period: 1000,
            eps_start: 1.0,
            eps_end: 0.1,
            eps_anneal_steps: 20_000,
            batch_size: 32,
            replay_capacity: 20_000,
            learning_starts: 1000,
            train_every: 4,
            lr: 1e-3,
            huber_delta: 1.0,
            conv_filters: vec![8, 16],
            hidden: 64,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        // gamma = 0 is allowed: it reduces Q-learning to reward regression.
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::config(format!("gamma {} must lie in [0, 1)", self.gamma)));
        }
        if self.sync_period == 0 || self.train_every == 0 || self.batch_size == 0 {
            return Err(Error::config("sync_period, train_every and batch_size must be positive"));
        }
        if self.replay_capacity < self.batch_size {
            return Err(Error::config("replay_capacity must hold at least one batch"));
        }
        for e in [self.eps_start, self.eps_end] {
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::config(format!("epsilon {e} outside [0, 1]")));
            }
        }
        if self.conv_filters.is_empty() || self.conv_filters.contains(&0) || self.hidden == 0 {
            return Err(Error::config("network widths must be positive"));
        }
        if !(self.lr > 0.0 && self.huber_delta > 0.0) {
            return Err(Error::config("lr and huber_delta must be positive"));
        }
        Ok(())
    }

    /// Epsilon used at environment step `t` during training.
    pub fn epsilon_at(&self, t: usize) -> f32 {
        if self.eps_anneal_steps == 0 || t >= self.eps_anneal_steps {
            return self.eps_end;
        }
        let frac = t as f32 / self.eps_anneal_steps as f32;
        self.eps_start + frac * (self.eps_end - self.eps_start)
    }
}

/// Layer stack realizing the action-value function.
#[derive(Clone, Debug, PartialEq)]
pub struct QNetwork {
    net: Sequential,
    input: [usize; 3],
    actions: usize,
}

/// Conv stages (3x3, stride 2, ReLU) followed by a one-hidden-layer dense head.
pub fn qnet_specs(input: [usize; 3], actions: usize, filters: &[usize], hidden: usize) -> Vec<LayerSpec> {
    let [k, h, w] = input;
    let mut specs = Vec::new();
    let (mut c, mut hh, mut ww) = (k, h, w);
    for &f in filters {
        specs.push(LayerSpec::conv(c, f));
        specs.push(LayerSpec::Relu);
        c = f;
        hh = hh.div_ceil(2);
        ww = ww.div_ceil(2);
    }
    specs.push(LayerSpec::Flatten);
    specs.push(LayerSpec::dense(c * hh * ww, hidden));
    specs.push(LayerSpec::Relu);
    specs.push(LayerSpec::dense(hidden, actions));
    specs
}

impl QNetwork {
    pub fn new<R: Rng + ?Sized>(input: [usize; 3], actions: usize, filters: &[usize], hidden: usize, rng: &mut R) -> Self {
        let net = Sequential::new(qnet_specs(input, actions, filters, hidden), rng);
        Self { net, input, actions }
    }

    /// Wraps an arbitrary stack mapping `[N, k, H, W]` to `[N, actions]`.
    pub fn from_sequential(net: Sequential, input: [usize; 3], actions: usize) -> Result<Self> {
        let out = net.output_shape(&[1, input[0], input[1], input[2]])?;
        if out != [1, actions] {
            return Err(Error::dim(format!("q-network maps {input:?} to {out:?}, expected [1, {actions}]")));
        }
        Ok(Self { net, input, actions })
    }

    pub fn network(&self) -> &Sequential {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Sequential {
        &mut self.net
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input
    }

    pub fn action_count(&self) -> usize {
        self.actions
    }

    /// Zeroes the final dense layer so every q-value is exactly 0.
    pub fn zero_head(&mut self) {
        if let Some(last) = self.net.layers_mut().iter_mut().rev().find(|l| matches!(l.spec, LayerSpec::Dense { .. })) {
            for p in &mut last.params {
                p.data_mut().fill(0.0);
            }
        }
    }

    fn check_batch(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1..] != self.input {
            return Err(Error::dim(format!("q-network expects [N, {:?}], got {shape:?}", self.input)));
        }
        Ok(())
    }

    /// Records the network on a tape; `x` must be an `[N, k, H, W]` node.
    pub fn forward(&self, tape: &mut Tape, x: NodeId, opts: ForwardOpts) -> Result<ForwardPass> {
        self.check_batch(tape.shape(x))?;
        self.net.forward(tape, x, opts)
    }

    pub fn q_values(&self, s: &Observation) -> Result<Vec<f32>> {
        if s.shape() != self.input {
            return Err(Error::dim(format!("observation {:?} does not match q-network input {:?}", s.shape(), self.input)));
        }
        Ok(self.net.infer(&s.batched())?.into_data())
    }

    /// `[N, actions]` q-values for an `[N, k, H, W]` batch.
    pub fn q_values_batch(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_batch(batch.shape())?;
        self.net.infer(batch)
    }

    pub fn policy(&self, s: &Observation) -> Result<usize> {
        Ok(argmax(&self.q_values(s)?))
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(q: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in q.iter().enumerate().skip(1) {
        if v > q[best] {
            best = i;
        }
    }
    best
}

/// Uniform random action with probability `eps`, greedy action otherwise.
pub fn epsilon_greedy<R: Rng + ?Sized>(net: &QNetwork, s: &Observation, eps: f32, rng: &mut R) -> Result<usize> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::input(format!("epsilon {eps} outside [0, 1]")));
    }
    if rng.gen::<f32>() < eps {
        Ok(rng.gen_range(0..net.actions))
    } else {
        net.policy(s)
    }
}
