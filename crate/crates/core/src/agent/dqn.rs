use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::replay::{Batch, ReplayBuffer, Transition};
use super::{epsilon_greedy, AgentConfig, QNetwork};
use crate::env::{Env, EnvConfig};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, ForwardOpts, GradMode, Tape};

/// `y_i = r_i + gamma * Q_target(s'_i, argmax_a Q_online(s'_i, a))`, or `r_i` when terminal.
pub fn double_dqn_targets(
    rewards: &[f32],
    terminals: &[bool],
    online_next: &[f32],
    target_next: &[f32],
    actions: usize,
    gamma: f32,
) -> Vec<f32> {
    rewards
        .iter()
        .zip(terminals)
        .enumerate()
        .map(|(i, (&r, &done))| {
            if done {
                r
            } else {
                let row = &online_next[i * actions..(i + 1) * actions];
                let a = super::argmax(row);
                r + gamma * target_next[i * actions + a]
            }
        })
        .collect()
}

/// Huber loss value and derivative for residual `d`.
pub fn huber(d: f32, delta: f32) -> (f32, f32) {
    if d.abs() <= delta {
        (0.5 * d * d, d)
    } else {
        (delta * (d.abs() - 0.5 * delta), delta * d.signum())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: usize,
    pub updates: usize,
    pub episode_scores: Vec<f32>,
    /// Mean update loss over each window of `sync_period` steps.
    pub losses: Vec<f32>,
}

/// Online and target networks with their optimizer.
pub struct DqnLearner {
    pub online: QNetwork,
    pub target: QNetwork,
    adam: Adam,
    gamma: f32,
    huber_delta: f32,
}

impl DqnLearner {
    pub fn new(online: QNetwork, config: &AgentConfig) -> Self {
        Self {
            target: online.clone(),
            online,
            adam: Adam::new(AdamConfig::with_lr(config.lr)),
            gamma: config.gamma,
            huber_delta: config.huber_delta,
        }
    }

    pub fn sync_target(&mut self) {
        self.target = self.online.clone();
    }

    /// One gradient step on the mean Huber loss; returns the loss.
    pub fn update(&mut self, batch: &Batch) -> Result<f32> {
        let m = self.online.action_count();
        let n = batch.actions.len();
        let online_next = self.online.q_values_batch(&batch.s_next)?;
        let target_next = self.target.q_values_batch(&batch.s_next)?;
        let y = double_dqn_targets(&batch.rewards, &batch.terminals, online_next.data(), target_next.data(), m, self.gamma);

        let mut tape = Tape::new(GradMode::Standard);
        let x = tape.constant(batch.s.clone());
        let pass = self.online.forward(&mut tape, x, ForwardOpts::TRAIN)?;
        let q = tape.value(pass.output).data();
        let mut seed = vec![0.0; n * m];
        let mut loss = 0.0f64;
        for i in 0..n {
            let a = batch.actions[i];
            if a >= m {
                return Err(Error::input(format!("action {a} out of range in replay batch")));
            }
            let (l, g) = huber(q[i * m + a] - y[i], self.huber_delta);
            loss += l as f64;
            seed[i * m + a] = g / n as f32;
        }
        let loss = (loss / n as f64) as f32;
        if !loss.is_finite() {
            return Err(Error::numeric(format!("non-finite DQN loss after {} updates", self.adam.steps())));
        }
        tape.backward_with_seed(pass.output, &seed)?;
        self.adam.step_network(self.online.network_mut(), &tape, &pass)?;
        Ok(loss)
    }
}

/// Trains a double DQN from scratch. `seed` drives initialization,
/// exploration and replay sampling; the environment uses its own seed.
pub fn train_dqn(env_config: &EnvConfig, config: &AgentConfig, seed: u64) -> Result<(QNetwork, TrainLog)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = env_config.observation_shape();
    let actions = env_config.kind.action_count();
    let online = QNetwork::new(shape, actions, &config.conv_filters, config.hidden, &mut rng);
    let mut learner = DqnLearner::new(online, config);
    let mut env = Env::new(env_config)?;
    let mut replay = ReplayBuffer::new(config.replay_capacity, shape)?;
    let mut log = TrainLog::default();
    let mut obs = env.reset();
    let mut score = 0.0;
    let (mut window, mut window_n) = (0.0f64, 0usize);
    for t in 0..config.train_steps {
        let a = epsilon_greedy(&learner.online, &obs, config.epsilon_at(t), &mut rng)?;
        let r = env.step(a)?;
        score += r.reward;
        let done = r.done();
        replay.push(Transition { s: obs, a, r: r.reward, s_next: r.observation.clone(), terminal: r.terminal })?;
        obs = if done {
            log.episode_scores.push(score);
            score = 0.0;
            env.reset()
        } else {
            r.observation
        };
        let step = t + 1;
        if step >= config.learning_starts.max(config.batch_size) && step % config.train_every == 0 {
            let batch = replay.sample(config.batch_size, &mut rng)?;
            let loss = learner.update(&batch).map_err(|e| match e {
                Error::Numeric(msg) => Error::numeric(format!("{msg} (env step {step})")),
                other => other,
            })?;
            window += loss as f64;
            window_n += 1;
            log.updates += 1;
        }
        if step % config.sync_period == 0 {
            learner.sync_target();
            if window_n > 0 {
                log.losses.push((window / window_n as f64) as f32);
                log::debug!("step {step}: loss {:.5}, episodes {}", window / window_n as f64, log.episode_scores.len());
            }
            window = 0.0;
            window_n = 0;
        }
    }
    log.steps = config.train_steps;
    Ok((learner.online, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn terminal_target_is_reward() {
        let y = double_dqn_targets(&[1.5], &[true], &[9.0, 1.0], &[7.0, 7.0], 2, 0.9);
        assert_eq!(y, vec![1.5]);
    }

    #[test]
    fn online_selects_target_evaluates() {
        // Online prefers action 1, target values action 1 at 2.0 (and action 0 at 10.0).
        let y = double_dqn_targets(&[1.0], &[false], &[0.0, 5.0], &[10.0, 2.0], 2, 0.5);
        assert_eq!(y, vec![2.0]);
    }

    #[test]
    fn huber_is_continuous_at_delta() {
        let (a, ga) = huber(1.0, 1.0);
        let (b, gb) = huber(1.0 + 1e-6, 1.0);
        assert!((a - b).abs() < 1e-5);
        assert_eq!((ga, gb), (1.0, 1.0));
        assert_eq!(huber(-3.0, 1.0), (2.5, -1.0));
    }
}
