#![allow(dead_code)]

use rlviz::agent::{collect_dataset, train_dqn, AgentConfig, QNetwork};
use rlviz::env::{EnvConfig, Observation, PedMode};
use rlviz::generator::GeneratorArch;
use rlviz::io::FrameDataset;

pub const PONG_TRAIN_ENV: u64 = 1;
pub const PONG_EVAL_ENV: u64 = 1000;

pub fn pong_agent() -> QNetwork {
    train_dqn(&EnvConfig::minipong(PONG_TRAIN_ENV), &AgentConfig::default(), 7).unwrap().0
}

pub fn griddrive_agent() -> QNetwork {
    train_dqn(&EnvConfig::griddrive(PedMode::Reasonable, 1), &AgentConfig::default(), 7).unwrap().0
}

/// Training and held-out frames recorded with the agent's epsilon-greedy policy.
pub fn datasets(agent: &QNetwork, env: &EnvConfig, frames: usize, heldout: usize) -> (FrameDataset, FrameDataset) {
    let train = collect_dataset(agent, &env.with_seed(11), frames, 0.1, 3).unwrap();
    let held = collect_dataset(agent, &env.with_seed(99), heldout, 0.1, 4).unwrap();
    (train, held)
}

pub fn desk_arch(input: [usize; 3]) -> GeneratorArch {
    GeneratorArch { input, latent: 32, base_filters: 16, stages: 3 }
}

/// Pixels of the newest frame satisfying `pred`.
pub fn count_pixels(o: &Observation, pred: impl Fn(f32) -> bool) -> usize {
    o.frame(0).iter().filter(|&&v| pred(v)).count()
}
