//! Seedable toy environments with stacked grayscale observations.
//!
//! Channel 0 of every observation is the newest frame; older frames follow.

mod griddrive;
mod minipong;
mod scripted;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub use griddrive::{GridDrive, PedState, Pedestrian, CODE_CAR, CODE_LIGHT, CODE_PED, CODE_ROAD};
pub use minipong::{MiniPong, PongState, BALL_CODE, PADDLE_CODE};
pub use scripted::{scripted_policy, ScriptedPolicy};

/// Both games are simulated on a 32x32 grid; larger resolutions are
/// nearest-neighbour upscales of it.
pub const NATIVE_RES: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    MiniPong,
    GridDrive,
}

impl EnvKind {
    pub fn stack_depth(self) -> usize {
        match self {
            EnvKind::MiniPong => 2,
            EnvKind::GridDrive => 4,
        }
    }

    pub fn action_count(self) -> usize {
        match self {
            EnvKind::MiniPong => 3,
            EnvKind::GridDrive => 4,
        }
    }

    pub fn action_names(self) -> &'static [&'static str] {
        match self {
            EnvKind::MiniPong => &["left", "stay", "right"],
            EnvKind::GridDrive => &["accelerate", "brake", "steer-left", "steer-right"],
        }
    }
}

impl std::str::FromStr for EnvKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minipong" => Ok(EnvKind::MiniPong),
            "griddrive" => Ok(EnvKind::GridDrive),
            other => Err(Error::config(format!("unknown env `{other}` (expected minipong or griddrive)"))),
        }
    }
}

impl std::fmt::Display for EnvKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EnvKind::MiniPong => "minipong",
            EnvKind::GridDrive => "griddrive",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PedMode {
    /// Pedestrians only cross when the ego car cannot reach them.
    Reasonable,
    /// Pedestrians step onto the road at random times.
    Distracted,
}

impl std::str::FromStr for PedMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reasonable" => Ok(PedMode::Reasonable),
            "distracted" => Ok(PedMode::Distracted),
            other => Err(Error::config(format!("unknown pedestrian mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for PedMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PedMode::Reasonable => "reasonable",
            PedMode::Distracted => "distracted",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub kind: EnvKind,
    pub resolution: usize,
    pub seed: u64,
    /// Only meaningful for GridDrive.
    pub ped_mode: Option<PedMode>,
    pub max_steps: usize,
    /// GridDrive reward per unit of speed per step.
    pub c_speed: f32,
    /// GridDrive reward on hitting a pedestrian (terminal).
    pub collision_penalty: f32,
    /// GridDrive reward added for every steering action.
    pub steer_penalty: f32,
}

impl EnvConfig {
    pub fn minipong(seed: u64) -> Self {
        Self { kind: EnvKind::MiniPong, resolution: 32, seed, ped_mode: None, max_steps: 500, c_speed: 0.1, collision_penalty: -10.0, steer_penalty: -0.05 }
    }

    pub fn griddrive(mode: PedMode, seed: u64) -> Self {
        Self { kind: EnvKind::GridDrive, ped_mode: Some(mode), ..Self::minipong(seed) }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.resolution.is_power_of_two() || self.resolution < NATIVE_RES {
            return Err(Error::config(format!("resolution {} must be a power of two >= {NATIVE_RES}", self.resolution)));
        }
        if self.max_steps == 0 {
            return Err(Error::config("max_steps must be positive"));
        }
        match (self.kind, self.ped_mode) {
            (EnvKind::MiniPong, Some(_)) => Err(Error::config("ped_mode is only valid for griddrive")),
            (EnvKind::GridDrive, None) => Err(Error::config("griddrive needs a ped_mode")),
            _ if !(self.c_speed.is_finite() && self.collision_penalty.is_finite() && self.steer_penalty.is_finite()) => {
                Err(Error::config("reward coefficients must be finite"))
            }
            _ => Ok(()),
        }
    }

    pub fn observation_shape(&self) -> [usize; 3] {
        [self.kind.stack_depth(), self.resolution, self.resolution]
    }
}

/// Stacked frames `[k, H, W]`, every value in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation(Tensor);

impl Observation {
    pub fn new(frames: Tensor) -> Result<Self> {
        if frames.rank() != 3 {
            return Err(Error::dim(format!("observation must be [k, H, W], got {:?}", frames.shape())));
        }
        if frames.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::input("observation values must lie in [0, 1]"));
        }
        Ok(Self(frames))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.0.shape();
        [s[0], s[1], s[2]]
    }

    pub fn data(&self) -> &[f32] {
        self.0.data()
    }

    /// Frame `i` (0 = newest) as an `H*W` slice.
    pub fn frame(&self, i: usize) -> &[f32] {
        let [_, h, w] = self.shape();
        &self.0.data()[i * h * w..(i + 1) * h * w]
    }

    /// `[1, k, H, W]` batch of one.
    pub fn batched(&self) -> Tensor {
        let [k, h, w] = self.shape();
        self.0.clone().reshape(&[1, k, h, w]).expect("same length")
    }

    /// Stacks observations into an `[N, k, H, W]` batch.
    pub fn batch<'a>(items: impl IntoIterator<Item = &'a Observation>) -> Result<Tensor> {
        let ts: Vec<Tensor> = items.into_iter().map(|o| o.0.clone()).collect();
        Tensor::stack(&ts)
    }

    /// Splits an `[N, k, H, W]` batch back into observations, clamping into `[0, 1]`.
    pub fn unbatch(batch: &Tensor) -> Result<Vec<Observation>> {
        let s = batch.shape();
        if s.len() != 4 {
            return Err(Error::dim(format!("expected [N, k, H, W], got {s:?}")));
        }
        let per = s[1] * s[2] * s[3];
        batch
            .data()
            .chunks(per)
            .map(|c| {
                let data = c.iter().map(|v| v.clamp(0.0, 1.0)).collect();
                Observation::new(Tensor::new(vec![s[1], s[2], s[3]], data)?)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f32,
    /// Episode ended by the environment's own rules (miss, collision).
    pub terminal: bool,
    /// Episode ended by the step cap.
    pub truncated: bool,
}

impl StepResult {
    pub fn done(&self) -> bool {
        self.terminal || self.truncated
    }
}

/// Upscales a native frame to `res x res`.
pub(crate) fn upscale(native: &[f32], res: usize) -> Vec<f32> {
    if res == NATIVE_RES {
        return native.to_vec();
    }
    let s = res / NATIVE_RES;
    let mut out = vec![0.0; res * res];
    for r in 0..res {
        for c in 0..res {
            out[r * res + c] = native[(r / s) * NATIVE_RES + c / s];
        }
    }
    out
}

/// Samples a frame of any supported resolution on the native grid.
pub(crate) fn native_pixel(frame: &[f32], res: usize, r: usize, c: usize) -> f32 {
    let s = res / NATIVE_RES;
    frame[(r * s) * res + c * s]
}

/// Rolling stack of the `k` most recent frames.
#[derive(Clone, Debug)]
pub(crate) struct FrameStack {
    frames: std::collections::VecDeque<Vec<f32>>,
    depth: usize,
    h: usize,
    w: usize,
}

impl FrameStack {
    pub(crate) fn new(depth: usize, h: usize, w: usize) -> Self {
        Self { frames: std::collections::VecDeque::with_capacity(depth), depth, h, w }
    }

    pub(crate) fn reset(&mut self, frame: Vec<f32>) {
        self.frames.clear();
        for _ in 0..self.depth {
            self.frames.push_back(frame.clone());
        }
    }

    pub(crate) fn push(&mut self, frame: Vec<f32>) {
        self.frames.pop_back();
        self.frames.push_front(frame);
    }

    pub(crate) fn observation(&self) -> Observation {
        let mut data = Vec::with_capacity(self.depth * self.h * self.w);
        for f in &self.frames {
            data.extend_from_slice(f);
        }
        Observation(Tensor::new(vec![self.depth, self.h, self.w], data).expect("frame sizes"))
    }
}

/// Either environment behind one type.
#[derive(Clone, Debug)]
pub enum Env {
    MiniPong(MiniPong),
    GridDrive(GridDrive),
}

impl Env {
    pub fn new(config: &EnvConfig) -> Result<Self> {
        config.validate()?;
        Ok(match config.kind {
            EnvKind::MiniPong => Env::MiniPong(MiniPong::new(config.clone())?),
            EnvKind::GridDrive => Env::GridDrive(GridDrive::new(config.clone())?),
        })
    }

    pub fn config(&self) -> &EnvConfig {
        match self {
            Env::MiniPong(e) => e.config(),
            Env::GridDrive(e) => e.config(),
        }
    }

    pub fn kind(&self) -> EnvKind {
        self.config().kind
    }

    pub fn action_count(&self) -> usize {
        self.kind().action_count()
    }

    pub fn reset(&mut self) -> Observation {
        match self {
            Env::MiniPong(e) => e.reset(),
            Env::GridDrive(e) => e.reset(),
        }
    }

    pub fn step(&mut self, action: usize) -> Result<StepResult> {
        match self {
            Env::MiniPong(e) => e.step(action),
            Env::GridDrive(e) => e.step(action),
        }
    }

    pub fn observation(&self) -> Observation {
        match self {
            Env::MiniPong(e) => e.observation(),
            Env::GridDrive(e) => e.observation(),
        }
    }
}

/// Builds an environment and returns its first observation.
pub fn reset(config: &EnvConfig) -> Result<(Env, Observation)> {
    let mut env = Env::new(config)?;
    let obs = env.reset();
    Ok((env, obs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invalid_resolution_is_config_error() {
        let mut c = EnvConfig::minipong(0);
        c.resolution = 30;
        assert!(matches!(Env::new(&c), Err(Error::Config(_))));
    }

    #[test]
    fn ped_mode_only_for_griddrive() {
        let mut c = EnvConfig::minipong(0);
        c.ped_mode = Some(PedMode::Reasonable);
        assert!(matches!(Env::new(&c), Err(Error::Config(_))));
        let mut g = EnvConfig::griddrive(PedMode::Reasonable, 0);
        g.ped_mode = None;
        assert!(matches!(Env::new(&g), Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_same_first_observation() {
        for cfg in [EnvConfig::minipong(7), EnvConfig::griddrive(PedMode::Distracted, 7)] {
            let (_, a) = reset(&cfg).unwrap();
            let (_, b) = reset(&cfg).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.shape(), cfg.observation_shape());
        }
    }

    #[test]
    fn unbatch_inverts_batch() {
        let (_, a) = reset(&EnvConfig::minipong(1)).unwrap();
        let (_, b) = reset(&EnvConfig::minipong(2)).unwrap();
        let t = Observation::batch([&a, &b]).unwrap();
        assert_eq!(t.shape(), &[2, 2, 32, 32]);
        assert_eq!(Observation::unbatch(&t).unwrap(), vec![a, b]);
    }
}
