use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{upscale, EnvConfig, FrameStack, Observation, StepResult, NATIVE_RES};
use crate::error::{Error, Result};

pub const BALL_CODE: f32 = 1.0;
pub const PADDLE_CODE: f32 = 0.5;

const N: i32 = NATIVE_RES as i32;
pub(crate) const BALL: i32 = 2;
pub(crate) const PADDLE_W: i32 = 6;
const PADDLE_ROW: i32 = N - 1;
const PADDLE_SPEED: i32 = 3;
/// Ball top row at which its bottom edge sits directly above the paddle.
const CONTACT_Y: i32 = PADDLE_ROW - BALL;
const VY: i32 = 2;

/// Full simulator state on the native grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PongState {
    pub ball_x: i32,
    pub ball_y: i32,
    pub vx: i32,
    pub vy: i32,
    pub paddle_x: i32,
    pub steps: usize,
}

impl PongState {
    fn valid(&self) -> bool {
        (0..=N - BALL).contains(&self.ball_x)
            && (0..=CONTACT_Y).contains(&self.ball_y)
            && self.vx.abs() == 1
            && self.vy.abs() == VY
            && (0..=N - PADDLE_W).contains(&self.paddle_x)
    }
}

enum Advance {
    Flying,
    Hit,
    Miss,
}

fn advance_ball(s: &mut PongState) -> Advance {
    let mut nx = s.ball_x + s.vx;
    if nx < 0 {
        nx = -nx;
        s.vx = -s.vx;
    } else if nx > N - BALL {
        nx = 2 * (N - BALL) - nx;
        s.vx = -s.vx;
    }
    let mut ny = s.ball_y + s.vy;
    if ny < 0 {
        ny = -ny;
        s.vy = -s.vy;
    }
    s.ball_x = nx;
    if ny < CONTACT_Y {
        s.ball_y = ny;
        return Advance::Flying;
    }
    let overlap = nx + BALL > s.paddle_x && nx < s.paddle_x + PADDLE_W;
    if overlap {
        s.ball_y = 2 * CONTACT_Y - ny;
        s.vy = -s.vy;
        Advance::Hit
    } else {
        s.ball_y = CONTACT_Y;
        Advance::Miss
    }
}

/// Single-paddle Pong: keep the ball from passing the bottom edge.
#[derive(Clone, Debug)]
pub struct MiniPong {
    config: EnvConfig,
    rng: ChaCha8Rng,
    state: PongState,
    stack: FrameStack,
    done: bool,
}

impl MiniPong {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        let res = config.resolution;
        let mut env = Self {
            stack: FrameStack::new(config.kind.stack_depth(), res, res),
            config,
            rng,
            state: PongState { ball_x: 0, ball_y: 0, vx: 1, vy: VY, paddle_x: 0, steps: 0 },
            done: true,
        };
        env.reset();
        Ok(env)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn state(&self) -> PongState {
        self.state
    }

    /// Overwrites the simulator state; the frame stack is refilled with the new frame.
    pub fn set_state(&mut self, state: PongState) -> Result<()> {
        if !state.valid() {
            return Err(Error::input(format!("invalid pong state {state:?}")));
        }
        self.state = state;
        self.done = false;
        self.stack.reset(self.render());
        Ok(())
    }

    pub fn reset(&mut self) -> Observation {
        self.state = PongState {
            ball_x: self.rng.gen_range(0..=N - BALL),
            ball_y: 0,
            vx: if self.rng.gen::<bool>() { 1 } else { -1 },
            vy: VY,
            paddle_x: self.rng.gen_range(0..=N - PADDLE_W),
            steps: 0,
        };
        self.done = false;
        self.stack.reset(self.render());
        self.stack.observation()
    }

    pub fn observation(&self) -> Observation {
        self.stack.observation()
    }

    pub fn step(&mut self, action: usize) -> Result<StepResult> {
        if self.done {
            return Err(Error::state("episode finished; call reset before step"));
        }
        let dx = match action {
            0 => -PADDLE_SPEED,
            1 => 0,
            2 => PADDLE_SPEED,
            a => return Err(Error::input(format!("unknown minipong action {a}"))),
        };
        let s = &mut self.state;
        s.paddle_x = (s.paddle_x + dx).clamp(0, N - PADDLE_W);
        s.steps += 1;
        let (reward, terminal) = match advance_ball(s) {
            Advance::Flying => (0.0, false),
            Advance::Hit => (1.0, false),
            Advance::Miss => (-1.0, true),
        };
        let truncated = !terminal && s.steps >= self.config.max_steps;
        self.done = terminal || truncated;
        self.stack.push(self.render());
        Ok(StepResult { observation: self.stack.observation(), reward, terminal, truncated })
    }

    /// Score a perfect player would still collect from the current state.
    /// The ball's path never depends on the paddle, so every contact counts.
    pub fn max_remaining_score(&self) -> f32 {
        let mut s = self.state;
        let mut score = 0.0;
        while s.steps < self.config.max_steps {
            s.steps += 1;
            s.paddle_x = (s.ball_x - 2).clamp(0, N - PADDLE_W);
            match advance_ball(&mut s) {
                Advance::Hit => score += 1.0,
                Advance::Flying => {}
                Advance::Miss => unreachable!("a paddle centred on the ball cannot miss"),
            }
        }
        score
    }

    fn render(&self) -> Vec<f32> {
        let mut f = vec![0.0; NATIVE_RES * NATIVE_RES];
        let s = &self.state;
        for c in s.paddle_x..s.paddle_x + PADDLE_W {
            f[(PADDLE_ROW * N + c) as usize] = PADDLE_CODE;
        }
        for r in s.ball_y..s.ball_y + BALL {
            for c in s.ball_x..s.ball_x + BALL {
                f[(r * N + c) as usize] = BALL_CODE;
            }
        }
        upscale(&f, self.config.resolution)
    }
}
