use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{upscale, EnvConfig, FrameStack, Observation, PedMode, StepResult, NATIVE_RES};
use crate::error::{Error, Result};

pub const CODE_ROAD: f32 = 0.2;
pub const CODE_CAR: f32 = 0.5;
pub const CODE_PED: f32 = 0.8;
pub const CODE_LIGHT: f32 = 1.0;

const N: i32 = NATIVE_RES as i32;
pub(crate) const ROAD_LEFT: i32 = 8;
pub(crate) const ROAD_RIGHT: i32 = 24;
pub(crate) const CAR_TOP: i32 = 25;
const CAR_H: i32 = 5;
const CAR_W: i32 = 4;
const LANE_X: [i32; 2] = [10, 18];
const PED: i32 = 2;
const CURB_LEFT: i32 = 5;
const CURB_RIGHT: i32 = 25;
const PED_SPEED: i32 = 2;
const LIGHT_X: i32 = 28;
const LIGHT_PERIOD: i32 = 16;
pub(crate) const MAX_SPEED: i32 = 3;
/// Steps a pedestrian needs to get from one curb to the other.
const CROSS_STEPS: i32 = (CURB_RIGHT - CURB_LEFT) / PED_SPEED;
/// Farthest the car can move while a pedestrian is crossing.
const MAX_TRAVEL: i32 = MAX_SPEED * CROSS_STEPS;
const REASONABLE_START_P: f64 = 0.3;
const DISTRACTED_START_P: f64 = 0.15;
const SPAWN_GAP: (i32, i32) = (10, 22);
const SPAWN_HORIZON: i32 = 45;
const FIRST_PED: (i32, i32) = (6, 20);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PedState {
    Waiting,
    Crossing,
    Done,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pedestrian {
    /// World row of the pedestrian's top edge.
    pub world_y: i32,
    /// Left column.
    pub x: i32,
    /// +1 crossing left to right, -1 right to left.
    pub dir: i32,
    pub state: PedState,
}

impl Pedestrian {
    /// Rows ahead of the car's top edge.
    fn ahead(&self, pos: i32) -> i32 {
        self.world_y - pos
    }

    fn visible(&self, pos: i32) -> bool {
        let top = CAR_TOP - self.ahead(pos);
        top + PED > 0 && top < N
    }

    pub fn on_road(&self) -> bool {
        self.x + PED > ROAD_LEFT && self.x < ROAD_RIGHT
    }
}

/// Top-down two-lane road with an ego car and crossing pedestrians.
#[derive(Clone, Debug)]
pub struct GridDrive {
    config: EnvConfig,
    mode: PedMode,
    rng: ChaCha8Rng,
    /// World row of the car's top edge.
    pos: i32,
    speed: i32,
    lane: usize,
    peds: Vec<Pedestrian>,
    next_spawn: i32,
    steps: usize,
    stack: FrameStack,
    done: bool,
    collisions: usize,
}

impl GridDrive {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        let mode = config.ped_mode.ok_or_else(|| Error::config("griddrive needs a ped_mode"))?;
        let res = config.resolution;
        let mut env = Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            stack: FrameStack::new(config.kind.stack_depth(), res, res),
            config,
            mode,
            pos: 0,
            speed: 0,
            lane: 0,
            peds: Vec::new(),
            next_spawn: 0,
            steps: 0,
            done: true,
            collisions: 0,
        };
        env.reset();
        Ok(env)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn speed(&self) -> i32 {
        self.speed
    }

    pub fn lane(&self) -> usize {
        self.lane
    }

    pub fn pedestrians(&self) -> &[Pedestrian] {
        &self.peds
    }

    /// Rows ahead of the car for a pedestrian.
    pub fn ahead_of(&self, ped: &Pedestrian) -> i32 {
        ped.ahead(self.pos)
    }

    /// Places the car and replaces all pedestrians; positions are relative to the car.
    pub fn set_scenario(&mut self, speed: i32, lane: usize, peds: &[(i32, i32, i32, PedState)]) -> Result<()> {
        if !(0..=MAX_SPEED).contains(&speed) || lane > 1 {
            return Err(Error::input(format!("invalid car state speed={speed} lane={lane}")));
        }
        self.speed = speed;
        self.lane = lane;
        self.peds = peds
            .iter()
            .map(|&(d, x, dir, state)| Pedestrian { world_y: self.pos + d, x, dir, state })
            .collect();
        self.next_spawn = self.pos + SPAWN_HORIZON + 100;
        self.done = false;
        self.stack.reset(self.render());
        Ok(())
    }

    pub fn reset(&mut self) -> Observation {
        self.pos = 0;
        self.speed = 0;
        self.lane = self.rng.gen_range(0..2);
        self.steps = 0;
        self.peds.clear();
        let first = self.rng.gen_range(FIRST_PED.0..=FIRST_PED.1);
        self.spawn_at(first);
        self.next_spawn = first;
        self.spawn_ahead();
        self.done = false;
        self.stack.reset(self.render());
        self.stack.observation()
    }

    pub fn observation(&self) -> Observation {
        self.stack.observation()
    }

    fn spawn_at(&mut self, world_y: i32) {
        let left = self.rng.gen::<bool>();
        let (x, dir) = if left { (CURB_LEFT, 1) } else { (CURB_RIGHT, -1) };
        self.peds.push(Pedestrian { world_y, x, dir, state: PedState::Waiting });
    }

    fn spawn_ahead(&mut self) {
        while self.next_spawn < self.pos + SPAWN_HORIZON {
            self.next_spawn += self.rng.gen_range(SPAWN_GAP.0..=SPAWN_GAP.1);
            self.spawn_at(self.next_spawn);
        }
    }

    fn update_peds(&mut self) {
        let pos = self.pos;
        for i in 0..self.peds.len() {
            let p = self.peds[i];
            match p.state {
                PedState::Waiting => {
                    let d = p.ahead(pos);
                    let start = match self.mode {
                        PedMode::Reasonable => {
                            (d > 1 + MAX_TRAVEL || d < -(CAR_H + 1)) && self.rng.gen_bool(REASONABLE_START_P)
                        }
                        PedMode::Distracted => p.visible(pos) && d >= 2 && self.rng.gen_bool(DISTRACTED_START_P),
                    };
                    if start {
                        self.peds[i].state = PedState::Crossing;
                    }
                }
                PedState::Crossing => {
                    let q = &mut self.peds[i];
                    q.x += q.dir * PED_SPEED;
                    if q.x <= CURB_LEFT || q.x >= CURB_RIGHT {
                        q.x = q.x.clamp(CURB_LEFT, CURB_RIGHT);
                        q.state = PedState::Done;
                    }
                }
                PedState::Done => {}
            }
        }
    }

    fn collides(&self) -> bool {
        let cx = LANE_X[self.lane];
        self.peds.iter().any(|p| {
            let d = p.ahead(self.pos);
            let rows = (-(CAR_H - 1)..=PED - 1).contains(&d);
            let cols = p.x + PED > cx && p.x < cx + CAR_W;
            rows && cols
        })
    }

    pub fn step(&mut self, action: usize) -> Result<StepResult> {
        if self.done {
            return Err(Error::state("episode finished; call reset before step"));
        }
        let mut reward = 0.0;
        match action {
            0 => self.speed = (self.speed + 1).min(MAX_SPEED),
            1 => self.speed = 0,
            2 | 3 => {
                self.lane = action - 2;
                reward += self.config.steer_penalty;
            }
            a => return Err(Error::input(format!("unknown griddrive action {a}"))),
        }
        self.steps += 1;
        self.update_peds();
        self.pos += self.speed;
        let terminal = self.speed > 0 && self.collides();
        if terminal {
            self.collisions += 1;
            reward = self.config.collision_penalty;
        } else {
            reward += self.speed as f32 * self.config.c_speed;
        }
        self.peds.retain(|p| p.ahead(self.pos) >= -(N - CAR_TOP) - PED);
        self.spawn_ahead();
        let truncated = !terminal && self.steps >= self.config.max_steps;
        self.done = terminal || truncated;
        self.stack.push(self.render());
        Ok(StepResult { observation: self.stack.observation(), reward, terminal, truncated })
    }

    fn render(&self) -> Vec<f32> {
        let mut f = vec![0.0; NATIVE_RES * NATIVE_RES];
        let mut put = |r: i32, c: i32, v: f32| {
            if (0..N).contains(&r) && (0..N).contains(&c) {
                f[(r * N + c) as usize] = v;
            }
        };
        for r in 0..N {
            for c in ROAD_LEFT..ROAD_RIGHT {
                put(r, c, CODE_ROAD);
            }
            let world = self.pos + CAR_TOP - r;
            if world.rem_euclid(LIGHT_PERIOD) < 2 {
                put(r, LIGHT_X, CODE_LIGHT);
                put(r, LIGHT_X + 1, CODE_LIGHT);
            }
        }
        let cx = LANE_X[self.lane];
        for r in CAR_TOP..CAR_TOP + CAR_H {
            for c in cx..cx + CAR_W {
                put(r, c, CODE_CAR);
            }
        }
        for p in &self.peds {
            let top = CAR_TOP - p.ahead(self.pos);
            for r in top..top + PED {
                for c in p.x..p.x + PED {
                    put(r, c, CODE_PED);
                }
            }
        }
        upscale(&f, self.config.resolution)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(mode: PedMode, seed: u64) -> GridDrive {
        GridDrive::new(EnvConfig::griddrive(mode, seed)).unwrap()
    }

    #[test]
    fn reset_renders_all_classes() {
        for seed in 0..20 {
            let e = env(PedMode::Reasonable, seed);
            let obs = e.observation();
            let f = obs.frame(0);
            let n = |code: f32| f.iter().filter(|&&v| v == code).count();
            assert!(n(CODE_ROAD) > 0);
            assert_eq!(n(CODE_CAR), (CAR_W * CAR_H) as usize);
            assert!(n(CODE_PED) >= 4, "seed {seed}");
            assert!(n(CODE_PED) % 2 == 0);
            // Road is a vertical band.
            for r in 0..32 {
                assert_eq!(f[r * 32], 0.0);
                assert!(f[r * 32 + 8] != 0.0);
            }
        }
    }

    #[test]
    fn distracted_pedestrian_in_lane_is_hit_when_accelerating() {
        let mut e = env(PedMode::Distracted, 0);
        // Pedestrian right in front of the car, inside lane 0.
        e.set_scenario(1, 0, &[(2, 10, 1, PedState::Crossing)]).unwrap();
        let r = e.step(0).unwrap();
        assert_eq!(r.reward, -10.0);
        assert!(r.terminal);
        assert!(matches!(e.step(0), Err(Error::State(_))));
    }

    #[test]
    fn braking_avoids_the_same_pedestrian() {
        let mut e = env(PedMode::Distracted, 0);
        e.set_scenario(1, 0, &[(2, 10, 1, PedState::Crossing)]).unwrap();
        let r = e.step(1).unwrap();
        assert_eq!(r.reward, 0.0);
        assert!(!r.terminal);
    }

    #[test]
    fn speed_reward_and_steer_penalty() {
        let mut e = env(PedMode::Reasonable, 0);
        e.set_scenario(0, 0, &[]).unwrap();
        let r = e.step(0).unwrap();
        assert!((r.reward - 0.1).abs() < 1e-6);
        let r = e.step(3).unwrap();
        assert!((r.reward - (0.1 - 0.05)).abs() < 1e-6);
        assert_eq!(e.lane(), 1);
        assert!(matches!(e.step(9), Err(Error::Input(_))));
    }

    #[test]
    fn reasonable_mode_never_collides_under_random_driving() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut e = env(PedMode::Reasonable, 1);
        for _ in 0..20 {
            e.reset();
            loop {
                let a = if rng.gen_bool(0.7) { 0 } else { rng.gen_range(0..4) };
                let r = e.step(a).unwrap();
                assert!(!r.terminal);
                if r.done() {
                    break;
                }
            }
        }
    }

    #[test]
    fn observation_stays_in_unit_range() {
        let mut e = env(PedMode::Distracted, 2);
        for _ in 0..300 {
            let r = e.step(0).unwrap();
            assert!(r.observation.data().iter().all(|v| (0.0..=1.0).contains(v)));
            if r.done() {
                e.reset();
            }
        }
    }
}
