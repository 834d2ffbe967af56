//! Hand-written pixel policies used as reference players.

use super::griddrive::{CAR_TOP, ROAD_LEFT, ROAD_RIGHT};
use super::{native_pixel, EnvKind, Observation, CODE_PED, NATIVE_RES};

/// Reads the newest frame and returns an action id.
pub type ScriptedPolicy = fn(&Observation) -> usize;

pub fn scripted_policy(kind: EnvKind) -> ScriptedPolicy {
    match kind {
        EnvKind::MiniPong => pong_tracker,
        EnvKind::GridDrive => cautious_driver,
    }
}

/// Moves the paddle under the ball's centre with a one-pixel deadband.
fn pong_tracker(obs: &Observation) -> usize {
    let res = obs.shape()[1];
    let f = obs.frame(0);
    let (mut ball, mut nb, mut paddle, mut np) = (0.0, 0, 0.0, 0);
    for r in 0..NATIVE_RES {
        for c in 0..NATIVE_RES {
            let v = native_pixel(f, res, r, c);
            if v > 0.75 {
                ball += c as f32;
                nb += 1;
            } else if v > 0.25 && r == NATIVE_RES - 1 {
                paddle += c as f32;
                np += 1;
            }
        }
    }
    if nb == 0 || np == 0 {
        return 1;
    }
    let diff = ball / nb as f32 - paddle / np as f32;
    if diff > 1.0 {
        2
    } else if diff < -1.0 {
        0
    } else {
        1
    }
}

/// Accelerates unless a pedestrian is on the road within braking range.
pub(crate) fn pedestrian_on_road_near_car(frame: &[f32], res: usize) -> bool {
    let lo = (CAR_TOP - 14).max(0) as usize;
    let hi = (CAR_TOP + 4) as usize;
    (lo..=hi).any(|r| {
        (ROAD_LEFT as usize..ROAD_RIGHT as usize).any(|c| (native_pixel(frame, res, r, c) - CODE_PED).abs() < 0.08)
    })
}

fn cautious_driver(obs: &Observation) -> usize {
    if pedestrian_on_road_near_car(obs.frame(0), obs.shape()[1]) {
        1
    } else {
        0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Env, EnvConfig, PedMode};

    fn run(cfg: EnvConfig, episodes: usize, policy: impl Fn(&Observation) -> usize) -> (Vec<f32>, usize) {
        let mut env = Env::new(&cfg).unwrap();
        let mut scores = Vec::new();
        let mut terminals = 0;
        for _ in 0..episodes {
            let mut obs = env.reset();
            let mut score = 0.0;
            loop {
                let r = env.step(policy(&obs)).unwrap();
                score += r.reward;
                if r.done() {
                    terminals += r.terminal as usize;
                    break;
                }
                obs = r.observation;
            }
            scores.push(score);
        }
        (scores, terminals)
    }

    #[test]
    fn pong_tracker_is_near_optimal() {
        let cfg = EnvConfig::minipong(11);
        let mut env = crate::env::MiniPong::new(cfg.clone()).unwrap();
        let policy = scripted_policy(EnvKind::MiniPong);
        let (mut got, mut best) = (0.0, 0.0);
        for _ in 0..100 {
            let mut obs = env.reset();
            best += env.max_remaining_score();
            loop {
                let r = env.step(policy(&obs)).unwrap();
                got += r.reward;
                if r.done() {
                    break;
                }
                obs = r.observation;
            }
        }
        assert!(got >= 0.95 * best, "{got} vs {best}");
    }

    #[test]
    fn cautious_driver_never_collides_in_reasonable_mode() {
        let (_, hits) = run(EnvConfig::griddrive(PedMode::Reasonable, 3), 100, scripted_policy(EnvKind::GridDrive));
        assert_eq!(hits, 0);
    }

    #[test]
    fn always_accelerating_collides_with_distracted_pedestrians() {
        let (_, hits) = run(EnvConfig::griddrive(PedMode::Distracted, 3), 100, |_| 0);
        assert!(hits > 50, "{hits}");
    }

    #[test]
    fn cautious_driver_keeps_moving() {
        let (scores, _) = run(EnvConfig::griddrive(PedMode::Distracted, 4), 10, scripted_policy(EnvKind::GridDrive));
        let mean = scores.iter().sum::<f32>() / scores.len() as f32;
        assert!(mean > 50.0, "{mean}");
    }
}
