mod common;

use std::sync::OnceLock;

use rlviz::agent::{evaluate_policy, QNetwork};
use rlviz::env::{scripted_policy, EnvConfig, EnvKind, BALL_CODE, PADDLE_CODE};
use rlviz::generator::saliency_masks;

fn agent() -> &'static QNetwork {
    static AGENT: OnceLock<QNetwork> = OnceLock::new();
    AGENT.get_or_init(common::pong_agent)
}

#[test]
fn trained_minipong_agent_reaches_sixty_percent_of_scripted() {
    let env = EnvConfig::minipong(common::PONG_EVAL_ENV);
    let net = agent();
    let learned = evaluate_policy(&env, 100, |s| net.policy(s)).unwrap();
    let tracker = scripted_policy(EnvKind::MiniPong);
    let scripted = evaluate_policy(&env, 100, |s| Ok(tracker(s))).unwrap();
    let mean = |v: &[f32]| v.iter().sum::<f32>() / v.len() as f32;
    assert!(mean(&learned) >= 0.6 * mean(&scripted), "agent {} vs scripted {}", mean(&learned), mean(&scripted));
}

#[test]
fn saliency_concentrates_near_ball_and_paddle() {
    let net = agent();
    let (_, held) = common::datasets(net, &EnvConfig::minipong(0), 1, 200);
    let masks = saliency_masks(net, &held.frames, true).unwrap();
    let mut ratios = Vec::new();
    for (s, m) in held.frames.iter().zip(&masks) {
        let [k, h, w] = s.shape();
        let objects: Vec<(usize, usize)> = (0..h * w)
            .filter(|&p| (0..k).any(|c| {
                let v = s.data()[c * h * w + p];
                (v - BALL_CODE).abs() < 0.1 || (v - PADDLE_CODE).abs() < 0.1
            }))
            .map(|p| (p / w, p % w))
            .collect();
        let region: Vec<usize> = (0..h * w)
            .filter(|&p| {
                let (r, c) = ((p / w) as f64, (p % w) as f64);
                objects.iter().any(|&(or, oc)| (r - or as f64).hypot(c - oc as f64) <= 5.0)
            })
            .collect();
        let mass: f64 = region.iter().map(|&p| m.weights[p] as f64).sum();
        let uniform = region.len() as f64 / (h * w) as f64;
        ratios.push(mass / uniform);
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    assert!(mean >= 3.0, "mean mass ratio {mean:.2}");
}
