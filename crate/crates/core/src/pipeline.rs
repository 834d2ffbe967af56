//! Pipeline stages behind the `probe` subcommands. Every stage reads its
//! inputs from and writes its outputs to one workspace directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::agent::{argmax, collect_dataset, evaluate_policy, train_dqn, QNetwork};
use crate::analysis::{evaluate_on_reconstructions, mse, nearest_training_frame, novelty_histogram, MeanReconstruction, Metric};
use crate::config::RunConfig;
use crate::env::{scripted_policy, Observation};
use crate::error::{Error, Result};
use crate::generator::{saliency_masks, train_generator, Generator, LossMode};
use crate::io::{load_agent, save_agent, write_atomic, write_image_grid, FrameDataset};
use crate::nn::Tensor;
use crate::synthesis::synthesize;

const AGENT_SEED: u64 = 1;
const COLLECT_SEED: u64 = 2;
const HELDOUT_SEED: u64 = 3;
const GENERATOR_SEED: u64 = 4;
const SYNTH_SEED: u64 = 5;
const EVAL_ENV_SEED: u64 = 10_000;
const HELDOUT_ENV_SEED: u64 = 20_000;

/// Key-value report. The header always carries the config hash and seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub name: String,
    pub entries: Vec<(String, String)>,
}

impl Report {
    fn new(name: &str, cfg: &RunConfig) -> Self {
        let mut r = Self { name: name.to_string(), entries: Vec::new() };
        r.put("stage", name);
        r.put("config_hash", cfg.hash());
        r.put("seed", cfg.seed);
        r.put("version", env!("CARGO_PKG_VERSION"));
        r
    }

    pub fn put(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

fn list<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn mean(xs: &[f32]) -> f64 {
    xs.iter().map(|&x| x as f64).sum::<f64>() / xs.len().max(1) as f64
}

/// Directory layout of one pipeline run.
#[derive(Clone, Debug)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn agent(&self) -> PathBuf {
        self.root.join("agent.rlvz")
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset.rlvd")
    }

    pub fn heldout(&self) -> PathBuf {
        self.root.join("heldout.rlvd")
    }

    pub fn generator(&self, mode: LossMode) -> PathBuf {
        self.root.join(format!("generator-{}.rlvz", mode.name()))
    }

    pub fn samples(&self) -> PathBuf {
        self.root.join("samples.rlvd")
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(format!("{name}.txt"))
    }

    pub fn image(&self, name: &str) -> PathBuf {
        self.root.join("images").join(format!("{name}.pgm"))
    }

    fn write_report(&self, report: &Report) -> Result<()> {
        write_atomic(&self.report(&report.name), report.render().as_bytes())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    TrainAgent,
    Collect,
    TrainGenerator(LossMode),
    Synthesize,
    EvalRecon,
    Novelty,
    Retrieve,
    Saliency,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::TrainAgent => "train-agent",
            Stage::Collect => "collect",
            Stage::TrainGenerator(_) => "train-generator",
            Stage::Synthesize => "synthesize",
            Stage::EvalRecon => "eval-recon",
            Stage::Novelty => "novelty",
            Stage::Retrieve => "retrieve",
            Stage::Saliency => "saliency",
        }
    }
}

/// Runs one stage, writes its report and returns it.
pub fn run_stage(stage: Stage, cfg: &RunConfig, ws: &Workspace) -> Result<Report> {
    cfg.validate()?;
    let started = Instant::now();
    log::info!("{} (config {}, seed {})", stage.name(), cfg.hash(), cfg.seed);
    let report = match stage {
        Stage::TrainAgent => train_agent_stage(cfg, ws)?,
        Stage::Collect => collect_stage(cfg, ws)?,
        Stage::TrainGenerator(mode) => train_generator_stage(cfg, ws, mode)?,
        Stage::Synthesize => synthesize_stage(cfg, ws)?,
        Stage::EvalRecon => eval_recon_stage(cfg, ws)?,
        Stage::Novelty => novelty_stage(cfg, ws)?,
        Stage::Retrieve => retrieve_stage(cfg, ws)?,
        Stage::Saliency => saliency_stage(cfg, ws)?,
    };
    ws.write_report(&report)?;
    log::info!("{} done in {:.1?}", stage.name(), started.elapsed());
    Ok(report)
}

/// All stages in dependency order, training every loss mode.
pub fn run_all(cfg: &RunConfig, ws: &Workspace) -> Result<Vec<Report>> {
    let mut stages = vec![Stage::TrainAgent, Stage::Collect];
    stages.extend(LossMode::ALL.map(Stage::TrainGenerator));
    stages.extend([Stage::Saliency, Stage::EvalRecon, Stage::Synthesize, Stage::Novelty, Stage::Retrieve]);
    stages.into_iter().map(|s| run_stage(s, cfg, ws)).collect()
}

fn load_checked_agent(cfg: &RunConfig, ws: &Workspace) -> Result<QNetwork> {
    let agent = load_agent(&ws.agent())?;
    let want = cfg.env_config().observation_shape();
    if agent.input_shape() != want || agent.action_count() != cfg.env.action_count() {
        return Err(Error::config(format!(
            "agent in {} takes {:?} with {} actions but the config describes {:?} with {}",
            ws.agent().display(),
            agent.input_shape(),
            agent.action_count(),
            want,
            cfg.env.action_count()
        )));
    }
    Ok(agent)
}

fn load_dataset(path: &Path) -> Result<FrameDataset> {
    FrameDataset::load(path)
}

fn train_agent_stage(cfg: &RunConfig, ws: &Workspace) -> Result<Report> {
    let env = cfg.env_config();
    let (agent, log) = train_dqn(&env, &cfg.agent_config(), cfg.seed.wrapping_add(AGENT_SEED))?;
    save_agent(&agent, &ws.agent())?;
    let eval_env = env.with_seed(cfg.seed.wrapping_add(EVAL_ENV_SEED));
    let greedy = evaluate_policy(&eval_env, cfg.eval_episodes, |s| agent.policy(s))?;
    let scripted = scripted_policy(cfg.env);
    let reference = evaluate_policy(&eval_env, cfg.eval_episodes, |s| Ok(scripted(s)))?;
    let mut r = Report::new("train-agent", cfg);
    r.put("env", cfg.env);
    r.put("steps", log.steps);
    r.put("updates", log.updates);
    r.put("episodes", log.episode_scores.len());
    let tail = &log.episode_scores[log.episode_scores.len().saturating_sub(10)..];
    r.put("last10_train_score", mean(tail));
    r.put("eval_score", mean(&greedy));
    r.put("scripted_score", mean(&reference));
    r.put("eval_scores", list(&greedy));
    Ok(r)
}

fn collect_stage(cfg: &RunConfig, ws: &Workspace) -> Result<Report> {
    let agent = load_checked_agent(cfg, ws)?;
    let env = cfg.env_config();
    let ds = collect_dataset(&agent, &env, cfg.frames, cfg.collect_epsilon as f32, cfg.seed.wrapping_add(COLLECT_SEED))?;
    let held_env = env.with_seed(cfg.seed.wrapping_add(HELDOUT_ENV_SEED));
    let held = collect_dataset(&agent, &held_env, cfg.heldout_frames, cfg.collect_epsilon as f32, cfg.seed.wrapping_add(HELDOUT_SEED))?;
    ds.save(&ws.dataset())?;
    held.save(&ws.heldout())?;
    let mut r = Report::new("collect", cfg);
    r.put("frames", ds.len());
    r.put("heldout_frames", held.len());
    r.put("epsilon", cfg.collect_epsilon);
    r.put("terminals", ds.terminals.iter().filter(|&&t| t).count());
    r.put("reward_sum", ds.rewards.iter().map(|&x| x as f64).sum::<f64>());
    Ok(r)
}

fn train_generator_stage(cfg: &RunConfig, ws: &Workspace, mode: LossMode) -> Result<Report> {
    let agent = load_checked_agent(cfg, ws)?;
    let ds = load_dataset(&ws.dataset())?;
    let mut gcfg = cfg.generator_config(mode);
    gcfg.diagnostic_path = Some(ws.root().join(format!("generator-{}.diverged.rlvz", mode.name())));
    let (generator, curves) = train_generator(&ds, &agent, &gcfg, cfg.seed.wrapping_add(GENERATOR_SEED))?;
    generator.save(&ws.generator(mode))?;
    let mut r = Report::new(&format!("train-generator-{}", mode.name()), cfg);
    r.put("loss", mode);
    r.put("eta", gcfg.weights.eta);
    r.put("lambda", gcfg.weights.lambda);
    r.put("epochs", gcfg.epochs);
    r.put("uniform_masks", curves.uniform_masks);
    r.put("epoch_totals", list(&curves.epoch_totals));
    if let Some(last) = curves.steps.last() {
        r.put("final_l_p", last.l_p);
        r.put("final_l_a", last.l_a);
        r.put("final_kl", last.kl);
        r.put("final_total", last.total);
    }
    Ok(r)
}

fn load_generator(cfg: &RunConfig, ws: &Workspace, mode: LossMode) -> Result<Generator> {
    let path = ws.generator(mode);
    if !path.exists() {
        return Err(Error::MissingArtifact { path, producer: "train-generator" });
    }
    let g = Generator::load(&path)?;
    if *g.arch() != cfg.generator_arch() {
        return Err(Error::config(format!("generator in {} does not match the configured architecture", path.display())));
    }
    Ok(g)
}

fn synthesize_stage(cfg: &RunConfig, ws: &Workspace) -> Result<Report> {
    let agent = load_checked_agent(cfg, ws)?;
    let generator = load_generator(cfg, ws, cfg.loss)?;
    let scfg = cfg.synthesis_config()?;
    let samples = synthesize(&generator, &agent, &scfg, cfg.seed.wrapping_add(SYNTH_SEED))?;
    let mut out = FrameDataset::new(cfg.env_config().observation_shape(), cfg.env.action_count());
    for s in &samples {
        out.push(s.state.clone(), argmax(&s.q), 0.0, s.q.clone(), false)?;
    }
    out.save(&ws.samples())?;
    let states: Vec<Observation> = samples.iter().map(|s| s.state.clone()).collect();
    write_image_grid(&states, 4, &ws.image("samples"))?;
    let names = cfg.env.action_names();
    let mut r = Report::new("synthesize", cfg);
    r.put("generator", cfg.loss);
    r.put("target", scfg.target.kind);
    r.put("beta", scfg.target.beta);
    r.put("alpha", scfg.alpha);
    r.put("steps", scfg.steps);
    r.put("samples", samples.len());
    r.put("diverged", samples.iter().filter(|s| s.diverged).count());
    r.put("energy_decreased", samples.iter().filter(|s| s.final_energy() <= s.initial_energy()).count());
    for (i, s) in samples.iter().enumerate() {
        let target = scfg.target.value(&s.q.iter().map(|&v| v as f64).collect::<Vec<_>>())?;
        r.put(
            &format!("sample{i}"),
            format!(
                "action={} target={target} energy={}->{} diverged={} q={}",
                names[argmax(&s.q)],
                s.initial_energy(),
                s.final_energy(),
                s.diverged,
                list(&s.q)
            ),
        );
    }
    Ok(r)
}

fn eval_recon_stage(cfg: &RunConfig, ws: &Workspace) -> Result<Report> {
    let agent = load_checked_agent(cfg, ws)?;
    let held = load_dataset(&ws.heldout())?;
    let eval_env = cfg.env_config().with_seed(cfg.seed.wrapping_add(EVAL_ENV_SEED));
    let mut r = Report::new("eval-recon", cfg);
    r.put("episodes", cfg.eval_episodes);
    let mut found = 0;
    let picks: Vec<Observation> = held.frames.iter().step_by((held.len() / 4).max(1)).take(4).cloned().collect();
    let mut grid = picks.clone();
    for mode in LossMode::ALL {
        if !ws.generator(mode).exists() {
            continue;
        }
        found += 1;
        let g = load_generator(cfg, ws, mode)?;
        let rep = evaluate_on_reconstructions(&agent, &mut MeanReconstruction(&g), &eval_env, cfg.eval_episodes, mode.name())?;
        if found == 1 {
            r.put("raw_score", rep.raw_mean());
            r.put("raw_scores", list(&rep.raw));
        }
        let recon = Observation::unbatch(&g.reconstruct_batch(&Observation::batch(&held.frames)?)?)?;
        let mut err = 0.0;
        let mut agree = 0;
        for (s, s_hat) in held.frames.iter().zip(&recon) {
            err += mse(s, s_hat)?;
            if agent.policy(s)? == agent.policy(s_hat)? {
                agree += 1;
            }
        }
        r.put(&format!("{}_score", mode.name()), rep.reconstructed_mean());
        r.put(&format!("{}_scores", mode.name()), list(&rep.reconstructed));
        r.put(&format!("{}_heldout_mse", mode.name()), err / held.len() as f64);
        r.put(&format!("{}_action_agreement", mode.name()), agree as f64 / held.len() as f64);
        for p in &picks {
            grid.push(g.reconstruct(p)?);
        }
    }
    if found == 0 {
        return Err(Error::MissingArtifact { path: ws.generator(cfg.loss), producer: "train-generator" });
    }
    write_image_grid(&grid, picks.len(), &ws.image("reconstructions"))?;
    Ok(r)
}

fn novelty_stage(cfg: &RunConfig, ws: &Workspace) -> Result<Report> {
    let samples = load_samples(ws)?;
    let ds = load_dataset(&ws.dataset())?;
    let rep = novelty_histogram(&samples.frames, &ds.frames)?;
    let mut r = Report::new("novelty", cfg);
    r.put("samples", samples.len());
    r.put("training_frames", ds.len());
    r.put("mean_fraction", rep.fractions.iter().sum::<f64>() / rep.fractions.len() as f64);
    for (t, c) in rep.thresholds.iter().zip(&rep.cumulative) {
        r.put(&format!("percent_above_{t}"), c);
    }
    r.put("fractions", list(&rep.fractions));
    r.put("nearest", list(&rep.nearest));
    Ok(r)
}

fn load_samples(ws: &Workspace) -> Result<FrameDataset> {
    let path = ws.samples();
    if !path.exists() {
        return Err(Error::MissingArtifact { path, producer: "synthesize" });
    }
    FrameDataset::load(&path)
}

fn retrieve_stage(cfg: &RunConfig, ws: &Workspace) -> Result<Report> {
    let samples = load_samples(ws)?;
    let ds = load_dataset(&ws.dataset())?;
    let objective = Metric::Objective(cfg.target_spec()?);
    let mut r = Report::new("retrieve", cfg);
    let mut grid = Vec::new();
    for (i, (s, q)) in samples.frames.iter().zip(&samples.q).enumerate() {
        let (l2, d_l2) = nearest_training_frame(s, None, &ds.frames, None, &Metric::L2)?;
        let (obj, d_obj) = nearest_training_frame(s, Some(q), &ds.frames, Some(&ds.q), &objective)?;
        r.put(&format!("sample{i}"), format!("l2_index={l2} l2_mse={d_l2} objective_index={obj} objective_gap={d_obj}"));
        grid.extend([s.clone(), ds.frames[l2].clone(), ds.frames[obj].clone()]);
    }
    write_image_grid(&grid, 3, &ws.image("retrieval"))?;
    Ok(r)
}

fn saliency_stage(cfg: &RunConfig, ws: &Workspace) -> Result<Report> {
    let agent = load_checked_agent(cfg, ws)?;
    let ds = load_dataset(&ws.dataset())?;
    let frames: Vec<Observation> = ds.frames.iter().step_by((ds.len() / 8).max(1)).take(8).cloned().collect();
    let masks = saliency_masks(&agent, &frames, cfg.blur)?;
    let mut grid = Vec::with_capacity(2 * frames.len());
    for (f, m) in frames.iter().zip(&masks) {
        let max = m.weights.iter().cloned().fold(0.0f32, f32::max);
        let scaled = m.weights.iter().map(|&w| if max > 0.0 { w / max } else { 0.0 }).collect();
        grid.push(f.clone());
        grid.push(Observation::new(Tensor::new(vec![1, m.height, m.width], scaled)?)?);
    }
    let newest: Vec<Observation> = grid
        .iter()
        .map(|o| {
            let [_, h, w] = o.shape();
            Observation::new(Tensor::new(vec![1, h, w], o.frame(0).to_vec())?)
        })
        .collect::<Result<_>>()?;
    write_image_grid(&newest, 4, &ws.image("saliency"))?;
    let mut r = Report::new("saliency", cfg);
    r.put("frames", frames.len());
    r.put("uniform_fallbacks", masks.iter().filter(|m| m.uniform_fallback).count());
    for (i, m) in masks.iter().enumerate() {
        let mut w = m.weights.clone();
        w.sort_by(|a, b| b.total_cmp(a));
        r.put(&format!("mask{i}_top50_mass"), w[..50.min(w.len())].iter().sum::<f32>());
    }
    Ok(r)
}
