use rlviz::config::{Preset, RunConfig};
use rlviz::generator::LossMode;
use rlviz::pipeline::{run_all, run_stage, Stage, Workspace};
use rlviz::Error;

#[test]
fn desk_pipeline_runs_end_to_end_and_emits_every_report() {
    let cfg = RunConfig::preset(Preset::Desk);
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::new(dir.path());
    let reports = run_all(&cfg, &ws).unwrap();
    let mut names = vec!["train-agent".to_string(), "collect".into()];
    names.extend(LossMode::ALL.iter().map(|m| format!("train-generator-{}", m.name())));
    names.extend(["saliency", "eval-recon", "synthesize", "novelty", "retrieve"].map(String::from));
    assert_eq!(reports.iter().map(|r| r.name.clone()).collect::<Vec<_>>(), names);
    for r in &reports {
        let text = std::fs::read_to_string(ws.report(&r.name)).unwrap();
        assert!(text.contains(&format!("config_hash = {}", cfg.hash())), "{}", r.name);
        assert!(text.contains("seed = 0"));
    }
    for img in ["samples", "reconstructions", "retrieval", "saliency"] {
        let bytes = std::fs::read(ws.image(img)).unwrap();
        assert!(bytes.starts_with(b"P5"), "{img}");
    }
    let recon = &reports[6];
    for key in ["raw_score", "full_score", "lp-only_score", "plain-vae_score"] {
        assert!(recon.get(key).unwrap().parse::<f64>().unwrap().is_finite(), "{key}");
    }
}

#[test]
fn stages_demand_their_prerequisites() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::new(dir.path());
    let cfg = RunConfig::default();
    let expect = [
        (Stage::Collect, "train-agent"),
        (Stage::TrainGenerator(LossMode::Full), "train-agent"),
        (Stage::Synthesize, "train-agent"),
        (Stage::EvalRecon, "train-agent"),
        (Stage::Novelty, "synthesize"),
        (Stage::Retrieve, "synthesize"),
        (Stage::Saliency, "train-agent"),
    ];
    for (stage, producer) in expect {
        match run_stage(stage, &cfg, &ws) {
            Err(Error::MissingArtifact { producer: p, .. }) => assert_eq!(p, producer, "{stage:?}"),
            other => panic!("{stage:?}: {other:?}"),
        }
    }
}
