use std::path::Path;
use std::process::{Command, Output};

fn probe(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_probe")).args(args).arg("--workdir").arg(dir).env("RUST_LOG", "warn").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn paper_preset_dump() {
    let dir = tempfile::tempdir().unwrap();
    let o = probe(&["--preset", "paper", "--dump-config"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    for line in ["lambda = 0.0001", "eta = 0.001", "lr = 0.001", "batch_size = 16", "latent = 100", "collect_epsilon = 0.1", "gamma = 0.95"] {
        assert!(text.lines().any(|l| l == line), "{line} missing:\n{text}");
    }
}

#[test]
fn desk_preset_dump_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let o = probe(&["--dump-config", "--set", "seed=4"], dir.path());
    let text = stdout(&o);
    for line in ["latent = 32", "resolution = 32", "agent_steps = 50000", "epochs = 10", "seed = 4"] {
        assert!(text.lines().any(|l| l == line), "{line} missing:\n{text}");
    }
    let file = dir.path().join("run.toml");
    std::fs::write(&file, "epochs = 3\nbeta = 2.5\n").unwrap();
    let o = probe(&["--config", file.to_str().unwrap(), "--dump-config"], dir.path());
    assert!(stdout(&o).contains("epochs = 3\n") && stdout(&o).contains("beta = 2.5\n"));
}

#[test]
fn user_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = probe(&["collect"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("probe train-agent"), "{}", stderr(&o));
    let o = probe(&["--set", "bogus=1", "--dump-config"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bogus"));
    let o = probe(&["--preset", "huge", "--dump-config"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let o = probe(&["synthesize", "--target", "max"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let o = probe(&["no-such-command"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let o = probe(&["--help"], dir.path());
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn small_run_through_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let small = ["--set", "agent_steps=2000", "--set", "learning_starts=200", "--set", "frames=100", "--set", "heldout_frames=20", "--set", "epochs=1", "--set", "eval_episodes=2"];
    let run = |extra: &[&str]| {
        let mut args: Vec<&str> = extra.to_vec();
        args.extend_from_slice(&small);
        let o = probe(&args, dir.path());
        assert_eq!(o.status.code(), Some(0), "{extra:?}: {}", stderr(&o));
        stdout(&o)
    };
    assert!(run(&["train-agent"]).contains("stage = train-agent"));
    run(&["collect"]);
    run(&["train-generator", "--loss", "plain-vae"]);
    let synth = run(&["synthesize", "--loss", "plain-vae", "--target", "action:2", "--samples", "3", "--steps", "5"]);
    assert!(synth.contains("target = action:2") && synth.contains("samples = 3"), "{synth}");
    assert!(run(&["novelty"]).contains("percent_above_0.1"));
    run(&["retrieve", "--set", "target=\"action:2\""]);
    assert!(run(&["eval-recon"]).contains("plain-vae_score"));
    run(&["saliency"]);
    assert!(dir.path().join("reports/synthesize.txt").exists());
    assert!(dir.path().join("images/samples.pgm").exists());
}
