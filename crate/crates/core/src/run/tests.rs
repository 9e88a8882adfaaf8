use super::*;
use crate::config::EncoderArch;

pub(crate) fn tiny_config(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        image_hw: [16, 16],
        frame_stack: 2,
        action_repeat: 2,
        feature_dim: 4,
        hidden_dim: 8,
        encoder: EncoderArch::Desk,
        batch_size: 8,
        replay_capacity: 64,
        exploration_steps: 10,
        total_env_steps: 40,
        eval_every: 20,
        eval_episodes: 2,
        episode_length: Some(12),
        ..RunConfig::default()
    }
}

fn quiet() -> TrainOptions {
    TrainOptions { resume: false, verbose: false }
}

fn first_column(path: &Path) -> Vec<usize> {
    fs::read_to_string(path).unwrap().lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect()
}

#[test]
fn train_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let summary = train(&tiny_config(1), &run, &quiet()).unwrap();
    assert_eq!(summary.counters.env_step, 40);
    let manifest = RunManifest::from_json(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    for f in &manifest.files {
        assert!(run.join(f).exists(), "{f}");
    }
    for f in RUN_FILES {
        assert!(manifest.files.iter().any(|m| m == f), "{f}");
    }
    assert_eq!(manifest.seeds, derive_seeds(1));
    let train_steps = first_column(&run.join("train.csv"));
    assert!(!train_steps.is_empty());
    assert!(train_steps.windows(2).all(|w| w[0] <= w[1]));
    let eval_steps = first_column(&run.join("eval.csv"));
    assert!(eval_steps.iter().all(|s| s % 20 == 0));
    // all, 1, 2, 3 and the average row at each of the two evaluations.
    assert_eq!(eval_steps.len(), 10);
    let header = fs::read_to_string(run.join("train.csv")).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header, TRAIN_HEADER.join(","));
    assert!(latest_checkpoint(&run.join("checkpoints")).unwrap().is_some());
    let evals: Vec<EvalReport> = serde_json::from_str(&fs::read_to_string(run.join("eval.json")).unwrap()).unwrap();
    assert_eq!(evals.iter().map(|e| e.step).collect::<Vec<_>>(), [20, 40]);
}

#[test]
fn same_seed_gives_identical_train_log() {
    let dir = tempfile::tempdir().unwrap();
    let read = |name: &str| fs::read(dir.path().join(name).join("train.csv")).unwrap();
    train(&tiny_config(2), &dir.path().join("a"), &quiet()).unwrap();
    train(&tiny_config(2), &dir.path().join("b"), &quiet()).unwrap();
    train(&tiny_config(3), &dir.path().join("c"), &quiet()).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn existing_run_needs_resume() {
    let dir = tempfile::tempdir().unwrap();
    train(&tiny_config(1), dir.path(), &quiet()).unwrap();
    let err = train(&tiny_config(1), dir.path(), &quiet()).unwrap_err();
    assert!(err.to_string().contains("--resume"), "{err}");
    let other = RunConfig { mad_alpha: 0.5, ..tiny_config(1) };
    assert!(train(&other, dir.path(), &TrainOptions { resume: true, verbose: false }).is_err());
}

#[test]
fn resume_continues_from_latest_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path();
    train(&tiny_config(4), run, &quiet()).unwrap();
    // Simulate an interruption after the first evaluation.
    for ext in ["bin", "json"] {
        fs::remove_file(run.join(format!("checkpoints/step_00000040.{ext}"))).unwrap();
    }
    let summary = train(&tiny_config(4), run, &TrainOptions { resume: true, verbose: false }).unwrap();
    assert_eq!(summary.resumed_from, Some(20));
    assert_eq!(summary.counters.env_step, 40);
    let eval_steps = first_column(&run.join("eval.csv"));
    assert_eq!(eval_steps.iter().filter(|&&s| s == 20).count(), 5);
    assert_eq!(eval_steps.iter().filter(|&&s| s == 40).count(), 5);
    let train_steps = first_column(&run.join("train.csv"));
    assert!(train_steps.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(summary.evals.len(), 2);
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let cfg = tiny_config(5);
    let mut trainer = Trainer::<f32>::new(&cfg, &derive_seeds(5)).unwrap();
    while trainer.counters.env_step < 30 {
        trainer.step().unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let bin = save_checkpoint(dir.path(), &trainer).unwrap();
    assert_eq!(resolve_checkpoint(dir.path()).unwrap(), bin);
    let (meta, agent) = load_agent(&bin).unwrap();
    assert_eq!(meta.counters, trainer.counters);
    assert_eq!(agent.state_tensors().concat(), trainer.agent.state_tensors().concat());
    assert_eq!(agent.updates, trainer.agent.updates);

    let mut raw = fs::read(&bin).unwrap();
    let last = raw.len() - 1;
    raw[last] ^= 1;
    fs::write(&bin, raw).unwrap();
    let err = load_agent(&bin).err().expect("corrupt blob is rejected");
    assert!(err.to_string().contains("corrupt"), "{err}");
}

#[test]
fn run_dir_default_layout() {
    let c = tiny_config(9);
    let d = default_run_dir(Path::new("root"), &c);
    let s = d.to_string_lossy().replace('\\', "/");
    assert!(s.starts_with("root/triview-reach/mad-sum-"), "{s}");
    assert!(s.ends_with("/seed9"), "{s}");
    assert_eq!(default_run_dir(Path::new("root"), &tiny_config(8)).parent(), d.parent());
}
