use liftkit::denoiser::DenoiserConfig;
use liftkit::pose::{generate_synthetic_dataset, GeneratorConfig, PoseSample, SkeletonSpec};
use liftkit::schedule::ScheduleConfig;
use liftkit::trainer::{load_checkpoint, save_checkpoint, TrainConfig, TrainState};
use liftkit::Error;

fn three_joint_skeleton() -> SkeletonSpec {
    SkeletonSpec {
        name: "chain3".into(),
        joint_names: vec!["root".into(), "mid".into(), "tip".into()],
        parents: vec![None, Some(0), Some(1)],
        bone_lengths: vec![0.0, 400.0, 300.0],
        mirror_map: vec![0, 1, 2],
        rest_directions: vec![[0.0, 1.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]],
    }
}

fn setup(n: usize, epochs: usize, lr: f64) -> (TrainState, Vec<PoseSample>) {
    let skel = three_joint_skeleton();
    let gen = GeneratorConfig {
        feature_levels: 2,
        feature_dim: 16,
        ..Default::default()
    };
    let data = generate_synthetic_dataset(&skel, n, &gen, 7).unwrap();
    let model = DenoiserConfig {
        joints: 3,
        levels: 2,
        dim: 16,
        heads: 2,
        p2c_blocks: 1,
        j2j_blocks: 1,
        ..Default::default()
    };
    let train = TrainConfig {
        batch_size: 10,
        epochs,
        lr_start: lr,
        flip_prob: 0.0,
        seed: 11,
        schedule: ScheduleConfig::default(),
        ..Default::default()
    };
    (TrainState::new(model, train, skel).unwrap(), data)
}

#[test]
fn toy_training_halves_the_loss() {
    let (mut state, data) = setup(50, 200, 1e-3);
    state.fit(&data, None).unwrap();
    let first = state.history[0].mean_loss;
    let last = state.history.last().unwrap().mean_loss;
    assert!(last < 0.5 * first, "loss went from {first} to {last}");
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let (mut state, data) = setup(20, 1, 0.0);
    let before = state.model.clone();
    state.train_epoch(&data).unwrap();
    assert_eq!(state.model, before);
}

#[test]
fn training_is_deterministic() {
    let (mut a, data) = setup(20, 3, 1e-3);
    let (mut b, _) = setup(20, 3, 1e-3);
    a.fit(&data, None).unwrap();
    b.fit(&data, None).unwrap();
    assert_eq!(a, b);
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (mut state, data) = setup(20, 2, 1e-3);
    state.fit(&data, None).unwrap();
    let p1 = dir.path().join("a.ckpt");
    let p2 = dir.path().join("b.ckpt");
    save_checkpoint(&p1, &state).unwrap();
    let loaded = load_checkpoint(&p1).unwrap();
    assert_eq!(loaded, state);
    save_checkpoint(&p2, &loaded).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("resume.ckpt");
    let (mut straight, data) = setup(30, 5, 1e-3);
    straight.fit(&data, None).unwrap();

    let (mut partial, _) = setup(30, 3, 1e-3);
    partial.fit(&data, Some(&path)).unwrap();
    let mut resumed = load_checkpoint(&path).unwrap();
    assert_eq!(resumed.epoch, 3);
    resumed.config.epochs = 5;
    resumed.fit(&data, None).unwrap();
    assert_eq!(resumed.model, straight.model);
    assert_eq!(resumed.optimizer, straight.optimizer);
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt");
    let (state, _) = setup(5, 1, 1e-3);
    save_checkpoint(&path, &state).unwrap();
    let good = std::fs::read(&path).unwrap();

    let mut bad_magic = good.clone();
    bad_magic[0] ^= 0xFF;
    std::fs::write(&path, &bad_magic).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format(m)) if m.contains("magic")));

    let mut bad_version = good.clone();
    bad_version[8] = 99;
    std::fs::write(&path, &bad_version).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format(m)) if m.contains("version")));

    std::fs::write(&path, &good[..good.len() - 3]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format(m)) if m.contains("truncated")));

    let mut trailing = good.clone();
    trailing.push(0);
    std::fs::write(&path, &trailing).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
}

#[test]
fn mismatched_data_is_a_validation_error() {
    let (mut state, _) = setup(5, 1, 1e-3);
    let skel = SkeletonSpec::preset("toy8").unwrap();
    let other = generate_synthetic_dataset(&skel, 3, &GeneratorConfig::default(), 1).unwrap();
    assert!(state.train_epoch(&other).unwrap_err().is_validation());
    assert!(state.train_epoch(&[]).unwrap_err().is_validation());
}
