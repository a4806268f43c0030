use provico::data_io::{generate_synthetic, SyntheticSpec};
use provico::trainer::{
    load_checkpoint, parse_checkpoint, save_checkpoint, train, train_epoch, TrainConfig, TrainState,
    CHECKPOINT_VERSION,
};
use provico::Error;

fn setup() -> (provico::data_io::Corpus, TrainConfig) {
    let corpus = generate_synthetic(&SyntheticSpec {
        classes: 3,
        videos_per_class: 8,
        feature_dim: 10,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        embed_dim: 6,
        hidden_dims: vec![16],
        samples: 4,
        batch_size: 8,
        epochs: 6,
        stage1_epochs: 2,
        base_lr: 3e-3,
        mining_mode: provico::mining::MiningMode::Adaptive,
        ..TrainConfig::default()
    };
    (corpus, cfg)
}

#[test]
fn interrupted_training_matches_uninterrupted() {
    let (corpus, cfg) = setup();
    let dir = tempfile::tempdir().unwrap();

    let mut full = TrainState::new(cfg.clone(), 10).unwrap();
    train(&mut full, &corpus, |_| Ok(())).unwrap();
    save_checkpoint(&full, &dir.path().join("full.json")).unwrap();

    let mut half = TrainState::new(cfg, 10).unwrap();
    for _ in 0..3 {
        train_epoch(&mut half, &corpus).unwrap();
    }
    save_checkpoint(&half, &dir.path().join("half.json")).unwrap();
    let mut resumed = load_checkpoint(&dir.path().join("half.json")).unwrap();
    train(&mut resumed, &corpus, |_| Ok(())).unwrap();
    save_checkpoint(&resumed, &dir.path().join("resumed.json")).unwrap();

    let a = std::fs::read(dir.path().join("full.json")).unwrap();
    let b = std::fs::read(dir.path().join("resumed.json")).unwrap();
    assert!(a == b, "resumed checkpoint differs from uninterrupted run");
}

#[test]
fn metrics_are_append_only_and_ordered() {
    let (corpus, cfg) = setup();
    let mut state = TrainState::new(cfg, 10).unwrap();
    let mut seen = Vec::new();
    train(&mut state, &corpus, |s| {
        assert!(s.metrics.starts_with(&seen));
        seen = s.metrics.clone();
        Ok(())
    })
    .unwrap();
    let epochs: Vec<usize> = state.metrics.iter().map(|m| m.epoch).collect();
    assert_eq!(epochs, (0..6).collect::<Vec<_>>());
    assert!(state.params.is_finite());
}

#[test]
fn truncation_and_version_errors() {
    let (corpus, cfg) = setup();
    let mut state = TrainState::new(TrainConfig { epochs: 1, ..cfg }, 10).unwrap();
    train(&mut state, &corpus, |_| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    save_checkpoint(&state, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();

    for cut in [text.len() / 3, text.len() / 2, text.len() - 2] {
        match parse_checkpoint(&text[..cut]) {
            Err(Error::CheckpointParse { offset, .. }) => assert!(offset <= cut),
            other => panic!("cut {cut}: {other:?}"),
        }
    }
    let bumped = text.replacen(
        &format!("\"format_version\": {CHECKPOINT_VERSION}"),
        "\"format_version\": 99",
        1,
    );
    assert!(matches!(
        parse_checkpoint(&bumped),
        Err(Error::VersionMismatch { found: 99, .. })
    ));
    assert!(parse_checkpoint(&text).is_ok());
}
