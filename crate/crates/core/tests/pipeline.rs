use attngan::config::RunConfig;
use attngan::data::{synth_generate, DatasetManifest};
use attngan::metrics::evaluate_testset;
use attngan::networks::{Direction, ForcedAttention};
use attngan::objectives::Mode;
use attngan::training::{load_checkpoint, train_loop, DirSink, TrainData, TrainState};

fn small_config(root: &std::path::Path) -> RunConfig {
    RunConfig::from_toml(&format!(
        r#"
root = "{}"
image_size = 16
train_count = 3
test_count = 2
epochs_keep = 1
epochs_decay = 1
checkpoint_every = 1
grid_every = 1
"#,
        root.display()
    ))
    .unwrap()
}

#[test]
fn synthesize_train_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(&dir.path().join("data"));
    let manifest = synth_generate(&cfg.synth_config().unwrap(), cfg.root().unwrap()).unwrap();
    assert_eq!((manifest.n_x(), manifest.n_y()), (3, 3));

    let reloaded = DatasetManifest::load(cfg.root().unwrap()).unwrap();
    let data = TrainData::load(&reloaded, Mode::Unsupervised).unwrap();
    let mut state = TrainState::new(cfg.train_config().unwrap(), 3).unwrap();
    let out = dir.path().join("run");
    let mut sink = DirSink::new(&out, None).unwrap();
    train_loop(&mut state, &data, &mut sink).unwrap();
    assert_eq!((state.epoch, state.iteration), (2, 6));

    let csv = std::fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert!(out.join("grids/epoch_0002.png").exists());
    let restored = load_checkpoint(&out.join("checkpoints/latest.ckpt")).unwrap();
    assert_eq!(restored.iteration, 6);

    for dir in [Direction::XtoY, Direction::YtoX] {
        let report = evaluate_testset(&restored.bundle, &reloaded, dir, None).unwrap();
        assert_eq!(report.rows.len(), 2);
        let iou = report.iou().unwrap();
        assert!((0.0..=1.0).contains(&iou.median));
    }
}

#[test]
fn forced_zero_attention_keeps_every_test_background() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(&dir.path().join("data"));
    let manifest = synth_generate(&cfg.synth_config().unwrap(), cfg.root().unwrap()).unwrap();
    let state = TrainState::new(cfg.train_config().unwrap(), 3).unwrap();
    let report = evaluate_testset(&state.bundle, &manifest, Direction::XtoY, Some(ForcedAttention::Zero)).unwrap();
    assert!(report.rows.iter().all(|r| r.psnr_bg == Some(f64::INFINITY)));
    assert!(report.rows.iter().all(|r| r.ssim_bg == Some(1.0)));
}
