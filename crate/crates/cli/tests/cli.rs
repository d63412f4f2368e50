use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_attngan"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Tiny synthetic setup: 4 train and 3 test images per domain at 16×16.
fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let cfg = dir.join("run.toml");
    std::fs::write(
        &cfg,
        format!(
            "root = \"{}\"\nout = \"{}\"\nimage_size = 16\ntrain_count = 4\ntest_count = 3\n\
             epochs_keep = 1\nepochs_decay = 1\ncheckpoint_every = 1\ngrid_every = 1\n{extra}",
            p(&dir.join("data")),
            p(&dir.join("run"))
        ),
    )
    .unwrap();
    cfg
}

fn gen(dir: &Path, extra: &str) -> PathBuf {
    let cfg = write_config(dir, extra);
    let o = run(&["gen-data", "--config", p(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    cfg
}

fn trained(dir: &Path) -> PathBuf {
    let cfg = gen(dir, "");
    let o = run(&["train", "--config", p(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    dir.join("run/checkpoints/latest.ckpt")
}

fn tree_bytes(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["trainA", "trainB", "testA", "testB", "masksA", "masksB"] {
        let mut files: Vec<_> = std::fs::read_dir(root.join(sub)).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        for f in files {
            out.push((f.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&f).unwrap()));
        }
    }
    out
}

#[test]
fn gen_data_populates_and_repeats_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = gen(dir.path(), "");
    let first = tree_bytes(&dir.path().join("data"));
    assert_eq!(first.len(), 4 * 2 + 3 * 2 + 7 * 2);
    let o = run(&["gen-data", "--config", p(&cfg)]);
    assert!(o.status.success());
    assert_eq!(first, tree_bytes(&dir.path().join("data")));
    assert!(String::from_utf8_lossy(&o.stdout).contains("trainA 4"));
}

#[test]
fn missing_root_fails_naming_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "seed = 1\n").unwrap();
    let o = run(&["gen-data", "--config", p(&cfg)]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("root"), "{}", stderr(&o));
}

#[test]
fn unknown_key_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bogus_key = 1\n");
    let o = run(&["gen-data", "--config", p(&cfg)]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("bogus_key"));
}

#[test]
fn train_smoke_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let run_dir = dir.path().join("run");
    let csv = std::fs::read_to_string(run_dir.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 4);
    assert!(run_dir.join("grids/epoch_0002.png").is_file());

    // Continue from the end of epoch 1 into a copy of the run directory.
    let cfg = dir.path().join("run.toml");
    let resumed = dir.path().join("resumed");
    std::fs::create_dir_all(&resumed).unwrap();
    std::fs::copy(run_dir.join("loss.csv"), resumed.join("loss.csv")).unwrap();
    let o = run(&[
        "train",
        "--config",
        p(&cfg),
        "--resume",
        p(&run_dir.join("checkpoints/epoch_0001.ckpt")),
        "--out",
        p(&resumed),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("finished epoch 2"));
    assert!(!resumed.join("checkpoints/epoch_0001.ckpt").exists());
    assert!(resumed.join("checkpoints/epoch_0002.ckpt").is_file());
    assert_eq!(std::fs::read_to_string(resumed.join("loss.csv")).unwrap(), csv);
    assert_eq!(
        std::fs::read(resumed.join("checkpoints/epoch_0002.ckpt")).unwrap(),
        std::fs::read(run_dir.join("checkpoints/epoch_0002.ckpt")).unwrap()
    );
}

#[test]
fn same_seed_runs_write_identical_logs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    trained(a.path());
    trained(b.path());
    let read = |d: &Path| std::fs::read_to_string(d.join("run/loss.csv")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
}

#[test]
fn supervised_without_masks_fails_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = gen(dir.path(), "");
    std::fs::remove_dir_all(dir.path().join("data/masksB")).unwrap();
    let o = run(&["train", "--config", p(&cfg), "--mode", "supervised"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("mask"), "{}", stderr(&o));
    assert!(!dir.path().join("run/loss.csv").exists());
}

#[test]
fn eval_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let out = dir.path().join("eval");
    let data = dir.path().join("data");
    let o = run(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--direction", "y2x", "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("eval_y2x.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "id,psnr_bg,ssim_bg,attn_iou");
    assert_eq!(csv.lines().count(), 1 + 3);
    assert!(out.join("eval_y2x.md").is_file());

    let o = run(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--direction", "x2z"]);
    assert_eq!(o.status.code(), Some(2));

    let o = run(&[
        "eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&out), "--force-attention", "zero",
    ]);
    assert!(o.status.success());
    let csv = std::fs::read_to_string(out.join("eval_x2y.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.split(',').nth(1) == Some("inf")), "{csv}");

    std::fs::remove_dir_all(data.join("masksA")).unwrap();
    let o = run(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&out)]);
    assert!(o.status.success());
    assert!(stderr(&o).contains("notice"));
    assert_eq!(std::fs::read_to_string(out.join("eval_x2y.csv")).unwrap().lines().next(), Some("id"));
}

#[test]
fn eval_rejects_bad_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "");
    let bogus = dir.path().join("bogus.ckpt");
    std::fs::write(&bogus, b"ATTNGAN\0garbage").unwrap();
    let o = run(&["eval", "--checkpoint", p(&bogus), "--data", p(&dir.path().join("data"))]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("checkpoint"));
}

#[test]
fn infer_writes_three_deterministic_files() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let input = dir.path().join("data/testA/test_0000.png");
    let prefix = dir.path().join("out/sample");
    std::fs::create_dir_all(prefix.parent().unwrap()).unwrap();
    let call = |extra: &[&str]| {
        let mut args = vec!["infer", "--checkpoint", p(&ckpt), "--input", p(&input), "--out", p(&prefix)];
        args.extend_from_slice(extra);
        let o = run(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        ["_composite.png", "_attention.png", "_transformed.png"]
            .map(|s| std::fs::read(format!("{}{s}", p(&prefix))).unwrap())
    };
    let first = call(&[]);
    assert_eq!(first, call(&[]));

    let forced = call(&["--force-attention", "zero"]);
    let decode = |b: &[u8]| image::load_from_memory(b).unwrap().to_rgb8().into_raw();
    assert_eq!(decode(&forced[0]), decode(&std::fs::read(&input).unwrap()));

    let o = run(&["infer", "--checkpoint", p(&ckpt), "--input", p(&dir.path().join("missing.png")), "--out", p(&prefix)]);
    assert!(!o.status.success());
}

#[test]
fn gradcheck_lists_every_check_once() {
    let o = run(&["gradcheck", "--trials", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = String::from_utf8_lossy(&o.stdout).into_owned();
    let names: Vec<&str> = table.lines().skip(1).map(|l| l.split_whitespace().next().unwrap()).collect();
    for op in attngan::tensor::OpKind::ALL {
        assert_eq!(names.iter().filter(|n| **n == op.name()).count(), 1, "{}", op.name());
    }
    assert_eq!(names.len(), attngan::tensor::OpKind::ALL.len() + 6);
}

#[test]
fn gradcheck_catches_corrupted_rule() {
    let o = run(&["gradcheck", "--trials", "2", "--corrupt-op", "sigmoid"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("sigmoid"), "{}", stderr(&o));
}
