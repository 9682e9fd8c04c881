use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tbtnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tbtnet"))
        .args(args)
        .env_remove("TBTNET_DATA_ROOT")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn failure(out: &Output) -> String {
    assert!(!out.status.success(), "expected failure");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Train a toy model for two steps and return its checkpoint dir.
fn tiny_checkpoint(dir: &Path) -> PathBuf {
    let run = dir.join("run");
    ok(&tbtnet(&[
        "train",
        "--backbone",
        "toy",
        "--dataset",
        "synthetic",
        "--image-size",
        "64",
        "--batch-size",
        "1",
        "--max-steps",
        "2",
        "--set",
        "val_episodes=0",
        "--output-dir",
        s(&run),
    ]));
    run.join("checkpoint")
}

fn write_rgb(path: &Path, seed: u8) {
    let img = image::RgbImage::from_fn(40, 30, |x, y| {
        image::Rgb([(x * 6) as u8 ^ seed, (y * 8) as u8, seed.wrapping_mul(3)])
    });
    img.save(path).unwrap();
}

fn write_mask(path: &Path, on: bool) {
    let img = image::GrayImage::from_fn(40, 30, |x, y| {
        image::Luma([if on && (10..30).contains(&x) && (5..25).contains(&y) { 255 } else { 0 }])
    });
    img.save(path).unwrap();
}

fn assert_binary_png(path: &Path, w: u32, h: u32) {
    let img = image::open(path).unwrap().to_luma8();
    assert_eq!(img.dimensions(), (w, h), "{}", path.display());
    assert!(img.pixels().all(|p| p[0] == 0 || p[0] == 255));
}

#[test]
fn train_writes_logs_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ck = tiny_checkpoint(dir.path());
    assert!(ck.join("state.json").is_file());
    let run = dir.path().join("run");
    let log = std::fs::read_to_string(run.join("train.log")).unwrap();
    assert!(log.contains("step 2 loss"), "{log}");
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert!(metrics.lines().any(|l| l.contains("\"kind\":\"epoch\"")));
}

#[test]
fn defaults_are_printed_with_scheduled_epochs() {
    let out = tbtnet(&["params"]);
    let err = String::from_utf8_lossy(&out.stderr).into_owned();
    ok(&out);
    for line in ["batch_size=8", "lr=0.001", "epochs=50", "alpha=0.1", "beta=0.05"] {
        assert!(err.contains(line), "missing {line} in\n{err}");
    }
    let coco = tbtnet(&["params", "--dataset", "coco"]);
    assert!(String::from_utf8_lossy(&coco.stderr).contains("epochs=20"));
}

#[test]
fn params_follow_backbone_and_ablation() {
    let count = |args: &[&str]| -> usize {
        let out = ok(&tbtnet(args));
        out.lines()
            .find_map(|l| l.strip_prefix("learnable_params="))
            .unwrap()
            .parse()
            .unwrap()
    };
    let r101 = count(&["params"]);
    let r50 = count(&["params", "--backbone", "resnet50"]);
    let ablated = count(&["params", "--bi-transformer", "false"]);
    assert!((250_000..=500_000).contains(&r101));
    assert!(r50 < r101);
    assert!(ablated < r101);
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "backbone=resnet50\ndim=16 # narrower\n").unwrap();
    let out = tbtnet(&["params", "--config", s(&cfg), "--dim", "20"]);
    let err = String::from_utf8_lossy(&out.stderr).into_owned();
    ok(&out);
    assert!(err.contains("backbone=resnet50") && err.contains("dim=20"), "{err}");
    let bad = failure(&tbtnet(&["params", "--set", "nonsense=1"]));
    assert!(bad.contains("unknown config key"), "{bad}");
}

#[test]
fn data_root_comes_from_environment() {
    let out = Command::new(env!("CARGO_BIN_EXE_tbtnet"))
        .args(["params"])
        .env("TBTNET_DATA_ROOT", "/datasets/voc")
        .output()
        .unwrap();
    assert!(String::from_utf8_lossy(&out.stderr).contains("data_root=/datasets/voc"));
}

#[test]
fn pascal_without_data_root_fails_before_work() {
    let err = failure(&tbtnet(&["train", "--max-steps", "1"]));
    assert!(err.contains("data_root"), "{err}");
}

#[test]
fn eval_is_deterministic_for_one_and_five_shots() {
    let dir = tempfile::tempdir().unwrap();
    let ck = tiny_checkpoint(dir.path());
    for shots in ["1", "5"] {
        let reports: Vec<String> = (0..2)
            .map(|i| {
                let report = dir.path().join(format!("r{shots}_{i}.txt"));
                ok(&tbtnet(&[
                    "eval",
                    "--checkpoint",
                    s(&ck),
                    "--shots",
                    shots,
                    "--episodes",
                    "3",
                    "--report",
                    s(&report),
                    "--output-dir",
                    s(&dir.path().join("eval")),
                ]));
                std::fs::read_to_string(report).unwrap()
            })
            .collect();
        assert!(reports[0].starts_with("episodes=3\n"), "{}", reports[0]);
        assert_eq!(reports[0], reports[1]);
        let manifest =
            std::fs::read_to_string(dir.path().join(format!("eval/manifest_{shots}shot.tsv")))
                .unwrap();
        let first = manifest.lines().find(|l| !l.starts_with('#')).unwrap();
        let k: usize = shots.parse().unwrap();
        assert_eq!(first.split('\t').count(), k + 2, "{first}");
    }
}

#[test]
fn eval_reuses_a_given_manifest_and_writes_masks() {
    let dir = tempfile::tempdir().unwrap();
    let ck = tiny_checkpoint(dir.path());
    let manifest = dir.path().join("m.tsv");
    ok(&tbtnet(&[
        "manifest",
        "--dataset",
        "synthetic",
        "--episodes",
        "2",
        "--out",
        s(&manifest),
    ]));
    let masks = dir.path().join("masks");
    let out = ok(&tbtnet(&[
        "eval",
        "--checkpoint",
        s(&ck),
        "--manifest",
        s(&manifest),
        "--mask-dir",
        s(&masks),
        "--output-dir",
        s(&dir.path().join("eval")),
    ]));
    assert!(out.starts_with("episodes=2\n"), "{out}");
    assert!(masks.join("0000.png").is_file() && masks.join("0001.png").is_file());
}

#[test]
fn eval_refuses_missing_or_mismatched_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let err = failure(&tbtnet(&["eval", "--checkpoint", s(&dir.path().join("none"))]));
    assert!(err.contains("no checkpoint found"), "{err}");
    let ck = tiny_checkpoint(dir.path());
    let err = failure(&tbtnet(&["eval", "--checkpoint", s(&ck), "--dim", "8"]));
    assert!(err.contains("dim 20 (checkpoint) vs 8"), "{err}");
}

#[test]
fn predict_writes_final_and_intermediate_masks() {
    let dir = tempfile::tempdir().unwrap();
    let ck = tiny_checkpoint(dir.path());
    let (q, sup, m) = (dir.path().join("q.png"), dir.path().join("s.png"), dir.path().join("m.png"));
    write_rgb(&q, 1);
    write_rgb(&sup, 2);
    write_mask(&m, true);
    let out_dir = dir.path().join("pred");
    let base = ["predict", "--checkpoint", s(&ck), "--query", s(&q), "--support", s(&sup)];
    let files = ok(&tbtnet(
        &[&base[..], &["--support-mask", s(&m), "--out", s(&out_dir)]].concat(),
    ));
    assert_eq!(files.lines().count(), 1);
    assert_binary_png(&out_dir.join("q.png"), 40, 30);

    let files = ok(&tbtnet(
        &[&base[..], &["--support-mask", s(&m), "--out", s(&out_dir), "--intermediates"]].concat(),
    ));
    assert_eq!(files.lines().count(), 4);
    for layer in [4, 3, 2] {
        assert_binary_png(&out_dir.join(format!("q_layer{layer}.png")), 40, 30);
    }
}

#[test]
fn predict_tolerates_an_all_background_support() {
    let dir = tempfile::tempdir().unwrap();
    let ck = tiny_checkpoint(dir.path());
    let (q, sup, m) = (dir.path().join("q.png"), dir.path().join("s.png"), dir.path().join("m.png"));
    write_rgb(&q, 5);
    write_rgb(&sup, 6);
    write_mask(&m, false);
    let out_dir = dir.path().join("pred");
    ok(&tbtnet(&[
        "predict",
        "--checkpoint",
        s(&ck),
        "--query",
        s(&q),
        "--support",
        s(&sup),
        "--support-mask",
        s(&m),
        "--out",
        s(&out_dir),
    ]));
    assert_binary_png(&out_dir.join("q.png"), 40, 30);
}

#[test]
fn predict_names_an_unreadable_file() {
    let dir = tempfile::tempdir().unwrap();
    let ck = tiny_checkpoint(dir.path());
    let sup = dir.path().join("s.png");
    let m = dir.path().join("m.png");
    write_rgb(&sup, 2);
    write_mask(&m, true);
    let bogus = dir.path().join("broken.png");
    std::fs::write(&bogus, b"not an image").unwrap();
    let err = failure(&tbtnet(&[
        "predict",
        "--checkpoint",
        s(&ck),
        "--query",
        s(&bogus),
        "--support",
        s(&sup),
        "--support-mask",
        s(&m),
    ]));
    assert!(err.contains("broken.png"), "{err}");
    let err = failure(&tbtnet(&[
        "predict",
        "--checkpoint",
        s(&ck),
        "--query",
        s(&sup),
        "--support",
        s(&sup),
        "--support-mask",
        s(&dir.path().join("missing_mask.png")),
    ]));
    assert!(err.contains("missing_mask.png"), "{err}");
}
