use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use depthformer::data::{read_pfm, write_rgb_png, load_depth_png, DepthEncoding};
use depthformer::Tensor;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_depthformer"));
    c.env_remove("DEPTHFORMER_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, preset: &str) -> PathBuf {
    let p = dir.join(format!("{preset}.json"));
    let o = run(&["init-config", "--preset", preset, "--out", s(&p)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    p
}

struct Trained {
    _dir: tempfile::TempDir,
    root: PathBuf,
    run: PathBuf,
    train_stdout: String,
}

/// One short training run shared by the eval and infer tests.
fn trained() -> &'static Trained {
    static T: OnceLock<Trained> = OnceLock::new();
    T.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let cfg = write_config(&root, "tiny");
        let run_dir = root.join("run");
        let o = run(&["train", "--config", s(&cfg), "--synthetic", "n=16", "--steps", "300", "--out", s(&run_dir)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        Trained { _dir: dir, root, run: run_dir, train_stdout: stdout(&o) }
    })
}

fn write_image(path: &Path, h: usize, w: usize) {
    let data = (0..3 * h * w).map(|i| ((i * 37) % 251) as f32 / 250.0).collect();
    write_rgb_png(path, &Tensor::from_vec(&[3, h, w], data).unwrap()).unwrap();
}

#[test]
fn help_exits_zero_and_lists_flags() {
    let o = run(&["--help"]);
    assert_eq!(code(&o), 0);
    for sub in ["train", "eval", "infer", "gradcheck", "bench", "init-config"] {
        assert!(stdout(&o).contains(sub), "{sub} missing from help");
    }
    let o = run(&["train", "--help"]);
    assert_eq!(code(&o), 0);
    for flag in ["--config", "--set", "--manifest", "--synthetic", "--steps", "--seed", "--resume", "--out", "--threads"] {
        assert!(stdout(&o).contains(flag), "{flag} missing from train help");
    }
    let o = run(&["infer", "--help"]);
    for flag in ["--pad", "--pfm", "--preview", "--dataset", "--checkpoint"] {
        assert!(stdout(&o).contains(flag), "{flag} missing from infer help");
    }
    let o = run(&["eval", "--help"]);
    for flag in ["--crop", "--cap"] {
        assert!(stdout(&o).contains(flag), "{flag} missing from eval help");
    }
}

#[test]
fn train_writes_checkpoint_and_reports_loss() {
    let t = trained();
    assert!(t.run.join("checkpoint.bin").is_file());
    assert!(t.run.join("config.json").is_file());
    assert!(t.run.join("train_log.csv").is_file());
    assert!(t.train_stdout.contains("final step 300"), "{}", t.train_stdout);
    assert!(t.train_stdout.contains("silog=") && t.train_stdout.contains("chamfer="));
}

#[test]
fn missing_config_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let o = run(&["train", "--config", s(&missing), "--synthetic", "n=2", "--out", s(&dir.path().join("r"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains(s(&missing)), "{}", stderr(&o));
}

#[test]
fn invalid_override_cites_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny");
    let o = run(&["train", "--config", s(&cfg), "--set", "n_bins=0", "--synthetic", "n=2", "--out", s(&dir.path().join("r"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("n_bins >= 2"), "{}", stderr(&o));
    let o = run(&["train", "--config", s(&cfg), "--set", "no_such_key=3", "--synthetic", "n=2", "--out", s(&dir.path().join("r"))]);
    assert_eq!(code(&o), 1);
}

#[test]
fn missing_data_source_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny");
    let o = run(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("r"))]);
    assert_eq!(code(&o), 1);
}

#[test]
fn training_is_deterministic_given_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny");
    let mut bytes = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = run(&[
            "train", "--config", s(&cfg), "--synthetic", "n=4", "--steps", "3", "--seed", "7", "--set", "batch_size=2",
            "--out", s(&out),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        bytes.push(std::fs::read(out.join("checkpoint.bin")).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn resume_continues_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny");
    let args = |out: &Path, steps: &str| {
        vec![
            "train".to_string(), "--config".into(), s(&cfg).into(), "--synthetic".into(), "n=4".into(),
            "--set".into(), "batch_size=2".into(), "--set".into(), "total_steps=4".into(),
            "--steps".into(), steps.into(), "--out".into(), s(out).into(),
        ]
    };
    let straight = dir.path().join("straight");
    assert_eq!(code(&bin().args(args(&straight, "4")).output().unwrap()), 0);

    // A finished run has nothing left to do.
    let mut again = args(&straight, "4");
    again.push("--resume".into());
    let before = std::fs::read(straight.join("checkpoint.bin")).unwrap();
    let o = bin().args(again).output().unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read(straight.join("checkpoint.bin")).unwrap(), before);

    let missing = dir.path().join("fresh");
    let mut resume_missing = args(&missing, "4");
    resume_missing.push("--resume".into());
    assert_eq!(code(&bin().args(resume_missing).output().unwrap()), 2);
}

#[test]
fn eval_on_training_set_reports_delta1() {
    let t = trained();
    let out = t.root.join("eval");
    let o = run(&["eval", "--checkpoint", s(&t.run), "--synthetic", "n=16", "--crop", "none", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for col in ["RMSE", "REL", "δ1", "δ2", "δ3"] {
        assert!(stdout(&o).contains(col), "{col} missing:\n{}", stdout(&o));
    }
    let mut r = csv::Reader::from_path(out.join("metrics.csv")).unwrap();
    let headers = r.headers().unwrap().clone();
    let d1 = headers.iter().position(|h| h == "delta1").expect("delta1 column");
    let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
    assert_eq!(rows.len(), 17);
    assert_eq!(&rows[16][0], "aggregate");
    for row in &rows {
        let v: f64 = row[d1].parse().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }
}

#[test]
fn eval_crop_and_cap_flags_are_accepted() {
    let t = trained();
    let out = t.root.join("eval_garg");
    let o = run(&[
        "eval", "--checkpoint", s(&t.run.join("checkpoint.bin")), "--synthetic", "n=2", "--crop", "garg", "--cap", "8",
        "--out", s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    // The eigen crop only exists for 480x640 frames.
    let o = run(&["eval", "--checkpoint", s(&t.run), "--synthetic", "n=2", "--crop", "eigen", "--out", s(&out)]);
    assert_eq!(code(&o), 1);
}

#[test]
fn eval_empty_manifest_is_data_error() {
    let t = trained();
    let manifest = t.root.join("empty.txt");
    std::fs::write(&manifest, "").unwrap();
    let o = run(&["eval", "--checkpoint", s(&t.run), "--manifest", s(&manifest), "--out", s(&t.root)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn eval_with_mismatched_config_is_shape_error() {
    let t = trained();
    let cfg = write_config(&t.root, "paper");
    let o = run(&["eval", "--checkpoint", s(&t.run), "--config", s(&cfg), "--synthetic", "n=1", "--out", s(&t.root)]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    let o = run(&[
        "eval", "--checkpoint", s(&t.run), "--set", "n_bins=16", "--synthetic", "n=1", "--out", s(&t.root),
    ]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn infer_full_resolution_and_range() {
    let t = trained();
    let img = t.root.join("frame.png");
    write_image(&img, 448, 576);
    let out = t.root.join("infer");
    let o = run(&["infer", "--checkpoint", s(&t.run), "--pfm", "--preview", "--out", s(&out), s(&img)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (h, w, vals) = read_pfm(&out.join("frame_depth.pfm")).unwrap();
    assert_eq!((h, w), (448, 576));
    assert!(vals.iter().all(|&v| (1e-3..=10.0).contains(&(v as f64))));
    let png = load_depth_png(&out.join("frame_depth.png"), DepthEncoding::Kitti).unwrap();
    assert_eq!((png.height(), png.width()), (448, 576));
    assert!(out.join("frame_preview.png").is_file());
}

#[test]
fn infer_rejects_unaligned_without_pad() {
    let t = trained();
    let img = t.root.join("odd.png");
    write_image(&img, 450, 570);
    let out = t.root.join("infer_odd");
    let o = run(&["infer", "--checkpoint", s(&t.run), "--out", s(&out), s(&img)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--pad"), "{}", stderr(&o));

    let o = run(&["infer", "--checkpoint", s(&t.run), "--pad", "--pfm", "--dataset", "nyu", "--out", s(&out), s(&img)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (h, w, _) = read_pfm(&out.join("odd_depth.pfm")).unwrap();
    assert_eq!((h, w), (450, 570));
    let png = load_depth_png(&out.join("odd_depth.png"), DepthEncoding::Nyu).unwrap();
    assert_eq!((png.height(), png.width()), (450, 570));
}

#[test]
fn infer_missing_image_is_data_error() {
    let t = trained();
    let o = run(&["infer", "--checkpoint", s(&t.run), "--out", s(&t.root), s(&t.root.join("absent.png"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn gradcheck_tiny_passes() {
    let o = run(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("max_rel_err="));
}

#[test]
fn gradcheck_impossible_tolerance_fails_with_code_4() {
    let o = run(&["gradcheck", "--samples", "5", "--tol", "0"]);
    assert_eq!(code(&o), 4, "{}{}", stdout(&o), stderr(&o));
}

#[test]
fn bench_counts_and_zero_iters() {
    let o = run(&["bench", "--iters", "0"]);
    assert_eq!(code(&o), 1);
    let o = run(&["bench", "--iters", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let count = |name: &str| -> u64 {
        let line = stdout(&o).lines().find(|l| l.starts_with(name)).unwrap_or_else(|| panic!("{name} row")).to_string();
        line.split_whitespace().nth(1).unwrap().parse().unwrap()
    };
    assert!(count("paper") > count("tiny"));
}

#[test]
fn threads_env_must_be_positive() {
    let o = bin().env("DEPTHFORMER_THREADS", "0").args(["bench", "--preset", "tiny", "--iters", "1"]).output().unwrap();
    assert_eq!(code(&o), 1);
    let o = bin().env("DEPTHFORMER_THREADS", "2").args(["bench", "--preset", "tiny", "--iters", "1"]).output().unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}
