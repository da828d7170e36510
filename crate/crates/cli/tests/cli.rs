use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use emotalk_core::data::io::{read_blendshape_csv, write_blendshape_csv};
use emotalk_core::data::{savgol_smooth, BlendshapeSequence};
use ndarray::Array2;

fn emotalk(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emotalk"))
        .args(args)
        .env("EMOTALK_OUT", root.join("runs"))
        .output()
        .expect("spawn emotalk")
}

fn ok(args: &[&str], root: &Path) -> String {
    let out = emotalk(args, root);
    assert!(
        out.status.success(),
        "emotalk {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_dataset(root: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let dir = root.join(name);
    let mut args = vec![
        "gen-data",
        "--out",
        s(&dir),
        "--contents",
        "2",
        "--emotions",
        "2",
        "--speakers",
        "1",
        "--levels",
        "1",
        "--clips-per-cell",
        "1",
        "--rig-vertices",
        "200",
    ];
    args.extend_from_slice(extra);
    ok(&args, root);
    dir
}

fn count_ext(dir: &Path, ext: &str) -> usize {
    fs::read_dir(dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == ext))
        .count()
}

#[test]
fn gen_data_writes_one_wav_and_csv_per_clip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = small_dataset(tmp.path(), "d", &["--heldout-per-cell", "0"]);
    assert_eq!(count_ext(&dir.join("clips"), "wav"), 4);
    assert_eq!(count_ext(&dir.join("clips"), "csv"), 4);
    assert!(dir.join("manifest.json").is_file());
    assert!(dir.join("rig/neutral.obj").is_file());
}

#[test]
fn gen_data_rerun_gives_identical_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let a = small_dataset(tmp.path(), "a", &["--seed", "5"]);
    let b = small_dataset(tmp.path(), "b", &["--seed", "5"]);
    let c = small_dataset(tmp.path(), "c", &["--seed", "6"]);
    let read = |d: &Path, f: &str| fs::read(d.join(f)).unwrap();
    assert_eq!(read(&a, "manifest.json"), read(&b, "manifest.json"));
    assert_eq!(
        read(&a, "clips/c1_e0_l0_s0_k0.wav"),
        read(&b, "clips/c1_e0_l0_s0_k0.wav")
    );
    assert_ne!(
        read(&a, "clips/c1_e0_l0_s0_k0.wav"),
        read(&c, "clips/c1_e0_l0_s0_k0.wav")
    );
}

#[test]
fn gen_data_smooth_matches_smoothing_the_raw_targets() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = small_dataset(tmp.path(), "raw", &[]);
    let smooth = small_dataset(tmp.path(), "smooth", &["--smooth"]);
    let f = "clips/c0_e1_l0_s0_k0.csv";
    let r = read_blendshape_csv(&raw.join(f)).unwrap();
    let sm = read_blendshape_csv(&smooth.join(f)).unwrap();
    let expect = savgol_smooth(&r, 5, 2).unwrap();
    let diff = (sm.coeffs() - expect.coeffs())
        .iter()
        .fold(0.0f64, |m, d| m.max(d.abs()));
    // CSV text round trip limits agreement
    assert!(diff < 1e-9, "diff {diff}");
    assert_ne!(r.coeffs(), sm.coeffs());
}

#[test]
fn smoothing_a_quadratic_track_leaves_it_unchanged() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("q.csv");
    let coeffs = Array2::from_shape_fn((40, 52), |(t, c)| {
        let x = t as f64 / 30.0;
        0.1 + 0.01 * c as f64 + 0.3 * x - 0.2 * x * x
    });
    write_blendshape_csv(&input, &BlendshapeSequence::new(coeffs.clone()).unwrap()).unwrap();
    let out = tmp.path().join("q_smooth.csv");
    ok(
        &["convert", "--input", s(&input), "--smooth", "--csv-out", s(&out)],
        tmp.path(),
    );
    let back = read_blendshape_csv(&out).unwrap();
    let diff = (back.coeffs() - &coeffs).iter().fold(0.0f64, |m, d| m.max(d.abs()));
    assert!(diff < 1e-9, "diff {diff}");
}

fn train(root: &Path, data: &Path, out: &Path, extra: &[&str]) -> String {
    let mut args = vec![
        "train",
        "--data",
        s(data),
        "--out",
        s(out),
        "--max-steps",
        "4",
        "--batch-size",
        "2",
        "--seed",
        "11",
    ];
    args.extend_from_slice(extra);
    ok(&args, root)
}

#[test]
fn train_is_deterministic_and_resumable() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = small_dataset(root, "d", &[]);
    let (a, b, c) = (root.join("a"), root.join("b"), root.join("c"));
    train(root, &data, &a, &[]);
    train(root, &data, &b, &[]);
    for f in ["metrics.jsonl", "checkpoint.bin", "eval.json"] {
        assert!(a.join(f).is_file(), "{f} missing");
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
    assert_eq!(fs::read_to_string(a.join("metrics.jsonl")).unwrap().lines().count(), 4);

    train(root, &data, &c, &["--stop-at", "2"]);
    assert_eq!(fs::read_to_string(c.join("metrics.jsonl")).unwrap().lines().count(), 2);
    train(root, &data, &c, &["--resume"]);
    assert_eq!(
        fs::read(a.join("metrics.jsonl")).unwrap(),
        fs::read(c.join("metrics.jsonl")).unwrap()
    );
    assert_eq!(
        fs::read(a.join("checkpoint.bin")).unwrap(),
        fs::read(c.join("checkpoint.bin")).unwrap()
    );
}

#[test]
fn train_without_heldout_split_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset(tmp.path(), "d", &["--heldout-per-cell", "0"]);
    let out = emotalk(&["train", "--data", s(&data), "--max-steps", "1"], tmp.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("held-out"));
    assert!(!tmp.path().join("runs/train/checkpoint.bin").exists());
}

#[test]
fn infer_eval_and_plot_on_a_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = small_dataset(root, "d", &[]);
    let run = root.join("run");
    train(root, &data, &run, &[]);
    let ckpt = run.join("checkpoint.bin");
    let wav = data.join("clips/c0_e0_l0_s0_k1.wav");

    let csv0 = root.join("s0.csv");
    let objs = root.join("objs");
    ok(
        &[
            "infer",
            "--checkpoint",
            s(&ckpt),
            "--wav",
            s(&wav),
            "--style",
            "0",
            "--out",
            s(&csv0),
            "--obj-dir",
            s(&objs),
            "--rig",
            s(&data.join("rig")),
        ],
        root,
    );
    let p0 = read_blendshape_csv(&csv0).unwrap();
    assert_eq!(p0.coeffs().dim(), (30, 52));
    assert_eq!(count_ext(&objs, "obj"), 30);

    let csv1 = root.join("s1.csv");
    ok(
        &[
            "infer",
            "--checkpoint",
            s(&ckpt),
            "--wav",
            s(&wav),
            "--style",
            "1",
            "--out",
            s(&csv1),
            "--clamp",
        ],
        root,
    );
    let p1 = read_blendshape_csv(&csv1).unwrap();
    assert!(p1.coeffs().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_ne!(p0.coeffs(), p1.coeffs());

    let report = root.join("report.json");
    ok(
        &[
            "eval",
            "--checkpoint",
            s(&ckpt),
            "--data",
            s(&data),
            "--out",
            s(&report),
        ],
        root,
    );
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    for key in ["lve_mm", "eve_mm", "lip_avg_mm", "emotion_accuracy"] {
        assert!(v[key].as_f64().unwrap().is_finite(), "{key}");
    }
    assert_eq!(fs::read(&report).unwrap(), fs::read(run.join("eval.json")).unwrap());

    let plots = root.join("plots");
    ok(
        &["plot", "--input", s(&run.join("metrics.jsonl")), "--out", s(&plots)],
        root,
    );
    ok(
        &["plot", "--input", s(&csv0), "--out", s(&plots), "--channels", "0,30,50"],
        root,
    );
    assert_eq!(count_ext(&plots, "svg"), 5);
}

#[test]
fn infer_rejects_a_checkpoint_with_another_version() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = small_dataset(root, "d", &[]);
    let run = root.join("run");
    train(root, &data, &run, &[]);
    let mut bytes = fs::read(run.join("checkpoint.bin")).unwrap();
    bytes[4..8].copy_from_slice(&9u32.to_le_bytes());
    let bad = root.join("bad.bin");
    fs::write(&bad, bytes).unwrap();
    let wav = data.join("clips/c0_e0_l0_s0_k0.wav");
    let out = emotalk(
        &[
            "infer",
            "--checkpoint",
            s(&bad),
            "--wav",
            s(&wav),
            "--out",
            s(&root.join("x.csv")),
        ],
        root,
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("version 9"));
}

#[test]
fn config_file_values_apply_and_flags_win() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = root.join("run.toml");
    fs::write(
        &cfg,
        format!(
            "out_dir = \"{}\"\n[dataset]\nclips_per_cell = 2\nheldout_per_cell = 0\nseed = 1\n[dataset.ranges]\nn_contents = 1\nn_emotions = 2\nn_levels = 1\nn_speakers = 1\n[rig]\nvertices = 150\n",
            s(&root.join("from_config"))
        ),
    )
    .unwrap();
    ok(&["gen-data", "--config", s(&cfg)], root);
    assert_eq!(count_ext(&root.join("from_config/clips"), "wav"), 4);

    let flagged = root.join("flagged");
    ok(
        &["gen-data", "--config", s(&cfg), "--out", s(&flagged), "--emotions", "3"],
        root,
    );
    assert_eq!(count_ext(&flagged.join("clips"), "wav"), 6);

    fs::write(&cfg, "[dataset]\nclips = 2\n").unwrap();
    assert!(!emotalk(&["gen-data", "--config", s(&cfg)], root).status.success());
}

#[test]
fn default_output_root_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    ok(
        &[
            "gen-data",
            "--contents",
            "1",
            "--emotions",
            "1",
            "--speakers",
            "1",
            "--levels",
            "1",
            "--rig-vertices",
            "100",
        ],
        tmp.path(),
    );
    assert!(tmp.path().join("runs/dataset/manifest.json").is_file());
}
