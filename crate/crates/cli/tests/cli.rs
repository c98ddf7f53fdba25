use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use onestep::config::AppConfig;
use onestep::spectral;
use onestep::Image;

fn toy_cfg() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.cfg")
}

fn run(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_onestep"))
        .args(args)
        .arg("--output-dir")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], out: &Path) -> Output {
    let o = run(args, out);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn test_image(path: &Path) {
    Image::from_fn(32, 32, 3, |y, x, c| {
        let v = 0.5 + 0.3 * ((x as f64 * 0.7 + y as f64 * 0.3 + c as f64).sin());
        if (x / 4 + y / 4) % 2 == 0 {
            v
        } else {
            v * 0.8
        }
    })
    .write_png(path)
    .unwrap();
}

/// Relative paths of every file under `dir`, sorted.
fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

/// Byte equality for everything except PNGs, which must match in pixels.
fn assert_same_outputs(a: &Path, b: &Path) {
    let (fa, fb) = (files(a), files(b));
    assert_eq!(fa, fb);
    assert!(!fa.is_empty());
    for f in fa {
        if f.extension().is_some_and(|e| e == "png") {
            let (ia, ib) = (Image::read_png(&a.join(&f)).unwrap(), Image::read_png(&b.join(&f)).unwrap());
            assert_eq!(ia, ib, "{}", f.display());
        } else {
            assert_eq!(fs::read(a.join(&f)).unwrap(), fs::read(b.join(&f)).unwrap(), "{}", f.display());
        }
    }
}

fn exit_code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

#[test]
fn help_defaults_equal_code_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let o = ok(&["--help"], dir.path());
    let help = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = help
        .lines()
        .skip_while(|l| !l.starts_with("Config keys"))
        .skip(1)
        .take_while(|l| l.starts_with("  "))
        .map(str::trim)
        .collect();
    assert_eq!(lines.len(), AppConfig::default_entries().len());
    let parsed = AppConfig::parse(&lines.join("\n")).unwrap();
    assert_eq!(parsed, AppConfig::default());
}

#[test]
fn train_smoke_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_cfg();
    let cfg = cfg.to_str().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["--config", cfg, "train"], &a);
    ok(&["--config", cfg, "train"], &b);
    assert!(a.join("checkpoints/step_00000020.ckpt").exists());
    let csv = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| l.starts_with("train,")).count(), 20);
    assert_eq!(csv.lines().filter(|l| l.starts_with("eval,")).count(), 2);
    assert_same_outputs(&a, &b);
}

#[test]
fn resume_after_interrupt_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_cfg();
    let cfg = cfg.to_str().unwrap();
    let (full, cut) = (dir.path().join("full"), dir.path().join("cut"));
    ok(&["--config", cfg, "train"], &full);
    // stop between checkpoints so the resumed run must discard logged steps
    ok(&["--config", cfg, "train", "--stop-after", "13"], &cut);
    ok(&["--config", cfg, "train", "--resume"], &cut);
    assert_same_outputs(&full, &cut);
}

#[test]
fn zero_steps_write_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_cfg();
    ok(
        &["--config", cfg.to_str().unwrap(), "--set", "total_steps=0", "--set", "stage1_steps=0", "train"],
        dir.path(),
    );
    let ckpts: Vec<_> = fs::read_dir(dir.path().join("checkpoints")).unwrap().collect();
    assert_eq!(ckpts.len(), 1);
    assert!(dir.path().join("checkpoints/step_00000000.ckpt").exists());
    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);
}

#[test]
fn eval_subcommand_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_cfg();
    let cfg = cfg.to_str().unwrap();
    let run_dir = dir.path().join("run");
    ok(&["--config", cfg, "train"], &run_dir);
    let ckpt = run_dir.join("checkpoints/step_00000020.ckpt");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--n", "3"], &a);
    ok(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--n", "3"], &b);
    assert_same_outputs(&a, &b);
    let v: serde_json::Value = serde_json::from_slice(&fs::read(a.join("eval.json")).unwrap()).unwrap();
    assert_eq!(v["n_samples"], 3);
    assert_eq!(v["step"], 20);
}

#[test]
fn image_subcommands_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("img.png");
    test_image(&img);
    let other = dir.path().join("other.png");
    Image::from_fn(32, 32, 3, |y, x, _| ((x + y) % 7) as f64 / 7.0).write_png(&other).unwrap();
    let img_s = img.to_str().unwrap();
    for (i, args) in [
        vec!["degrade", img_s, "--sample-seed", "3"],
        vec!["degrade", "--dataset", "3"],
        vec!["analyze-spectrum", img_s, "--period", "4"],
        vec!["metrics", img_s, other.to_str().unwrap()],
    ]
    .iter()
    .enumerate()
    {
        let (a, b) = (dir.path().join(format!("{i}a")), dir.path().join(format!("{i}b")));
        ok(args, &a);
        ok(args, &b);
        assert_same_outputs(&a, &b);
    }
}

#[test]
fn spectrum_ratio_round_trips_through_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("img.png");
    test_image(&img);
    ok(&["analyze-spectrum", img.to_str().unwrap(), "--period", "4"], dir.path());
    let v: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("img_spectrum.json")).unwrap()).unwrap();
    let direct = spectral::grid_artifact_energy(&Image::read_png(&img).unwrap(), 4).unwrap();
    assert_eq!(v["ratio"].as_f64().unwrap(), direct.ratio);
    assert_eq!(v["period"], 4);
    assert!(dir.path().join("img_spectrum.png").exists());
}

#[test]
fn simulate_mismatch_emits_one_row_per_severity() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_cfg();
    let cfg = cfg.to_str().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["--config", cfg, "simulate-mismatch", "--severities", "0,0.5,1,2"], &a);
    ok(&["--config", cfg, "simulate-mismatch", "--severities", "0,0.5,1,2"], &b);
    assert_same_outputs(&a, &b);
    let csv = fs::read_to_string(a.join("mismatch.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "severity,one_step_error,multi_step_error");
    assert_eq!(lines.len(), 5);
    assert!(a.join("mismatch.png").exists());
}

#[test]
fn jobs_flag_does_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_cfg();
    let cfg = cfg.to_str().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["--config", cfg, "--jobs", "1", "train"], &a);
    ok(&["--config", cfg, "--jobs", "3", "train"], &b);
    assert_same_outputs(&a, &b);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let cfg = toy_cfg();
    let cfg = cfg.to_str().unwrap();
    let unknown = run(&["--set", "weights.lambda9=1", "degrade", "--dataset", "1"], out);
    assert_eq!(exit_code(&unknown), 2);
    let stderr = String::from_utf8(unknown.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1);
    assert!(stderr.starts_with("error kind=config"));

    let bad_cfg = out.join("bad.cfg");
    fs::write(&bad_cfg, "seed = 1\nno_such_key = 3\n").unwrap();
    assert_eq!(exit_code(&run(&["--config", bad_cfg.to_str().unwrap(), "degrade", "--dataset", "1"], out)), 2);
    assert_eq!(exit_code(&run(&["--set", "seed=minus", "degrade", "--dataset", "1"], out)), 2);

    assert_eq!(exit_code(&run(&["--config", "/nonexistent/x.cfg", "train"], out)), 3);
    assert_eq!(exit_code(&run(&["analyze-spectrum", "/nonexistent/x.png"], out)), 3);
    assert_eq!(exit_code(&run(&["eval"], &out.join("empty"))), 3);

    let blowup = run(&["--config", cfg, "--set", "lr_generator=1e300", "train"], &out.join("nan"));
    assert_eq!(exit_code(&blowup), 4, "{}", String::from_utf8_lossy(&blowup.stderr));
    assert!(String::from_utf8(blowup.stderr).unwrap().starts_with("error kind=numerical"));
}
