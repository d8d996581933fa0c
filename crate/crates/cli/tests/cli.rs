use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dnrselect::imaging::{Image, VIEW_FILES};
use dnrselect::render::DnrConfig;
use dnrselect::select::QConfig;
use dnrselect::train::TrainConfig;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dnrselect")).args(args).output().expect("spawn dnrselect")
}

fn ok(args: &[&str]) -> String {
    let out = bin(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = bin(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// 10 views at 16x16: 6 pool, 2 probe, 2 test.
fn dataset(root: &Path) -> PathBuf {
    ok(&["gen-data", "--scene", "cube", "--views", "10", "--resolution", "16", "--out", s(root)]);
    root.join("textured_cube")
}

fn tiny_config(dir: &Path) -> PathBuf {
    let cfg = TrainConfig {
        m: 3,
        epochs_step1: 2,
        epochs_step2: 2,
        inner_iters: 2,
        rl_updates: 1,
        model: DnrConfig {
            channels: 12,
            levels: 2,
            tex_resolution: 16,
            widths: vec![8],
            ..DnrConfig::default()
        },
        q: QConfig {
            embed: 8,
            hidden: 8,
            obs_size: 4,
            ..QConfig::default()
        },
        ..TrainConfig::default()
    };
    let path = dir.join("tiny.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path
}

fn files_under(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_layout_and_determinism() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let da = dataset(a.path());
    let db = dataset(b.path());
    let fa = files_under(&da);
    assert_eq!(fa.len(), 10 * VIEW_FILES.len() + 1);
    assert_eq!(fa, files_under(&db));
    let index: serde_json::Value = serde_json::from_slice(&std::fs::read(da.join("cameras.json")).unwrap()).unwrap();
    assert_eq!(index["views"].as_array().unwrap().len(), 10);
}

#[test]
fn train_dry_run_and_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = ok(&["train", "--config", s(&cfg), "--data", "unused", "--out", "unused", "--seed", "17", "--dry-run"]);
    let printed = TrainConfig::from_toml(&out).unwrap();
    assert_eq!(printed.seed, 17);
    assert!(!Path::new("unused").exists());

    let text = std::fs::read_to_string(&cfg).unwrap();
    let broken: String = text.lines().filter(|l| !l.starts_with("tv =")).map(|l| format!("{l}\n")).collect();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, broken).unwrap();
    let err = fails(&["train", "--config", s(&bad), "--data", "x", "--out", "x", "--dry-run"]);
    assert!(err.contains("tv"), "{err}");

    let err = fails(&["train", "--data", s(&dir.path().join("missing")), "--out", s(dir.path())]);
    assert!(err.contains("missing"), "{err}");
}

#[test]
fn train_then_render() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]);
    for f in ["coarse.ckpt", "fine.ckpt", "step1.csv", "step2.csv", "eval.csv", "metrics.jsonl", "config.toml"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let sel: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("selected_views.json")).unwrap()).unwrap();
    assert_eq!(sel.as_array().unwrap().len(), 3);

    let ckpt = run.join("fine.ckpt");
    let (r1, r2) = (dir.path().join("r1"), dir.path().join("r2"));
    for r in [&r1, &r2] {
        ok(&["render", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(r), "--composite"]);
    }
    let f1 = files_under(&r1);
    assert_eq!(f1.len(), 2 * 3 + 1);
    assert_eq!(f1, files_under(&r2));
    let cmp = f1.iter().find(|(p, _)| p.to_str().unwrap().ends_with(".cmp.png")).unwrap();
    let img = Image::read_png(&r1.join(&cmp.0)).unwrap();
    assert_eq!((img.width(), img.height()), (48, 16));

    let free = dir.path().join("free");
    ok(&["render", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&free), "--camera", "2,1,2.5"]);
    assert!(free.join("camera.png").is_file());
    let err = fails(&["render", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&free), "--camera", "2,1"]);
    assert!(err.contains("camera"), "{err}");
    fails(&["render", "--checkpoint", s(&cfg), "--data", s(&data), "--out", s(&free)]);
}

#[test]
fn sweep_table_and_budget_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("sweep");
    ok(&["sweep", "--config", s(&cfg), "--data", s(&data), "--out", s(&out), "--budgets", "2,3"]);
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "budget,method,mean_psnr,mean_ssim");
    assert_eq!(lines.len(), 1 + 2 * 3);
    assert!(out.join("rl_m3/fine.ckpt").is_file());
    assert!(out.join("trend.csv").is_file());
    let err = fails(&["sweep", "--config", s(&cfg), "--data", s(&data), "--out", s(&out), "--budgets", "2,6"]);
    assert!(err.contains("budget 6"), "{err}");
    fails(&["sweep", "--config", s(&cfg), "--data", s(&data), "--out", s(&out), "--methods", "oracle"]);
}

#[test]
fn ablate_base_case_and_unknown_switch() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("ablate");
    ok(&["ablate", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]);
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().collect::<Vec<_>>()[0], "variant,psnr,ssim");
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("full,"));
    let err = fails(&["ablate", "--config", s(&cfg), "--data", s(&data), "--out", s(&out), "--switches", "lpips"]);
    assert!(err.contains("lpips"), "{err}");
}
