use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_gridssl");

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn gridssl(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn gridssl")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// The single run directory created under `root`.
fn only_run(root: &Path) -> PathBuf {
    let dirs: Vec<PathBuf> = fs::read_dir(root).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs.into_iter().next().unwrap()
}

/// Small, fast training config written to `dir`.
fn tiny_config(dir: &Path, ablations: &str) -> PathBuf {
    let text = fs::read_to_string(configs().join("smoke.cfg"))
        .unwrap()
        .lines()
        .map(|l| match l.split(" =").next().unwrap() {
            "units" => "units = 8".into(),
            "hidden" => "hidden = 16".into(),
            "batch_size" => "batch_size = 4".into(),
            "seq_len" => "seq_len = 5".into(),
            "max_steps" => "max_steps = 4".into(),
            "checkpoint_every" => "checkpoint_every = 2".into(),
            "eval_arenas" => "eval_arenas = 1".into(),
            "eval_steps" => "eval_steps = 40000".into(),
            "eval_min_occupancy" => "eval_min_occupancy = 1".into(),
            "ablations" => format!("ablations = {ablations}"),
            _ => l.to_string(),
        })
        .collect::<Vec<_>>()
        .join("\n");
    let path = dir.join("tiny.cfg");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn zero_steps_writes_only_the_initial_checkpoint() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny_config(root.path(), "no-capacity");
    let out_root = root.path().join("runs");
    let o =
        gridssl(&["train", "--config", cfg.to_str().unwrap(), "--max-steps", "0", "--out-root", out_root.to_str().unwrap(), "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = only_run(&out_root);
    assert!(run.file_name().unwrap().to_str().unwrap().ends_with("-seed3"));
    let ckpts: Vec<_> = fs::read_dir(run.join("checkpoints")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert!(ckpts.iter().any(|f| f == "step-00000000.gsck"), "{ckpts:?}");
    assert!(!ckpts
        .iter()
        .any(|f| f.to_str().unwrap().starts_with("step-") && f != "step-00000000.gsck" && f.to_str().unwrap().ends_with(".gsck")));
    assert!(run.join("run.cfg").exists());
}

#[test]
fn missing_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let text: String = fs::read_to_string(configs().join("default.cfg"))
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with("sigma_g "))
        .map(|l| format!("{l}\n"))
        .collect();
    let path = dir.path().join("bad.cfg");
    fs::write(&path, text).unwrap();
    let o = gridssl(&["train", "--config", path.to_str().unwrap(), "--out-root", dir.path().join("runs").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("sigma_g"), "{}", stderr(&o));
}

#[test]
fn shipped_configs_parse() {
    for name in ["default.cfg", "smoke.cfg"] {
        let dir = tempfile::tempdir().unwrap();
        let o = gridssl(&[
            "train",
            "--config",
            configs().join(name).to_str().unwrap(),
            "--max-steps",
            "0",
            "--out-root",
            dir.path().to_str().unwrap(),
            "--log-every",
            "0",
        ]);
        assert!(o.status.success(), "{name}: {}", stderr(&o));
    }
}

#[test]
fn oracle_eval_writes_artifacts() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny_config(root.path(), "no-capacity");
    let out_root = root.path().join("runs");
    let o = gridssl(&[
        "eval",
        "--oracle",
        "--config",
        cfg.to_str().unwrap(),
        "--arenas",
        "1",
        "--steps",
        "60000",
        "--out-root",
        out_root.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let arena = only_run(&out_root).join("arena-1m");
    for f in ["report.json", "report.txt", "montage.ppm", "ratemaps/unit_000.gsrm", "images/ratemap_000.pgm", "images/autocorr_000.pgm"] {
        assert!(arena.join(f).exists(), "missing {f}");
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(arena.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["units"], 128);
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.gsck");
    fs::write(&bad, b"NOPE0000000000000000").unwrap();
    let o = gridssl(&["eval", "--checkpoint", bad.to_str().unwrap(), "--out-root", dir.path().join("runs").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("error"));
}

#[test]
fn empty_ablation_list_is_a_config_error() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny_config(root.path(), "");
    let o = gridssl(&["ablate", "--config", cfg.to_str().unwrap(), "--out-root", root.path().join("runs").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = gridssl(&["ablate", "--ablations", "", "--out-root", root.path().join("runs").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn ablation_and_report() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny_config(root.path(), "no-capacity, no-permutation");
    let out_root = root.path().join("runs");
    let o = gridssl(&["ablate", "--config", cfg.to_str().unwrap(), "--parallel", "2", "--out-root", out_root.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = only_run(&out_root);
    let summary = fs::read_to_string(run.join("ablations.txt")).unwrap();
    assert!(summary.contains("no-capacity") && summary.contains("no-permutation"), "{summary}");
    assert!(run.join("no-capacity/arena-1m/report.json").exists());

    let o = gridssl(&["report", run.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(run.join("summary.txt")).unwrap();
    assert_eq!(text.matches("== training").count(), 2, "{text}");
    assert_eq!(text.matches("== evaluation").count(), 2, "{text}");
}

#[test]
fn seeded_training_is_reproducible_and_resumable() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny_config(root.path(), "no-capacity");
    let train = |out: &str, extra: &[&str]| {
        let out_root = root.path().join(out);
        let mut args = vec!["train", "--config", cfg.to_str().unwrap(), "--seed", "11", "--out-root", out_root.to_str().unwrap()];
        args.extend_from_slice(extra);
        let o = gridssl(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        only_run(&out_root)
    };
    let a = train("a", &[]);
    let b = train("b", &[]);
    let metrics = |run: &Path| fs::read(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics(&a), metrics(&b));

    let c = train("c", &["--max-steps", "2"]);
    let ckpt = c.join("checkpoints/step-00000002.gsck");
    let o = gridssl(&["train", "--config", cfg.to_str().unwrap(), "--seed", "11", "--resume", ckpt.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(metrics(&a), metrics(&c));
    assert_eq!(fs::read(a.join("checkpoints/step-00000004.gsck")).unwrap(), fs::read(c.join("checkpoints/step-00000004.gsck")).unwrap());
}

#[test]
fn bad_thread_count_is_a_config_error() {
    let o = Command::new(BIN).args(["report", "."]).env("GRIDSSL_THREADS", "zero").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}
