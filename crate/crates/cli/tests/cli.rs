use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tapgkit::tensor::checkpoint;
use tapgkit::Config;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tapgkit"))
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is json")
}

/// A small, fast configuration written into `dir`.
fn small_config(dir: &Path, epochs: usize, lr: Option<f64>) -> PathBuf {
    let mut cfg = Config::desk();
    cfg.seed = 3;
    cfg.train.seed = 3;
    cfg.train.epochs = epochs;
    cfg.train.lr = lr;
    cfg.synth.n_videos = 4;
    cfg.synth.t_min = 12;
    cfg.synth.t_max = 12;
    let path = dir.join("cfg.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    path
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, cfg: &Path, name: &str) -> PathBuf {
    let out = dir.join(name);
    run(&["--config", p(cfg), "synth", "--out", p(&out)]);
    out
}

#[test]
fn synth_is_seeded_and_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 1, None);
    let a = synth(dir.path(), &cfg, "a");
    let b = synth(dir.path(), &cfg, "b");
    let files = |d: &Path| {
        let mut v: Vec<_> = fs::read_dir(d.join("features")).unwrap().map(|e| e.unwrap().path()).collect();
        v.sort();
        v
    };
    for (x, y) in files(&a).iter().zip(files(&b).iter()) {
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
    }
    assert_eq!(
        fs::read(a.join("annotations.json")).unwrap(),
        fs::read(b.join("annotations.json")).unwrap()
    );
    let manifest: Value = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["synth"]["n_videos"], 4);

    let (anns, feats) = tapgkit::data::load_dataset(&a).unwrap();
    let (anns2, feats2) = tapgkit::pipeline::synthetic_data(&Config::load(&cfg).unwrap()).unwrap();
    assert_eq!(anns, anns2);
    assert_eq!(feats, feats2);
}

#[test]
fn zero_learning_rate_keeps_initial_weights() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 2, Some(0.0));
    let data = synth(dir.path(), &cfg, "d");
    let ckpt = dir.path().join("m.ckpt");
    run(&["--config", p(&cfg), "train", "--data", p(&data), "--out", p(&ckpt)]);

    let c = Config::load(&cfg).unwrap();
    let fresh = tapgkit::AoeNet::<f64>::new(c.model.clone(), c.seed).unwrap();
    let trained = checkpoint::read(&ckpt).unwrap();
    for (_, param) in fresh.store.iter() {
        let rec = trained.iter().find(|r| r.name == param.name).unwrap();
        let stored: Vec<f32> = rec.tensor.data().iter().map(|&x| x as f32).collect();
        let init: Vec<f32> = param.value.data().iter().map(|&x| x as f32).collect();
        assert_eq!(stored, init, "{}", param.name);
    }
}

#[test]
fn resume_continues_epoch_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg1 = small_config(dir.path(), 1, None);
    let data = synth(dir.path(), &cfg1, "d");
    let ckpt = dir.path().join("m.ckpt");
    run(&["--config", p(&cfg1), "train", "--data", p(&data), "--out", p(&ckpt)]);

    let cfg2 = small_config(dir.path(), 3, None);
    let out2 = dir.path().join("m2.ckpt");
    let log = dir.path().join("m.jsonl");
    let s = stdout_json(&run(&[
        "--config", p(&cfg2), "train", "--data", p(&data), "--out", p(&out2),
        "--log", p(&log), "--resume", p(&ckpt),
    ]));
    assert_eq!(s["epochs"], 3);
    assert_eq!(s["trained_epochs"], 2);
    let epochs: Vec<u64> = fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["epoch"].as_u64().unwrap())
        .collect();
    assert_eq!(epochs, vec![1, 2, 3]);
}

#[test]
fn seeded_training_reproduces_final_loss() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 2, None);
    let data = synth(dir.path(), &cfg, "d");
    let loss = |name: &str, workers: &str| {
        let out = dir.path().join(name);
        let s = stdout_json(&run(&[
            "--config", p(&cfg), "--workers", workers, "train", "--data", p(&data), "--out", p(&out),
        ]));
        s["final_loss"].as_f64().unwrap()
    };
    let a = loss("a.ckpt", "1");
    let b = loss("b.ckpt", "2");
    assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
}

#[test]
fn infer_on_empty_dataset_writes_empty_map() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 1, None);
    let ckpt = dir.path().join("m.ckpt");
    let c = Config::load(&cfg).unwrap();
    tapgkit::AoeNet::<f32>::new(c.model, c.seed).unwrap().save(&ckpt).unwrap();
    let empty = dir.path().join("empty");
    fs::create_dir_all(empty.join("features")).unwrap();
    let out = dir.path().join("p.json");
    run(&["--config", p(&cfg), "infer", "--checkpoint", p(&ckpt), "--data", p(&empty), "--out", p(&out)]);
    let v: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v, serde_json::json!({}));
}

#[test]
fn infer_presets_and_output_schema() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 1, None);
    let data = synth(dir.path(), &cfg, "d");
    let ckpt = dir.path().join("m.ckpt");
    run(&["--config", p(&cfg), "train", "--data", p(&data), "--out", p(&ckpt)]);
    for preset in ["anet-tapg-snms", "thumos-tapg-snms", "thumos-tapg-nms"] {
        let out = dir.path().join(format!("{preset}.json"));
        run(&[
            "--config", p(&cfg), "infer", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&out),
            "--preset", preset,
        ]);
        let preds = tapgkit::evaluation::load_predictions(&out).unwrap();
        assert_eq!(preds.len(), 4);
        for dets in preds.values() {
            for d in dets {
                assert!(d.segment[0] <= d.segment[1]);
                assert!(d.score.is_finite());
            }
        }
    }
    let bad = bin()
        .args(["--config", p(&cfg), "infer", "--checkpoint", p(&ckpt), "--data", p(&data)])
        .args(["--out", p(&dir.path().join("x.json")), "--preset", "no-such-preset"])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&bad.stderr).unwrap();
    assert_eq!(err["error"], "config");
}

#[test]
fn eval_of_perfect_proposals() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 1, None);
    let data = synth(dir.path(), &cfg, "d");
    // one action per video, so a single proposal already recalls everything
    let mut anns = tapgkit::data::load_annotations(&data.join("annotations.json")).unwrap();
    for a in &mut anns {
        a.actions.truncate(1);
    }
    let ann_path = dir.path().join("single.json");
    tapgkit::data::save_annotations(&ann_path, &anns).unwrap();
    let mut preds = tapgkit::evaluation::Predictions::new();
    for a in &anns {
        let dets = a
            .actions
            .iter()
            .map(|x| tapgkit::evaluation::Detection {
                segment: [x.start(), x.end()],
                score: 1.0,
                label: None,
            })
            .collect();
        preds.insert(a.video_id.clone(), dets);
    }
    let props = dir.path().join("perfect.json");
    tapgkit::evaluation::save_predictions(&props, &preds).unwrap();
    let out = dir.path().join("ev");
    let m = stdout_json(&run(&[
        "--config", p(&cfg), "eval", "--proposals", p(&props), "--annotations", p(&ann_path),
        "--out", p(&out),
    ]));
    assert!((m["AUC"].as_f64().unwrap() - 100.0).abs() < 1e-9);
    let csv = fs::read_to_string(out.join("ar_curve.csv")).unwrap();
    assert_eq!(csv.lines().count(), 101);
    assert_eq!(csv.lines().next(), Some("an,ar"));
    let svg = fs::read_to_string(out.join("ar_curve.svg")).unwrap();
    assert!(svg.contains("<svg") && svg.trim_end().ends_with("</svg>"));
    let metrics: Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics, m);
}

#[test]
fn errors_are_json_on_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "seed = 1\nno_such_key = 2\n").unwrap();
    let out = bin().args(["--config", p(&cfg), "config"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "config");
    assert!(err["message"].as_str().unwrap().contains("no_such_key"));

    let out = bin().arg("--no-such-flag").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "usage");
}

#[test]
fn config_round_trips_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c.toml");
    run(&["--seed", "11", "config", "--desk", "--out", p(&out)]);
    let c = Config::load(&out).unwrap();
    assert_eq!(c.seed, 11);
    assert_eq!(c.train.seed, 11);
    assert_eq!(c.model, Config::desk().model);
}
