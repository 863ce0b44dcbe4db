use std::fs::{self, OpenOptions};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde_json::json;
use tapgkit::data::{load_annotations, load_dataset, save_dataset};
use tapgkit::evaluation::{evaluate, load_predictions, save_predictions};
use tapgkit::inference::{classify, load_class_scores};
use tapgkit::pipeline::{ablation_sweep, infer_dataset, lambda_sweep, sweep_table, synthetic_data};
use tapgkit::training::trainer::build_examples;
use tapgkit::training::Trainer;
use tapgkit::{AoeNet, Config, Error};

#[cfg(feature = "f64")]
type R = f64;
#[cfg(not(feature = "f64"))]
type R = f32;

/// A failed command; `checkpoint` names the last good checkpoint when training diverged.
pub struct Failure {
    pub error: Error,
    pub checkpoint: Option<PathBuf>,
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        Failure { error, checkpoint: None }
    }
}

pub type Outcome = Result<(), Failure>;

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json values serialize"));
}

fn write_json(path: &Path, v: &serde_json::Value) -> tapgkit::Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

fn ensure_parent(path: &Path) -> tapgkit::Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p)?;
    }
    Ok(())
}

pub fn synth(cfg: &Config, out: &Path) -> Outcome {
    let (anns, feats) = synthetic_data(cfg)?;
    save_dataset(out, &anns, &feats)?;
    let manifest = json!({
        "seed": cfg.seed,
        "snippet_len": cfg.snippet_len,
        "videos": feats.len(),
        "synth": cfg.synth,
    });
    write_json(&out.join("manifest.json"), &manifest)?;
    print_json(&json!({ "out": out, "videos": feats.len() }));
    Ok(())
}

pub fn train(cfg: &Config, data: &Path, out: &Path, log: Option<PathBuf>, resume: Option<PathBuf>) -> Outcome {
    let (anns, feats) = load_dataset(data)?;
    let examples = build_examples(&anns, feats, &cfg.model)?;
    if examples.is_empty() {
        return Err(Error::EmptySet { op: "train" }.into());
    }
    let model = AoeNet::<R>::new(cfg.model.clone(), cfg.seed)?;
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    if let Some(r) = &resume {
        trainer.resume(r)?;
    }
    ensure_parent(out)?;
    trainer.save_checkpoint(out)?;

    let log_path = log.unwrap_or_else(|| out.with_extension("jsonl"));
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(Error::from)?;
    let mut log_w = BufWriter::new(file);
    let fitted = trainer.fit(&examples, |r, t| {
        r.append_json_line(&mut log_w)?;
        std::io::Write::flush(&mut log_w)?;
        t.save_checkpoint(out)?;
        log::info!("epoch {} loss {:.6}", r.epoch, r.loss_total);
        Ok(())
    });
    let reports = match fitted {
        Ok(r) => r,
        Err(e @ Error::Diverged { .. }) => {
            return Err(Failure {
                error: e,
                checkpoint: Some(out.to_path_buf()),
            })
        }
        Err(e) => return Err(e.into()),
    };
    print_json(&json!({
        "checkpoint": out,
        "log": log_path,
        "epochs": trainer.epoch,
        "trained_epochs": reports.len(),
        "final_loss": reports.last().map(|r| r.loss_total),
    }));
    Ok(())
}

pub fn infer(
    cfg: &Config,
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    preset: Option<String>,
    classes: Option<PathBuf>,
    top_k: usize,
) -> Outcome {
    let mut post = cfg.post.clone();
    if let Some(p) = preset {
        post.preset = p;
        post.suppression = None;
    }
    post.resolved()?;
    let model = AoeNet::<R>::load(cfg.model.clone(), checkpoint)?;
    let (anns, feats) = load_dataset(data)?;
    let mut preds = infer_dataset(&model, &feats, &anns, &post, cfg.train.workers)?;
    if let Some(c) = classes {
        preds = classify(&preds, &load_class_scores(&c)?, top_k);
    }
    ensure_parent(out)?;
    save_predictions(out, &preds)?;
    print_json(&json!({ "out": out, "videos": preds.len() }));
    Ok(())
}

pub fn eval(cfg: &Config, proposals: &Path, annotations: &Path, out: &Path, svg: bool) -> Outcome {
    let preds = load_predictions(proposals)?;
    let anns = load_annotations(annotations)?;
    let report = evaluate(&preds, &anns, &cfg.eval)?;
    fs::create_dir_all(out).map_err(Error::from)?;
    let metrics = report.to_json();
    write_json(&out.join("metrics.json"), &metrics)?;
    fs::write(out.join("ar_curve.csv"), report.curve_csv()).map_err(Error::from)?;
    if svg {
        fs::write(out.join("ar_curve.svg"), report.curve_svg()).map_err(Error::from)?;
    }
    print_json(&metrics);
    Ok(())
}

pub fn sweep(cfg: &Config, data: Option<PathBuf>, lambdas: &[f64], ablations: &[String], out: &Path) -> Outcome {
    if lambdas.is_empty() && ablations.is_empty() {
        return Err(Error::Config("sweep needs --lambdas or --ablations".into()).into());
    }
    let (anns, feats) = match &data {
        Some(d) => load_dataset(d)?,
        None => synthetic_data(cfg)?,
    };
    let mut rows = lambda_sweep::<R>(cfg, lambdas, &anns, &feats)?;
    let names: Vec<&str> = ablations.iter().map(String::as_str).collect();
    rows.extend(ablation_sweep::<R>(cfg, &names, &anns, &feats)?);
    let table = sweep_table(&rows);
    ensure_parent(out)?;
    fs::write(out, &table).map_err(Error::from)?;
    write_json(&out.with_extension("json"), &serde_json::to_value(&rows).map_err(Error::from)?)?;
    print!("{table}");
    Ok(())
}

pub fn show_config(cfg: &Config, out: Option<PathBuf>) -> Outcome {
    let text = cfg.to_toml();
    match out {
        Some(p) => {
            ensure_parent(&p)?;
            fs::write(&p, &text).map_err(Error::from)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}
