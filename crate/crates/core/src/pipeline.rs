//! End-to-end helpers: batch inference, train-then-evaluate runs and the
//! lambda and ablation sweeps built on them.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::Config;
use crate::data::{synth_generate, VideoAnnotation, VideoFeatureSequence};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalReport, Predictions};
use crate::inference::{generate_proposals, to_detections, PostConfig};
use crate::model::AoeNet;
use crate::real::Real;
use crate::training::trainer::build_examples;
use crate::training::{EpochReport, Trainer};

/// Seconds per snippet for `video`: from its annotation when available,
/// otherwise from `snippet_len / fallback_fps`.
pub fn seconds_per_snippet(video: &VideoFeatureSequence, ann: Option<&VideoAnnotation>, fallback_fps: f64) -> f64 {
    match ann {
        Some(a) => 1.0 / a.snippet_scale(video.len()),
        None => video.snippet_len as f64 / fallback_fps,
    }
}

/// Proposals in seconds for every video, keyed by video id.
pub fn infer_dataset<T: Real>(
    model: &AoeNet<T>,
    feats: &[VideoFeatureSequence],
    anns: &[VideoAnnotation],
    post: &PostConfig,
    workers: usize,
) -> Result<Predictions> {
    post.resolved()?;
    let by_id: HashMap<&str, &VideoAnnotation> = anns.iter().map(|a| (a.video_id.as_str(), a)).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let rows = pool.install(|| {
        feats
            .par_iter()
            .map(|v| {
                let out = model.predict(v)?;
                let props = generate_proposals(&out, post)?;
                let ann = by_id.get(v.video_id.as_str()).copied();
                if ann.is_none() {
                    log::warn!("{}: no annotation, converting with fallback fps", v.video_id);
                }
                let sps = seconds_per_snippet(v, ann, post.fallback_fps);
                Ok((v.video_id.clone(), to_detections(&props, sps)))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(rows.into_iter().collect())
}

#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub epochs: Vec<EpochReport>,
    pub eval: EvalReport,
}

impl RunSummary {
    /// AR at `an` proposals, computed from the stored curve.
    pub fn ar_at(&self, an: usize) -> f64 {
        self.eval.curve[an.clamp(1, self.eval.curve.len()) - 1]
    }
}

/// Trains a fresh model on `(anns, feats)` per `cfg` and evaluates its
/// proposals on the same videos.
pub fn train_and_evaluate<T: Real>(
    cfg: &Config,
    anns: &[VideoAnnotation],
    feats: &[VideoFeatureSequence],
) -> Result<(AoeNet<T>, RunSummary)> {
    cfg.validate()?;
    let examples = build_examples(anns, feats.to_vec(), &cfg.model)?;
    let model = AoeNet::<T>::new(cfg.model.clone(), cfg.seed)?;
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    let epochs = trainer.fit(&examples, |r, _| {
        log::info!("epoch {} loss {:.5}", r.epoch, r.loss_total);
        Ok(())
    })?;
    let model = trainer.model;
    let preds = infer_dataset(&model, feats, anns, &cfg.post, cfg.train.workers)?;
    let eval = evaluate(&preds, anns, &cfg.eval)?;
    Ok((model, RunSummary { epochs, eval }))
}

/// Synthetic data for `cfg`, seeded by `cfg.seed`.
pub fn synthetic_data(cfg: &Config) -> Result<(Vec<VideoAnnotation>, Vec<VideoFeatureSequence>)> {
    let mut spec = cfg.synth.clone();
    spec.snippet_len = cfg.snippet_len;
    synth_generate(cfg.seed, &spec)
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub name: String,
    pub final_loss: f64,
    /// `(AN, AR)` at the configured report points.
    pub recall: Vec<(usize, f64)>,
    pub auc: f64,
}

fn row(name: String, s: &RunSummary) -> SweepRow {
    SweepRow {
        name,
        final_loss: s.epochs.last().map(|e| e.loss_total).unwrap_or(f64::NAN),
        recall: s.eval.recall.clone(),
        auc: s.eval.auc,
    }
}

/// Trains and evaluates once per `lambda`, everything else fixed.
pub fn lambda_sweep<T: Real>(
    cfg: &Config,
    lambdas: &[f64],
    anns: &[VideoAnnotation],
    feats: &[VideoFeatureSequence],
) -> Result<Vec<SweepRow>> {
    lambdas
        .iter()
        .map(|&l| {
            let mut c = cfg.clone();
            c.train.lambda = l;
            let (_, s) = train_and_evaluate::<T>(&c, anns, feats)?;
            Ok(row(format!("lambda={l}"), &s))
        })
        .collect()
}

/// Trains and evaluates once per named beholder ablation (`exp1`..`exp7`).
pub fn ablation_sweep<T: Real>(
    cfg: &Config,
    names: &[&str],
    anns: &[VideoAnnotation],
    feats: &[VideoFeatureSequence],
) -> Result<Vec<SweepRow>> {
    names
        .iter()
        .map(|&n| {
            let mut c = cfg.clone();
            c.model.pmr = c.model.pmr.with_ablation(n)?;
            let (_, s) = train_and_evaluate::<T>(&c, anns, feats)?;
            Ok(row(n.to_string(), &s))
        })
        .collect()
}

/// Markdown table of sweep rows.
pub fn sweep_table(rows: &[SweepRow]) -> String {
    let Some(first) = rows.first() else {
        return String::new();
    };
    let mut s = String::from("| run | final loss |");
    for (an, _) in &first.recall {
        s.push_str(&format!(" AR@{an} |"));
    }
    s.push_str(" AUC |\n|---|---|");
    for _ in &first.recall {
        s.push_str("---|");
    }
    s.push_str("---|\n");
    for r in rows {
        s.push_str(&format!("| {} | {:.5} |", r.name, r.final_loss));
        for (_, ar) in &r.recall {
            s.push_str(&format!(" {ar:.4} |"));
        }
        s.push_str(&format!(" {:.2} |\n", r.auc));
    }
    s
}
