//! Epoch loop: seeded shuffling, per-video forward/backward, Adam updates.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::labels::{generate_boundary_labels, generate_duration_labels, BoundaryLabels, DurationLabels};
use super::loss::{loss_total, LossReport, DEFAULT_LAMBDA};
use crate::data::{VideoAnnotation, VideoFeatureSequence};
use crate::error::{Error, Result};
use crate::model::{AoeNet, ModelConfig};
use crate::real::Real;
use crate::tensor::checkpoint::{self, Record};
use crate::tensor::{Adam, AdamConfig, Graph, ParamId, Tensor};

/// Default learning rates of the two dataset profiles.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    #[default]
    Activitynet,
    Thumos,
}

impl Profile {
    pub fn learning_rate(self) -> f64 {
        match self {
            Profile::Activitynet => 1e-4,
            Profile::Thumos => 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Videos per optimizer step; gradients are averaged over the batch.
    pub batch_size: usize,
    pub lambda: f64,
    pub profile: Profile,
    /// Overrides the profile's learning rate.
    pub lr: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Threads for per-video work; 0 uses all cores.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 1,
            lambda: DEFAULT_LAMBDA,
            profile: Profile::Activitynet,
            lr: None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr.unwrap_or(self.profile.learning_rate()),
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.adam().lr;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be >= 0, got {lr}")));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// One training video with its targets.
#[derive(Clone, Debug)]
pub struct Example {
    pub video: VideoFeatureSequence,
    pub boundary: BoundaryLabels,
    pub duration: DurationLabels,
}

impl Example {
    pub fn new(annotation: &VideoAnnotation, video: VideoFeatureSequence, model: &ModelConfig) -> Result<Self> {
        let t = video.len();
        let want = annotation.snippet_count(video.snippet_len);
        if t != want {
            return Err(Error::Annotation {
                video_id: video.video_id.clone(),
                msg: format!(
                    "{t} snippets of {} frames, but {} frames need {want}",
                    video.snippet_len, annotation.frame_count
                ),
            });
        }
        let d = model.bmm.duration_for(t)?;
        Ok(Example {
            boundary: generate_boundary_labels(annotation, t),
            duration: generate_duration_labels(annotation, t, d),
            video,
        })
    }
}

/// Pairs feature sequences with their annotations by video id.
pub fn build_examples(
    annotations: &[VideoAnnotation],
    features: Vec<VideoFeatureSequence>,
    model: &ModelConfig,
) -> Result<Vec<Example>> {
    let by_id: HashMap<&str, &VideoAnnotation> = annotations.iter().map(|a| (a.video_id.as_str(), a)).collect();
    let mut out = Vec::with_capacity(features.len());
    for f in features {
        let Some(a) = by_id.get(f.video_id.as_str()) else {
            log::warn!("{}: no annotation, skipped", f.video_id);
            continue;
        };
        out.push(Example::new(a, f, model)?);
    }
    out.sort_by(|a, b| a.video.video_id.cmp(&b.video.video_id));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub loss_start: f64,
    pub loss_end: f64,
    pub loss_act: f64,
    pub loss_total: f64,
    pub wall_seconds: f64,
    pub videos: usize,
    pub degenerate: usize,
}

impl EpochReport {
    fn from_reports(epoch: usize, reports: &[LossReport], wall_seconds: f64) -> Self {
        let n = reports.len().max(1) as f64;
        let mean = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        EpochReport {
            epoch,
            loss_start: mean(|r| r.start),
            loss_end: mean(|r| r.end),
            loss_act: mean(|r| r.act),
            loss_total: mean(|r| r.total),
            wall_seconds,
            videos: reports.len(),
            degenerate: reports.iter().filter(|r| r.degenerate()).count(),
        }
    }

    pub fn append_json_line(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "{}", serde_json::to_string(self)?)?;
        Ok(())
    }
}

type Grads<T> = Vec<(ParamId, Vec<T>)>;

pub struct Trainer<T> {
    pub model: AoeNet<T>,
    pub adam: Adam<T>,
    pub config: TrainConfig,
    /// Number of completed epochs.
    pub epoch: usize,
    pool: rayon::ThreadPool,
}

const EPOCH_RECORD: &str = "train.epoch";
const STEP_RECORD: &str = "adam.step";

impl<T: Real> Trainer<T> {
    pub fn new(model: AoeNet<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(&model.store, config.adam());
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        Ok(Trainer {
            model,
            adam,
            config,
            epoch: 0,
            pool,
        })
    }

    fn video_pass(&self, ex: &Example, with_grads: bool) -> Result<(LossReport, Option<Grads<T>>)> {
        let mut g = Graph::with_params(&self.model.store);
        let (vars, _) = self.model.forward(&mut g, &ex.video)?;
        let (loss, report) = loss_total(&mut g, &vars, &ex.boundary, &ex.duration, self.config.lambda)?;
        if !report.total.is_finite() {
            return Err(Error::NonFinite { op: "loss_total" });
        }
        if !with_grads {
            return Ok((report, None));
        }
        g.backward(loss)?;
        let grads = g.param_grads();
        if grads.iter().any(|(_, v)| v.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite { op: "backward" });
        }
        Ok((report, Some(grads)))
    }

    fn diverged(&self, ex: &Example, e: Error) -> Error {
        match e {
            Error::NonFinite { .. } | Error::Degenerate(_) => Error::Diverged {
                epoch: self.epoch + 1,
                video_id: ex.video.video_id.clone(),
                msg: e.to_string(),
            },
            other => other,
        }
    }

    /// Mean losses over `data` without updating anything.
    pub fn evaluate(&self, data: &[Example]) -> Result<EpochReport> {
        let start = Instant::now();
        let reports = self.pool.install(|| {
            data.par_iter()
                .map(|ex| self.video_pass(ex, false).map(|r| r.0).map_err(|e| self.diverged(ex, e)))
                .collect::<Result<Vec<_>>>()
        })?;
        Ok(EpochReport::from_reports(self.epoch, &reports, start.elapsed().as_secs_f64()))
    }

    /// Visiting order of an epoch; a function of the seed and the epoch number only.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    /// One pass over `data`. The reported losses are those seen before each update.
    pub fn train_epoch(&mut self, data: &[Example]) -> Result<EpochReport> {
        if data.is_empty() {
            return Err(Error::EmptySet { op: "train_epoch" });
        }
        let start = Instant::now();
        let order = self.epoch_order(self.epoch + 1, data.len());
        let mut reports = Vec::with_capacity(data.len());
        let update = self.adam.config.lr > 0.0;
        for batch in order.chunks(self.config.batch_size) {
            let results = self.pool.install(|| {
                batch
                    .par_iter()
                    .map(|&i| self.video_pass(&data[i], update).map_err(|e| self.diverged(&data[i], e)))
                    .collect::<Result<Vec<_>>>()
            })?;
            if update {
                self.model.store.zero_grad();
                for (_, grads) in &results {
                    self.model.store.accumulate(grads.as_deref().expect("gradients requested"));
                }
                self.model.store.scale_grads(T::one() / T::lit(batch.len() as f64));
                self.adam.step(&mut self.model.store)?;
            }
            reports.extend(results.into_iter().map(|r| r.0));
        }
        self.epoch += 1;
        Ok(EpochReport::from_reports(self.epoch, &reports, start.elapsed().as_secs_f64()))
    }

    /// Runs the configured number of epochs, passing each report to `on_epoch`.
    pub fn fit(&mut self, data: &[Example], mut on_epoch: impl FnMut(&EpochReport, &Self) -> Result<()>) -> Result<Vec<EpochReport>> {
        let mut out = Vec::new();
        while self.epoch < self.config.epochs {
            let r = self.train_epoch(data)?;
            on_epoch(&r, self)?;
            out.push(r);
        }
        Ok(out)
    }

    /// Parameters, optimizer moments and the epoch counter.
    pub fn to_records(&self) -> Vec<Record> {
        let mut recs = self.model.store.to_records();
        recs.push(Record::new(EPOCH_RECORD, &Tensor::<f64>::scalar(self.epoch as f64)));
        recs.push(Record::new(STEP_RECORD, &Tensor::<f64>::scalar(self.adam.step as f64)));
        for (i, (_, p)) in self.model.store.iter().enumerate() {
            recs.push(Record::new(format!("adam.m.{}", p.name), &self.adam.m[i]));
            recs.push(Record::new(format!("adam.v.{}", p.name), &self.adam.v[i]));
        }
        recs
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        checkpoint::write(path, &self.to_records())
    }

    /// Restores weights and, when present, the optimizer state and epoch count.
    pub fn load_records(&mut self, records: &[Record]) -> Result<()> {
        self.model.load_records(records)?;
        let find = |name: &str| records.iter().find(|r| r.name == name);
        if let Some(r) = find(EPOCH_RECORD) {
            self.epoch = r.tensor.item() as usize;
        }
        if let Some(r) = find(STEP_RECORD) {
            self.adam.step = r.tensor.item() as u64;
        }
        let names: Vec<String> = self.model.store.iter().map(|(_, p)| p.name.clone()).collect();
        for (i, name) in names.iter().enumerate() {
            if let (Some(m), Some(v)) = (find(&format!("adam.m.{name}")), find(&format!("adam.v.{name}"))) {
                if m.tensor.shape() != self.adam.m[i].shape() || v.tensor.shape() != self.adam.v[i].shape() {
                    return Err(Error::dim("checkpoint", format!("optimizer state of {name}")));
                }
                self.adam.m[i] = m.tensor.cast();
                self.adam.v[i] = v.tensor.cast();
            }
        }
        Ok(())
    }

    pub fn resume(&mut self, path: &Path) -> Result<()> {
        self.load_records(&checkpoint::read(path)?)
    }
}
