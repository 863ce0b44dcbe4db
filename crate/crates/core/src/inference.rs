//! Decoding probability maps into scored proposals.
//!
//! Start and end candidates are the local maxima of the boundary
//! probabilities. Every candidate pair `s < e` with `e - s <= D` is scored by
//! `P_S[s] * P_E[e] * P_A(e - s, s)`, then overlapping proposals are
//! suppressed, either softly (scores decayed by `exp(-IoU / sigma)`) or hard.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bmm::BmmOutput;
use crate::error::{Error, Result};
use crate::evaluation::{interval_iou, Detection, Predictions};
use crate::real::Real;

/// A scored interval in snippet coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub start: f64,
    pub end: f64,
    pub score: f64,
}

impl Proposal {
    pub fn new(start: f64, end: f64, score: f64) -> Self {
        Proposal { start, end, score }
    }

    pub fn interval(&self) -> (f64, f64) {
        (self.start, self.end)
    }

    pub fn center(&self) -> f64 {
        (self.start + self.end) / 2.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Suppression {
    /// Decay `s_i` by `exp(-IoU / sigma)` when `IoU >= theta1 + theta2 * distance`.
    Soft { theta1: f64, theta2: f64, sigma: f64 },
    /// Drop proposals whose IoU with a kept one reaches `threshold`.
    Hard { threshold: f64 },
}

impl Suppression {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Suppression::Soft { sigma, .. } if !(sigma > 0.0) => {
                Err(Error::Config(format!("soft suppression needs sigma > 0, got {sigma}")))
            }
            Suppression::Hard { threshold } if !(threshold > 0.0 && threshold < 1.0) => {
                Err(Error::Config(format!("hard suppression threshold must be in (0, 1), got {threshold}")))
            }
            _ => Ok(()),
        }
    }
}

/// Named suppression settings.
pub const PRESETS: [(&str, Suppression); 5] = [
    ("anet-tapg-snms", Suppression::Soft { theta1: 0.5, theta2: 0.4, sigma: 0.4 }),
    ("thumos-tapg-snms", Suppression::Soft { theta1: 0.65, theta2: 0.0, sigma: 0.3 }),
    ("thumos-tapg-nms", Suppression::Hard { threshold: 0.45 }),
    ("anet-tad-snms", Suppression::Soft { theta1: 0.0, theta2: 0.0, sigma: 0.4 }),
    ("thumos-tad-nms", Suppression::Hard { threshold: 0.45 }),
];

pub fn preset(name: &str) -> Result<Suppression> {
    PRESETS
        .iter()
        .find(|p| p.0 == name)
        .map(|p| p.1.clone())
        .ok_or_else(|| {
            let known: Vec<&str> = PRESETS.iter().map(|p| p.0).collect();
            Error::Config(format!("unknown suppression preset {name:?}; known: {}", known.join(", ")))
        })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostConfig {
    /// Preset name; ignored when `suppression` is given.
    pub preset: String,
    pub suppression: Option<Suppression>,
    /// Soft suppression stops once the best remaining score falls below this.
    pub score_floor: f64,
    pub top_n: usize,
    /// Used to convert snippets to seconds for videos without an annotation.
    pub fallback_fps: f64,
}

impl Default for PostConfig {
    fn default() -> Self {
        PostConfig {
            preset: "anet-tapg-snms".into(),
            suppression: None,
            score_floor: 1e-4,
            top_n: 100,
            fallback_fps: 16.0,
        }
    }
}

impl PostConfig {
    pub fn resolved(&self) -> Result<Suppression> {
        let s = match &self.suppression {
            Some(s) => s.clone(),
            None => preset(&self.preset)?,
        };
        s.validate()?;
        Ok(s)
    }
}

/// Indices whose value is at least each existing neighbor.
pub fn find_boundary_candidates<T: Real>(p: &[T]) -> Vec<usize> {
    (0..p.len())
        .filter(|&i| (i == 0 || p[i] >= p[i - 1]) && (i + 1 == p.len() || p[i] >= p[i + 1]))
        .collect()
}

/// Every pair `s < e` with `e - s <= D`, scored by the three maps.
pub fn pair_and_score<T: Real>(starts: &[usize], ends: &[usize], out: &BmmOutput<T>) -> Vec<Proposal> {
    let max_d = out.max_duration();
    let mut props = Vec::new();
    for &s in starts {
        for &e in ends {
            if e <= s || e - s > max_d {
                continue;
            }
            let score = out.start[s].as_f64() * out.end[e].as_f64() * out.actionness_at(e - s, s).as_f64();
            props.push(Proposal::new(s as f64, e as f64, score));
        }
    }
    props
}

/// Index of the best proposal: highest score, then earlier start, then earlier end, then lower index.
fn best_index(props: &[Proposal]) -> Option<usize> {
    (0..props.len()).min_by(|&a, &b| {
        let (p, q) = (&props[a], &props[b]);
        q.score
            .total_cmp(&p.score)
            .then(p.start.total_cmp(&q.start))
            .then(p.end.total_cmp(&q.end))
            .then(a.cmp(&b))
    })
}

/// Soft suppression. `span` normalizes center distances (the video length).
pub fn soft_nms(props: &[Proposal], theta1: f64, theta2: f64, sigma: f64, floor: f64, span: f64) -> Vec<Proposal> {
    let mut rest = props.to_vec();
    let mut out = Vec::with_capacity(rest.len());
    while let Some(i) = best_index(&rest) {
        if rest[i].score < floor {
            break;
        }
        let top = rest.remove(i);
        for p in &mut rest {
            let iou = interval_iou(top.interval(), p.interval());
            let dist = if span > 0.0 { (top.center() - p.center()).abs() / span } else { 0.0 };
            if iou >= theta1 + theta2 * dist {
                p.score *= (-iou / sigma).exp();
            }
        }
        out.push(top);
    }
    out
}

/// Greedy hard suppression.
pub fn nms(props: &[Proposal], threshold: f64) -> Vec<Proposal> {
    let mut rest = props.to_vec();
    let mut kept: Vec<Proposal> = Vec::new();
    while let Some(i) = best_index(&rest) {
        let top = rest.remove(i);
        if kept.iter().all(|k| interval_iou(k.interval(), top.interval()) < threshold) {
            kept.push(top);
        }
    }
    kept
}

/// Candidates, pairing, suppression, score ordering and truncation to `top_n`.
pub fn generate_proposals<T: Real>(out: &BmmOutput<T>, cfg: &PostConfig) -> Result<Vec<Proposal>> {
    let starts = find_boundary_candidates(&out.start);
    let ends = find_boundary_candidates(&out.end);
    let props = pair_and_score(&starts, &ends, out);
    let mut kept = match cfg.resolved()? {
        Suppression::Soft { theta1, theta2, sigma } => {
            soft_nms(&props, theta1, theta2, sigma, cfg.score_floor, out.len() as f64)
        }
        Suppression::Hard { threshold } => nms(&props, threshold),
    };
    kept.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.start.total_cmp(&b.start)));
    kept.truncate(cfg.top_n);
    Ok(kept)
}

/// Converts snippet-coordinate proposals into seconds.
pub fn to_detections(props: &[Proposal], seconds_per_snippet: f64) -> Vec<Detection> {
    props
        .iter()
        .map(|p| Detection {
            segment: [p.start * seconds_per_snippet, p.end * seconds_per_snippet],
            score: p.score,
            label: None,
        })
        .collect()
}

/// Video-level class scores for detection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub label: String,
    pub score: f64,
}

pub type ClassScores = BTreeMap<String, Vec<ClassScore>>;

pub fn load_class_scores(path: &Path) -> Result<ClassScores> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Labels each proposal with the `top_k` best classes of its video; the
/// detection score is the proposal score times the class score.
pub fn classify(preds: &Predictions, classes: &ClassScores, top_k: usize) -> Predictions {
    let mut out = Predictions::new();
    for (vid, dets) in preds {
        let Some(cs) = classes.get(vid) else {
            log::warn!("{vid}: no class scores, proposals dropped from detection output");
            continue;
        };
        let mut cs = cs.clone();
        cs.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.label.cmp(&b.label)));
        cs.truncate(top_k);
        let labeled = dets
            .iter()
            .flat_map(|d| {
                cs.iter().map(move |c| Detection {
                    segment: d.segment,
                    score: d.score * c.score,
                    label: Some(c.label.clone()),
                })
            })
            .collect();
        out.insert(vid.clone(), labeled);
    }
    out
}
