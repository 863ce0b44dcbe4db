//! Proposal and detection metrics.
//!
//! * `AR@AN`: for every video keep the `AN` best proposals, match them
//!   one-to-one against the ground truth (highest IoU pairs first, pairs
//!   below the threshold never match), and divide the matched count by the
//!   number of ground-truth actions, pooled over videos. The result is
//!   averaged over the tIoU grid.
//! * `AUC`: trapezoidal area under AR for `AN = 1..=100`, normalized by the
//!   span and reported in percent.
//! * `mAP`: per class, detections in score order are matched greedily to the
//!   unmatched ground truth with the highest IoU; AP is the all-points
//!   interpolated area under the precision/recall curve.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::VideoAnnotation;
use crate::error::{Error, Result};

/// `|a ∩ b| / |a ∪ b|`; zero when either interval has no length.
pub fn interval_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let la = a.1 - a.0;
    let lb = b.1 - b.0;
    if la <= 0.0 || lb <= 0.0 {
        return 0.0;
    }
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = la + lb - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// A scored interval in seconds, optionally classified.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub segment: [f64; 2],
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl Detection {
    pub fn interval(&self) -> (f64, f64) {
        (self.segment[0], self.segment[1])
    }
}

/// Detections per video id.
pub type Predictions = BTreeMap<String, Vec<Detection>>;

pub fn parse_predictions(text: &str) -> Result<Predictions> {
    let mut root: Value = serde_json::from_str(text)?;
    if let Some(r) = root.get_mut("results") {
        root = r.take();
    }
    Ok(serde_json::from_value(root)?)
}

pub fn load_predictions(path: &Path) -> Result<Predictions> {
    parse_predictions(&fs::read_to_string(path)?)
}

pub fn save_predictions(path: &Path, preds: &Predictions) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(preds)?)?;
    Ok(())
}

/// Sorts by score, descending; ties go to the earlier start, then the earlier end.
pub fn sort_by_score(dets: &mut [Detection]) {
    dets.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.segment[0].total_cmp(&b.segment[0]))
            .then(a.segment[1].total_cmp(&b.segment[1]))
    });
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub tiou_thresholds: Vec<f64>,
    /// AUC is taken over `AN = 1..=auc_max_an`.
    pub auc_max_an: usize,
    pub report_an: Vec<usize>,
    /// Thresholds for mAP.
    pub map_thresholds: Vec<f64>,
    /// Proposals kept per video before anything else; `None` keeps all.
    pub proposal_cap: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            tiou_thresholds: default_tiou_grid(),
            auc_max_an: 100,
            report_an: vec![1, 10, 50, 100, 200, 500, 1000],
            map_thresholds: vec![0.5, 0.75, 0.95],
            proposal_cap: None,
        }
    }
}

/// `0.5, 0.55, ..., 0.95`
pub fn default_tiou_grid() -> Vec<f64> {
    (0..10).map(|i| ((50 + 5 * i) as f64) / 100.0).collect()
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        for grid in [&self.tiou_thresholds, &self.map_thresholds] {
            if grid.is_empty() {
                return Err(Error::Config("threshold grid is empty".into()));
            }
            if grid.iter().any(|&t| !(t > 0.0 && t <= 1.0)) || grid.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config(format!("thresholds must increase within (0, 1]: {grid:?}")));
            }
        }
        if self.auc_max_an == 0 {
            return Err(Error::Config("auc_max_an must be positive".into()));
        }
        Ok(())
    }
}

/// Number of ground-truth intervals matched by `props` at `tiou`, with
/// one-to-one matching that takes the highest-IoU pairs first.
pub fn matched_count(props: &[(f64, f64)], gts: &[(f64, f64)], tiou: f64) -> usize {
    let mut pairs = Vec::new();
    for (i, &p) in props.iter().enumerate() {
        for (j, &g) in gts.iter().enumerate() {
            let v = interval_iou(p, g);
            if v >= tiou {
                pairs.push((v, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_p = vec![false; props.len()];
    let mut used_g = vec![false; gts.len()];
    let mut n = 0;
    for (_, i, j) in pairs {
        if !used_p[i] && !used_g[j] {
            used_p[i] = true;
            used_g[j] = true;
            n += 1;
        }
    }
    n
}

struct VideoSets {
    /// Proposals in score order.
    props: Vec<(f64, f64)>,
    gts: Vec<(f64, f64)>,
}

fn collect_sets(preds: &Predictions, gt: &[VideoAnnotation], cap: Option<usize>) -> Vec<VideoSets> {
    let mut out = Vec::new();
    let mut empty = 0;
    for a in gt {
        if a.actions.is_empty() {
            empty += 1;
            continue;
        }
        let mut dets = preds.get(&a.video_id).cloned().unwrap_or_default();
        sort_by_score(&mut dets);
        if let Some(c) = cap {
            dets.truncate(c);
        }
        out.push(VideoSets {
            props: dets.iter().map(Detection::interval).collect(),
            gts: a.actions.iter().map(|x| (x.start(), x.end())).collect(),
        });
    }
    if empty > 0 {
        log::warn!("{empty} videos without ground truth are excluded from recall");
    }
    out
}

fn recall_sets(sets: &[VideoSets], an: usize, tious: &[f64]) -> f64 {
    let total: usize = sets.iter().map(|s| s.gts.len()).sum();
    if total == 0 {
        log::warn!("no ground-truth actions: recall defined as 1");
        return 1.0;
    }
    let per: f64 = tious
        .iter()
        .map(|&t| {
            let hit: usize = sets
                .iter()
                .map(|s| matched_count(&s.props[..an.min(s.props.len())], &s.gts, t))
                .sum();
            hit as f64 / total as f64
        })
        .sum();
    per / tious.len() as f64
}

/// Average recall with the `an` best proposals per video, averaged over `tious`.
pub fn recall_at_an(preds: &Predictions, gt: &[VideoAnnotation], an: usize, tious: &[f64]) -> f64 {
    recall_sets(&collect_sets(preds, gt, None), an, tious)
}

/// AR for `AN = 1..=max_an`.
pub fn ar_curve(preds: &Predictions, gt: &[VideoAnnotation], max_an: usize, tious: &[f64]) -> Vec<f64> {
    let sets = collect_sets(preds, gt, None);
    (1..=max_an).map(|an| recall_sets(&sets, an, tious)).collect()
}

/// Trapezoidal area under an AR curve sampled at `AN = 1, 2, ...`, in percent.
pub fn auc(curve: &[f64]) -> f64 {
    match curve.len() {
        0 => 0.0,
        1 => 100.0 * curve[0],
        n => {
            let area: f64 = curve.windows(2).map(|w| (w[0] + w[1]) / 2.0).sum();
            100.0 * area / (n - 1) as f64
        }
    }
}

/// All-points interpolated average precision of detections already marked
/// true/false positive in score order.
pub fn average_precision(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 || tp.is_empty() {
        return 0.0;
    }
    let mut prec = Vec::with_capacity(tp.len());
    let mut rec = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        if t {
            hits += 1;
        }
        prec.push(hits as f64 / (k + 1) as f64);
        rec.push(hits as f64 / n_gt as f64);
    }
    for k in (0..prec.len().saturating_sub(1)).rev() {
        prec[k] = prec[k].max(prec[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (p, r) in prec.iter().zip(&rec) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    ap
}

/// True/false positive flags of score-ordered `dets` (video index, interval)
/// against per-video ground truth.
pub fn mark_detections(dets: &[(usize, (f64, f64))], gts: &[Vec<(f64, f64)>], tiou: f64) -> Vec<bool> {
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    dets.iter()
        .map(|&(v, iv)| {
            let mut best: Option<(f64, usize)> = None;
            for (j, &g) in gts[v].iter().enumerate() {
                if used[v][j] {
                    continue;
                }
                let o = interval_iou(iv, g);
                if o >= tiou && best.is_none_or(|(b, _)| o > b) {
                    best = Some((o, j));
                }
            }
            match best {
                Some((_, j)) => {
                    used[v][j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MapReport {
    pub thresholds: Vec<f64>,
    /// Mean AP over classes at each threshold.
    pub map: Vec<f64>,
    /// Mean over thresholds.
    pub average: f64,
    /// Per class, AP at each threshold.
    pub per_class: BTreeMap<String, Vec<f64>>,
}

pub fn average_map(preds: &Predictions, gt: &[VideoAnnotation], tious: &[f64]) -> MapReport {
    let gt_classes: BTreeSet<String> = gt.iter().flat_map(|a| a.labels().map(str::to_string)).collect();
    let det_classes: BTreeSet<String> = preds.values().flatten().filter_map(|d| d.label.clone()).collect();
    for c in det_classes.difference(&gt_classes) {
        log::warn!("class {c:?} has detections but no ground truth: AP 0");
    }
    let classes: BTreeSet<String> = gt_classes.union(&det_classes).cloned().collect();
    let mut per_class = BTreeMap::new();
    for c in &classes {
        let gts: Vec<Vec<(f64, f64)>> = gt
            .iter()
            .map(|a| {
                a.actions
                    .iter()
                    .filter(|x| x.label.as_deref() == Some(c))
                    .map(|x| (x.start(), x.end()))
                    .collect()
            })
            .collect();
        let n_gt: usize = gts.iter().map(Vec::len).sum();
        let mut dets: Vec<(usize, &Detection)> = gt
            .iter()
            .enumerate()
            .flat_map(|(v, a)| {
                preds
                    .get(&a.video_id)
                    .into_iter()
                    .flatten()
                    .filter(|d| d.label.as_deref() == Some(c))
                    .map(move |d| (v, d))
            })
            .collect();
        dets.sort_by(|a, b| {
            b.1.score
                .total_cmp(&a.1.score)
                .then(a.0.cmp(&b.0))
                .then(a.1.segment[0].total_cmp(&b.1.segment[0]))
        });
        let flat: Vec<(usize, (f64, f64))> = dets.iter().map(|(v, d)| (*v, d.interval())).collect();
        let aps = tious
            .iter()
            .map(|&t| average_precision(&mark_detections(&flat, &gts, t), n_gt))
            .collect();
        per_class.insert(c.clone(), aps);
    }
    let map: Vec<f64> = (0..tious.len())
        .map(|i| {
            if per_class.is_empty() {
                0.0
            } else {
                per_class.values().map(|v: &Vec<f64>| v[i]).sum::<f64>() / per_class.len() as f64
            }
        })
        .collect();
    let average = map.iter().sum::<f64>() / map.len().max(1) as f64;
    MapReport {
        thresholds: tious.to_vec(),
        map,
        average,
        per_class,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    /// `(AN, AR)` at the configured report points.
    pub recall: Vec<(usize, f64)>,
    pub auc: f64,
    /// AR for `AN = 1..=auc_max_an`.
    pub curve: Vec<f64>,
    pub map: Option<MapReport>,
}

pub fn evaluate(preds: &Predictions, gt: &[VideoAnnotation], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let sets = collect_sets(preds, gt, cfg.proposal_cap);
    let curve: Vec<f64> = (1..=cfg.auc_max_an).map(|an| recall_sets(&sets, an, &cfg.tiou_thresholds)).collect();
    let recall = cfg
        .report_an
        .iter()
        .map(|&an| (an, recall_sets(&sets, an, &cfg.tiou_thresholds)))
        .collect();
    let classified = preds.values().flatten().any(|d| d.label.is_some());
    let map = classified.then(|| average_map(preds, gt, &cfg.map_thresholds));
    Ok(EvalReport {
        recall,
        auc: auc(&curve),
        curve,
        map,
    })
}

impl EvalReport {
    /// `{"AR@50": .., "AUC": .., "mAP@0.5": .., "mAP": ..}`
    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        for (an, ar) in &self.recall {
            m.insert(format!("AR@{an}"), Value::from(*ar));
        }
        m.insert("AUC".into(), Value::from(self.auc));
        if let Some(mp) = &self.map {
            for (t, v) in mp.thresholds.iter().zip(&mp.map) {
                m.insert(format!("mAP@{t}"), Value::from(*v));
            }
            m.insert("mAP".into(), Value::from(mp.average));
        }
        Value::Object(m)
    }

    /// `an,ar` header and one row per AN.
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("an,ar\n");
        for (i, v) in self.curve.iter().enumerate() {
            s.push_str(&format!("{},{v:.6}\n", i + 1));
        }
        s
    }

    /// A minimal line plot of the AR curve.
    pub fn curve_svg(&self) -> String {
        let (w, h, pad) = (480.0, 320.0, 40.0);
        let n = self.curve.len().max(2) as f64 - 1.0;
        let pts: Vec<String> = self
            .curve
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let x = pad + (w - 2.0 * pad) * i as f64 / n;
                let y = h - pad - (h - 2.0 * pad) * v.clamp(0.0, 1.0);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        format!(
            concat!(
                "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n",
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n",
                "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
                "<line x1=\"{p}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n",
                "<line x1=\"{p}\" y1=\"{p}\" x2=\"{p}\" y2=\"{b}\" stroke=\"black\"/>\n",
                "<text x=\"{cx}\" y=\"{ty}\" font-size=\"12\" text-anchor=\"middle\">AN</text>\n",
                "<text x=\"12\" y=\"{cy}\" font-size=\"12\">AR</text>\n",
                "<text x=\"{cx}\" y=\"20\" font-size=\"12\" text-anchor=\"middle\">AUC {auc:.2}</text>\n",
                "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"{pts}\"/>\n",
                "</svg>\n"
            ),
            w = w,
            h = h,
            p = pad,
            b = h - pad,
            r = w - pad,
            cx = w / 2.0,
            ty = h - 8.0,
            cy = h / 2.0,
            auc = self.auc,
            pts = pts.join(" ")
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Action;

    fn ann(id: &str, acts: &[(f64, f64)]) -> VideoAnnotation {
        VideoAnnotation::new(id, 100.0, 10.0, acts.iter().map(|&(s, e)| Action::new(s, e)).collect()).unwrap()
    }

    fn det(s: f64, e: f64, score: f64) -> Detection {
        Detection {
            segment: [s, e],
            score,
            label: None,
        }
    }

    #[test]
    fn iou_examples() {
        assert!((interval_iou((0.0, 10.0), (5.0, 15.0)) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(interval_iou((0.0, 1.0), (2.0, 3.0)), 0.0);
        assert_eq!(interval_iou((2.0, 3.0), (2.0, 3.0)), 1.0);
        assert_eq!(interval_iou((2.0, 2.0), (2.0, 3.0)), 0.0);
    }

    #[test]
    fn recall_examples() {
        let gt = vec![ann("v", &[(10.0, 20.0), (50.0, 60.0)])];
        let mut p = Predictions::new();
        p.insert("v".into(), vec![det(10.0, 20.0, 0.9), det(80.0, 90.0, 0.5)]);
        assert_eq!(recall_at_an(&p, &gt, 2, &default_tiou_grid()), 0.5);
        p.insert("v".into(), vec![det(10.0, 20.0, 0.9), det(50.0, 60.0, 0.5)]);
        assert_eq!(recall_at_an(&p, &gt, 100, &default_tiou_grid()), 1.0);
        assert_eq!(recall_at_an(&p, &[ann("w", &[])], 10, &[0.5]), 1.0);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.5; 100]), 50.0);
        assert_eq!(auc(&[1.0; 100]), 100.0);
        let ramp: Vec<f64> = (0..100).map(|i| i as f64 / 99.0).collect();
        assert!((auc(&ramp) - 50.0).abs() < 1e-9);
    }

    #[test]
    fn map_examples() {
        let mut gt = ann("v", &[(10.0, 20.0)]);
        gt.actions[0].label = Some("jump".into());
        let mut p = Predictions::new();
        p.insert(
            "v".into(),
            vec![Detection {
                segment: [10.0, 22.0],
                score: 0.8,
                label: Some("jump".into()),
            }],
        );
        let r = average_map(&p, std::slice::from_ref(&gt), &[0.5, 0.9]);
        assert_eq!(r.map, vec![1.0, 0.0]);
        let none = average_map(&Predictions::new(), &[gt], &[0.5]);
        assert_eq!(none.map, vec![0.0]);
    }

    #[test]
    fn ap_interpolation() {
        // TP, FP, TP with 2 ground truths: precision 1, 1/2, 2/3 -> interpolated 1, 2/3, 2/3
        let ap = average_precision(&[true, false, true], 2);
        assert!((ap - (0.5 * 1.0 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn report_outputs() {
        let gt = vec![ann("v", &[(10.0, 20.0)])];
        let mut p = Predictions::new();
        p.insert("v".into(), vec![det(10.0, 20.0, 1.0)]);
        let r = evaluate(&p, &gt, &EvalConfig::default()).unwrap();
        assert_eq!(r.auc, 100.0);
        assert_eq!(r.curve_csv().lines().count(), 101);
        let j = r.to_json();
        assert_eq!(j["AR@100"], 1.0);
        assert!(r.curve_svg().starts_with("<?xml"));
        let bad = EvalConfig {
            tiou_thresholds: vec![0.7, 0.5],
            ..EvalConfig::default()
        };
        assert!(evaluate(&p, &gt, &bad).is_err());
    }

    #[test]
    fn predictions_json_round_trip() {
        let mut p = Predictions::new();
        p.insert("a".into(), vec![det(1.0, 2.5, 0.25)]);
        let text = serde_json::to_string(&p).unwrap();
        assert_eq!(parse_predictions(&text).unwrap(), p);
        let wrapped = format!("{{\"results\": {text}}}");
        assert_eq!(parse_predictions(&wrapped).unwrap(), p);
    }
}
