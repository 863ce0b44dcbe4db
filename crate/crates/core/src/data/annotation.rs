//! Ground-truth annotations in the ActivityNet JSON layout.
//!
//! ```json
//! { "video_1": { "duration": 10.0, "fps": 16.0, "frame_count": 160,
//!                "subset": "training",
//!                "annotations": [ { "segment": [2.0, 5.0], "label": "jump" } ] } }
//! ```
//!
//! A top-level `"database"` wrapper, as in the public ActivityNet release, is
//! also accepted. `frame_count` defaults to `round(duration * fps)`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// One ground-truth action interval in seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub segment: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl Action {
    pub fn new(start: f64, end: f64) -> Self {
        Action {
            segment: [start, end],
            label: None,
        }
    }

    pub fn start(&self) -> f64 {
        self.segment[0]
    }

    pub fn end(&self) -> f64 {
        self.segment[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoAnnotation {
    pub video_id: String,
    pub duration_seconds: f64,
    pub fps: f64,
    pub frame_count: usize,
    pub actions: Vec<Action>,
    pub subset: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct RawVideo {
    duration: f64,
    fps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    frame_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    subset: Option<String>,
    #[serde(default)]
    annotations: Vec<Action>,
}

impl VideoAnnotation {
    pub fn new(video_id: impl Into<String>, duration_seconds: f64, fps: f64, actions: Vec<Action>) -> Result<Self> {
        let a = VideoAnnotation {
            video_id: video_id.into(),
            duration_seconds,
            fps,
            frame_count: (duration_seconds * fps).round() as usize,
            actions,
            subset: None,
        };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Error::Annotation {
            video_id: self.video_id.clone(),
            msg,
        };
        if !(self.duration_seconds > 0.0 && self.duration_seconds.is_finite()) {
            return Err(err(format!("duration must be positive, got {}", self.duration_seconds)));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(err(format!("fps must be positive, got {}", self.fps)));
        }
        if self.frame_count == 0 {
            return Err(err("frame count must be positive".into()));
        }
        for a in &self.actions {
            let [s, e] = a.segment;
            if !(s.is_finite() && e.is_finite() && 0.0 <= s && s < e && e <= self.duration_seconds) {
                return Err(err(format!(
                    "action [{s}, {e}] violates 0 <= start < end <= {}",
                    self.duration_seconds
                )));
            }
        }
        Ok(())
    }

    /// Number of snippets `ceil(N / snippet_len)`.
    pub fn snippet_count(&self, snippet_len: usize) -> usize {
        self.frame_count.div_ceil(snippet_len)
    }

    /// Factor mapping seconds to snippet coordinates for a `t`-snippet sequence.
    pub fn snippet_scale(&self, t: usize) -> f64 {
        t as f64 * self.fps / self.frame_count as f64
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.actions.iter().filter_map(|a| a.label.as_deref())
    }
}

/// Rescales an action from seconds into the `t`-snippet range by `t * fps / N`.
pub fn rescale_action(action: (f64, f64), annotation: &VideoAnnotation, t: usize) -> (f64, f64) {
    let k = annotation.snippet_scale(t);
    (action.0 * k, action.1 * k)
}

/// All actions of a video in snippet coordinates.
pub fn rescaled_actions(annotation: &VideoAnnotation, t: usize) -> Vec<(f64, f64)> {
    annotation
        .actions
        .iter()
        .map(|a| rescale_action((a.start(), a.end()), annotation, t))
        .collect()
}

pub fn parse_annotations(text: &str) -> Result<Vec<VideoAnnotation>> {
    let mut root: Value = serde_json::from_str(text)?;
    if let Some(db) = root.get_mut("database") {
        root = db.take();
    }
    let Value::Object(map) = root else {
        return Err(Error::Annotation {
            video_id: String::new(),
            msg: "top level must be an object keyed by video id".into(),
        });
    };
    let mut out = Vec::with_capacity(map.len());
    for (video_id, v) in map {
        let raw: RawVideo = serde_json::from_value(v).map_err(|e| Error::Annotation {
            video_id: video_id.clone(),
            msg: e.to_string(),
        })?;
        let ann = VideoAnnotation {
            frame_count: raw
                .frame_count
                .unwrap_or_else(|| (raw.duration * raw.fps).round() as usize),
            video_id,
            duration_seconds: raw.duration,
            fps: raw.fps,
            actions: raw.annotations,
            subset: raw.subset,
        };
        ann.validate()?;
        out.push(ann);
    }
    out.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    Ok(out)
}

pub fn to_json(annotations: &[VideoAnnotation]) -> Value {
    let map: BTreeMap<&str, RawVideo> = annotations
        .iter()
        .map(|a| {
            (
                a.video_id.as_str(),
                RawVideo {
                    duration: a.duration_seconds,
                    fps: a.fps,
                    frame_count: Some(a.frame_count),
                    subset: a.subset.clone(),
                    annotations: a.actions.clone(),
                },
            )
        })
        .collect();
    serde_json::to_value(map).expect("annotations serialize")
}

pub fn load_annotations(path: &Path) -> Result<Vec<VideoAnnotation>> {
    parse_annotations(&fs::read_to_string(path)?)
}

pub fn save_annotations(path: &Path, annotations: &[VideoAnnotation]) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(&to_json(annotations))?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_single_video() {
        let text = r#"{"v1": {"duration": 10.0, "fps": 16.0,
            "annotations": [{"segment": [2.0, 5.0], "label": "jump"}]}}"#;
        let anns = parse_annotations(text).unwrap();
        assert_eq!(anns.len(), 1);
        assert_eq!(anns[0].frame_count, 160);
        assert_eq!(anns[0].actions[0].segment, [2.0, 5.0]);
        assert_eq!(anns[0].actions[0].label.as_deref(), Some("jump"));
    }

    #[test]
    fn accepts_database_wrapper() {
        let text = r#"{"database": {"v1": {"duration": 4.0, "fps": 8.0, "annotations": []}}}"#;
        assert_eq!(parse_annotations(text).unwrap()[0].video_id, "v1");
    }

    #[test]
    fn reversed_segment_names_video() {
        let text = r#"{"bad_video": {"duration": 10.0, "fps": 16.0,
            "annotations": [{"segment": [5.0, 5.0]}]}}"#;
        match parse_annotations(text) {
            Err(Error::Annotation { video_id, .. }) => assert_eq!(video_id, "bad_video"),
            other => panic!("expected annotation error, got {other:?}"),
        }
    }

    #[test]
    fn round_trip() {
        let mut a = VideoAnnotation::new("x", 7.5, 30.0, vec![Action::new(0.5, 3.25)]).unwrap();
        a.subset = Some("unseen".into());
        a.actions[0].label = Some("c0".into());
        let back = parse_annotations(&to_json(&[a.clone()]).to_string()).unwrap();
        assert_eq!(back, vec![a]);
    }

    #[test]
    fn rescale_examples() {
        let a = VideoAnnotation::new("v", 10.0, 16.0, vec![]).unwrap();
        assert_eq!(a.frame_count, 160);
        assert_eq!(rescale_action((0.0, 1.0), &a, 10).0, 0.0);
        // 10 snippets over 10 s: one snippet per second
        let (s, e) = rescale_action((2.0, 5.0), &a, 10);
        assert!((s - 2.0).abs() < 1e-12 && (e - 5.0).abs() < 1e-12);
        let (s, e) = rescale_action((2.0, 5.0), &a, 16);
        assert!((s - 3.2).abs() < 1e-12 && (e - 8.0).abs() < 1e-12);
        let (_, e) = rescale_action((0.0, a.duration_seconds), &a, 10);
        assert!((e - 10.0).abs() < 1e-12);
    }
}
