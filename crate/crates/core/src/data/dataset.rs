//! On-disk dataset layout: `annotations.json` next to a `features/`
//! directory holding one `<video_id>.fea` file per video.

use std::fs;
use std::path::Path;

use super::annotation::{load_annotations, save_annotations, VideoAnnotation};
use super::features::{feature_path, load_features, save_features, VideoFeatureSequence, EXTENSION};
use crate::error::Result;

pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const FEATURES_DIR: &str = "features";

pub fn save_dataset(dir: &Path, annotations: &[VideoAnnotation], features: &[VideoFeatureSequence]) -> Result<()> {
    let fdir = dir.join(FEATURES_DIR);
    fs::create_dir_all(&fdir)?;
    save_annotations(&dir.join(ANNOTATIONS_FILE), annotations)?;
    for f in features {
        save_features(&feature_path(&fdir, &f.video_id), f)?;
    }
    Ok(())
}

/// Annotations (empty when the file is absent) and every feature file, sorted by video id.
pub fn load_dataset(dir: &Path) -> Result<(Vec<VideoAnnotation>, Vec<VideoFeatureSequence>)> {
    let ann_path = dir.join(ANNOTATIONS_FILE);
    let annotations = if ann_path.exists() {
        load_annotations(&ann_path)?
    } else {
        log::warn!("{} not found, continuing without annotations", ann_path.display());
        Vec::new()
    };
    let fdir = dir.join(FEATURES_DIR);
    let mut features = Vec::new();
    if fdir.is_dir() {
        let mut paths: Vec<_> = fs::read_dir(&fdir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        paths.retain(|p| p.extension().is_some_and(|e| e == EXTENSION));
        paths.sort();
        for p in paths {
            features.push(load_features(&p)?);
        }
    }
    Ok((annotations, features))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthSpec};

    #[test]
    fn round_trip() {
        let spec = SynthSpec {
            n_videos: 2,
            ..SynthSpec::default()
        };
        let (anns, feats) = synth_generate(4, &spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &anns, &feats).unwrap();
        let (a, f) = load_dataset(dir.path()).unwrap();
        assert_eq!(a, anns);
        assert_eq!(f, feats);
    }

    #[test]
    fn missing_directory_is_an_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let (a, f) = load_dataset(dir.path()).unwrap();
        assert!(a.is_empty() && f.is_empty());
    }
}
