//! Vocabulary-based object selection.
//!
//! A frame embedding is compared with every embedded vocabulary word by
//! cosine similarity; the text features of the `K` best words become the
//! object rows of the snippet. The text and image encoders themselves are
//! outside this crate: text features and both projections are inputs.

use std::fs;
use std::path::Path;

use crate::data::EntityRows;
use crate::error::{Error, Result};
use crate::tensor::checkpoint::{self, Record};
use crate::tensor::Tensor;

/// Checkpoint record names of a vocabulary file.
pub const TEXT_FEATURES: &str = "text_features";
pub const TEXT_PROJECTION: &str = "w_text";
pub const IMAGE_PROJECTION: &str = "w_image";

fn project(x: &[f64], w: &Tensor<f64>) -> Vec<f64> {
    let (n, m) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![0.0; m];
    for (i, &xi) in x.iter().enumerate().take(n) {
        for (o, &wij) in out.iter_mut().zip(w.row(i)) {
            *o += xi * wij;
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct EmbeddedVocabulary {
    pub words: Vec<String>,
    /// `[D, d_t]`
    pub text_features: Tensor<f64>,
    /// `[d_t, d_joint]`
    pub projection: Tensor<f64>,
    /// `[D, d_joint]`, rows of `text_features` projected by `projection`.
    pub embeddings: Tensor<f64>,
}

impl EmbeddedVocabulary {
    pub fn new(words: Vec<String>, text_features: Tensor<f64>, projection: Tensor<f64>) -> Result<Self> {
        let fs = text_features.shape();
        let ps = projection.shape();
        if fs.len() != 2 || ps.len() != 2 || fs[1] != ps[0] || fs[0] != words.len() {
            return Err(Error::dim(
                "vocabulary",
                format!("{} words, text features {fs:?}, projection {ps:?}", words.len()),
            ));
        }
        if words.is_empty() {
            return Err(Error::EmptySet { op: "vocabulary" });
        }
        let data = (0..fs[0]).flat_map(|i| project(text_features.row(i), &projection)).collect();
        let embeddings = Tensor::new(vec![fs[0], ps[1]], data)?;
        Ok(EmbeddedVocabulary {
            words,
            text_features,
            projection,
            embeddings,
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn joint_dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn text_dim(&self) -> usize {
        self.text_features.shape()[1]
    }

    /// Indices of the `k` words closest to `frame` and their text feature rows.
    pub fn select(&self, frame: &EmbeddedFrame, k: usize) -> Result<(Vec<usize>, EntityRows)> {
        let scores = cosine_scores(&frame.embedding, &self.embeddings)?;
        let idx = top_k(&scores, k)?;
        let data = idx
            .iter()
            .flat_map(|&i| self.text_features.row(i).iter().map(|&v| v as f32))
            .collect();
        Ok((idx, EntityRows::new(self.text_dim(), data)?))
    }
}

#[derive(Clone, Debug)]
pub struct EmbeddedFrame {
    pub image_feature: Vec<f64>,
    pub embedding: Vec<f64>,
}

impl EmbeddedFrame {
    /// Projects `image_feature` (length `d_i`) by `projection: [d_i, d_joint]`.
    pub fn new(image_feature: Vec<f64>, projection: &Tensor<f64>) -> Result<Self> {
        let ps = projection.shape();
        if ps.len() != 2 || ps[0] != image_feature.len() {
            return Err(Error::dim(
                "embedded_frame",
                format!("feature of length {} with projection {ps:?}", image_feature.len()),
            ));
        }
        let embedding = project(&image_feature, projection);
        if embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "embedded_frame" });
        }
        Ok(EmbeddedFrame {
            image_feature,
            embedding,
        })
    }
}

/// Cosine similarity of `query` with every row of `rows: [D, d]`.
pub fn cosine_scores(query: &[f64], rows: &Tensor<f64>) -> Result<Vec<f64>> {
    let s = rows.shape();
    if s.len() != 2 || s[1] != query.len() {
        return Err(Error::dim("cosine_scores", format!("query {} vs rows {s:?}", query.len())));
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let qn = norm(query);
    if qn == 0.0 {
        return Err(Error::Degenerate("cosine_scores: zero-norm query".into()));
    }
    (0..s[0])
        .map(|j| {
            let r = rows.row(j);
            let rn = norm(r);
            if rn == 0.0 {
                return Err(Error::Degenerate(format!("cosine_scores: zero-norm row {j}")));
            }
            let dot: f64 = query.iter().zip(r).map(|(a, b)| a * b).sum();
            Ok((dot / (qn * rn)).clamp(-1.0, 1.0))
        })
        .collect()
}

/// Indices of the `k` largest scores in descending order, ties to the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if scores.is_empty() {
        return Err(Error::EmptySet { op: "top_k" });
    }
    if k == 0 {
        return Err(Error::Config("top_k: K must be at least 1".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// Loads a vocabulary from a JSON word list and a checkpoint holding the text
/// features and both projections. Returns the vocabulary and the image projection.
pub fn load_vocabulary(words_path: &Path, weights_path: &Path) -> Result<(EmbeddedVocabulary, Tensor<f64>)> {
    let words: Vec<String> = serde_json::from_str(&fs::read_to_string(words_path)?)?;
    let records = checkpoint::read(weights_path)?;
    let take = |name: &str| -> Result<Tensor<f64>> {
        records
            .iter()
            .find(|r| r.name == name)
            .map(|r| r.tensor.clone())
            .ok_or_else(|| Error::Format {
                path: weights_path.to_path_buf(),
                msg: format!("missing record {name}"),
            })
    };
    let vocab = EmbeddedVocabulary::new(words, take(TEXT_FEATURES)?, take(TEXT_PROJECTION)?)?;
    let w_image = take(IMAGE_PROJECTION)?;
    if w_image.rank() != 2 || w_image.shape()[1] != vocab.joint_dim() {
        return Err(Error::dim(
            "vocabulary",
            format!("image projection {:?} vs joint width {}", w_image.shape(), vocab.joint_dim()),
        ));
    }
    Ok((vocab, w_image))
}

pub fn save_vocabulary(
    words_path: &Path,
    weights_path: &Path,
    vocab: &EmbeddedVocabulary,
    w_image: &Tensor<f64>,
) -> Result<()> {
    fs::write(words_path, serde_json::to_string(&vocab.words)?)?;
    checkpoint::write(
        weights_path,
        &[
            Record::new(TEXT_FEATURES, &vocab.text_features),
            Record::new(TEXT_PROJECTION, &vocab.projection),
            Record::new(IMAGE_PROJECTION, w_image),
        ],
    )
}
