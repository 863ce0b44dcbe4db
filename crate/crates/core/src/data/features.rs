//! Per-video snippet feature files.
//!
//! Layout (all integers `u32` little-endian, all reals `f32` little-endian):
//!
//! ```text
//! "TAPGFEA1"  T  d_e  d_a  d_o  delta
//! T records:  M_a  K  f_e[d_e]  F_a[M_a * d_a]  F_o[K * d_o]
//! ```
//!
//! The video id is the file stem.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"TAPGFEA1";
pub const EXTENSION: &str = "fea";

/// A variable number of equally wide entity rows (actors or objects).
#[derive(Clone, Debug, PartialEq, Default)]
pub struct EntityRows {
    pub dim: usize,
    pub data: Vec<f32>,
}

impl EntityRows {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::dim("entity_rows", format!("{} values at width {dim}", data.len())));
        }
        Ok(EntityRows { dim, data })
    }

    pub fn empty(dim: usize) -> Self {
        EntityRows { dim, data: Vec::new() }
    }

    pub fn from_rows(dim: usize, rows: &[Vec<f32>]) -> Result<Self> {
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::dim("entity_rows", "row width mismatch"));
        }
        EntityRows::new(dim, rows.concat())
    }

    pub fn count(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks(self.dim.max(1))
    }
}

/// Environment vector, actor rows and object rows of one snippet.
#[derive(Clone, Debug, PartialEq)]
pub struct SnippetBundle {
    pub env: Vec<f32>,
    pub actors: EntityRows,
    pub objects: EntityRows,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoFeatureSequence {
    pub video_id: String,
    pub snippet_len: usize,
    pub env_dim: usize,
    pub actor_dim: usize,
    pub object_dim: usize,
    pub snippets: Vec<SnippetBundle>,
}

impl VideoFeatureSequence {
    pub fn len(&self) -> usize {
        self.snippets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snippets.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (t, s) in self.snippets.iter().enumerate() {
            let bad = s.env.len() != self.env_dim
                || s.actors.dim != self.actor_dim
                || s.objects.dim != self.object_dim
                || s.actors.data.len() % self.actor_dim.max(1) != 0
                || s.objects.data.len() % self.object_dim.max(1) != 0;
            if bad {
                return Err(Error::dim(
                    "features",
                    format!("{}: snippet {t} does not match header widths", self.video_id),
                ));
            }
            let finite = s.env.iter().chain(&s.actors.data).chain(&s.objects.data).all(|v| v.is_finite());
            if !finite {
                return Err(Error::Degenerate(format!("{}: snippet {t} has non-finite values", self.video_id)));
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        for v in [self.snippets.len(), self.env_dim, self.actor_dim, self.object_dim, self.snippet_len] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        let put = |buf: &mut Vec<u8>, xs: &[f32]| {
            for x in xs {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        };
        for s in &self.snippets {
            buf.extend_from_slice(&(s.actors.count() as u32).to_le_bytes());
            buf.extend_from_slice(&(s.objects.count() as u32).to_le_bytes());
            put(&mut buf, &s.env);
            put(&mut buf, &s.actors.data);
            put(&mut buf, &s.objects.data);
        }
        buf
    }

    pub fn decode(bytes: &[u8], video_id: &str, path: &Path) -> Result<Self> {
        let trunc = |what: String| Error::Truncated {
            path: path.to_path_buf(),
            msg: what,
        };
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: "missing TAPGFEA1 magic".into(),
            });
        }
        let mut pos = 8;
        let u32_at = |pos: &mut usize, what: &str| -> Result<usize> {
            let s = bytes
                .get(*pos..*pos + 4)
                .ok_or_else(|| trunc(format!("{what} at byte {pos}")))?;
            *pos += 4;
            Ok(u32::from_le_bytes(s.try_into().expect("4 bytes")) as usize)
        };
        let t = u32_at(&mut pos, "header")?;
        let d_e = u32_at(&mut pos, "header")?;
        let d_a = u32_at(&mut pos, "header")?;
        let d_o = u32_at(&mut pos, "header")?;
        let delta = u32_at(&mut pos, "header")?;
        if d_e == 0 || d_a == 0 || d_o == 0 || delta == 0 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("zero width in header (d_e={d_e}, d_a={d_a}, d_o={d_o}, delta={delta})"),
            });
        }
        let reals = |pos: &mut usize, n: usize, what: &str| -> Result<Vec<f32>> {
            let s = bytes
                .get(*pos..*pos + 4 * n)
                .ok_or_else(|| trunc(format!("{what}: expected {n} reals at byte {pos}")))?;
            *pos += 4 * n;
            Ok(s.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect())
        };
        let mut snippets = Vec::with_capacity(t);
        for i in 0..t {
            let what = format!("snippet record {i} of {t}");
            let m_a = u32_at(&mut pos, &what)?;
            let k = u32_at(&mut pos, &what)?;
            let env = reals(&mut pos, d_e, &what)?;
            let actors = EntityRows::new(d_a, reals(&mut pos, m_a * d_a, &what)?)?;
            let objects = EntityRows::new(d_o, reals(&mut pos, k * d_o, &what)?)?;
            snippets.push(SnippetBundle { env, actors, objects });
        }
        if pos != bytes.len() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("{} trailing bytes after {t} records", bytes.len() - pos),
            });
        }
        let seq = VideoFeatureSequence {
            video_id: video_id.to_string(),
            snippet_len: delta,
            env_dim: d_e,
            actor_dim: d_a,
            object_dim: d_o,
            snippets,
        };
        seq.validate()?;
        Ok(seq)
    }
}

pub fn feature_path(dir: &Path, video_id: &str) -> PathBuf {
    dir.join(format!("{video_id}.{EXTENSION}"))
}

pub fn save_features(path: &Path, seq: &VideoFeatureSequence) -> Result<()> {
    fs::write(path, seq.encode())?;
    Ok(())
}

pub fn load_features(path: &Path) -> Result<VideoFeatureSequence> {
    let id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            msg: "cannot derive video id from file name".into(),
        })?;
    VideoFeatureSequence::decode(&fs::read(path)?, id, path)
}
