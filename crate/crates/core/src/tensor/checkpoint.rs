//! Parameter checkpoint files.
//!
//! Layout: the 8-byte magic `TAPGKIT1`, then records until end of file. Each
//! record is a `u32` byte length and UTF-8 name, a `u32` rank followed by
//! `rank` `u32` extents, then the values as little-endian `f64`. All integers
//! are little-endian. Values are always stored at 64-bit width so both
//! precisions round-trip exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::real::Real;

pub const MAGIC: &[u8; 8] = b"TAPGKIT1";

/// A named tensor as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub tensor: Tensor<f64>,
}

impl Record {
    pub fn new<T: Real>(name: impl Into<String>, tensor: &Tensor<T>) -> Self {
        Record {
            name: name.into(),
            tensor: tensor.cast(),
        }
    }
}

pub fn encode(records: &[Record]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    for r in records {
        let name = r.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(r.tensor.rank() as u32).to_le_bytes());
        for &e in r.tensor.shape() {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in r.tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                msg: format!("unexpected end of file reading {what} at byte {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<Record>> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: "missing TAPGKIT1 magic".into(),
        });
    }
    let mut cur = Cursor { bytes, pos: 8, path };
    let mut out = Vec::new();
    while cur.pos < bytes.len() {
        let n = cur.u32("name length")? as usize;
        let name = String::from_utf8(cur.take(n, "name")?.to_vec()).map_err(|_| Error::Format {
            path: path.to_path_buf(),
            msg: "record name is not UTF-8".into(),
        })?;
        let rank = cur.u32("rank")? as usize;
        let shape = (0..rank)
            .map(|_| cur.u32("extent").map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let raw = cur.take(count * 8, &format!("data of {name}"))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        out.push(Record { name, tensor });
    }
    Ok(out)
}

/// Writes through a sibling temporary file, so an interrupted write never
/// replaces an existing checkpoint with a partial one.
pub fn write(path: &Path, records: &[Record]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&encode(records))?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Vec<Record>> {
    decode(&fs::read(path)?, path)
}

impl<T: Real> ParamStore<T> {
    pub fn to_records(&self) -> Vec<Record> {
        self.iter().map(|(_, p)| Record::new(&p.name, &p.value)).collect()
    }

    /// Overwrites every parameter from `records`; each must be present with a matching shape.
    pub fn load_records(&mut self, records: &[Record]) -> Result<()> {
        let ids: Vec<_> = self.ids().collect();
        for id in ids {
            let name = self.get(id).name.clone();
            let rec = records.iter().find(|r| r.name == name).ok_or_else(|| {
                Error::Config(format!("checkpoint has no parameter {name}"))
            })?;
            if rec.tensor.shape() != self.value(id).shape() {
                return Err(Error::dim(
                    "checkpoint",
                    format!(
                        "{name}: model {:?}, checkpoint {:?}",
                        self.value(id).shape(),
                        rec.tensor.shape()
                    ),
                ));
            }
            *self.value_mut(id) = rec.tensor.cast();
        }
        Ok(())
    }
}
