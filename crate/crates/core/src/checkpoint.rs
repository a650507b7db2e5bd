//! Named-matrix checkpoints.
//!
//! ```text
//! b"FANM"  u32 version (=1)  u32 entry count
//! per entry: u16 name length, UTF-8 name, u32 rows, u32 cols, rows·cols f64
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Parameterized};

pub const MAGIC: &[u8; 4] = b"FANM";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Matrix)>,
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, m: Matrix) {
        self.entries.push((name.into(), m));
    }

    /// Adds every parameter of `model` as `prefix/name`.
    pub fn push_model<P: Parameterized>(&mut self, prefix: &str, model: &P) {
        for (name, m) in model.param_names().into_iter().zip(model.params()) {
            self.push(format!("{prefix}/{name}"), m.clone());
        }
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    /// Overwrites the parameters of `model` from the `prefix/name` entries.
    pub fn load_model<P: Parameterized>(&self, prefix: &str, model: &mut P) -> Result<()> {
        let names = model.param_names();
        let mut values = Vec::with_capacity(names.len());
        for (name, current) in names.iter().zip(model.params()) {
            let key = format!("{prefix}/{name}");
            let m = self
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing entry '{key}'")))?;
            if m.shape() != current.shape() {
                return Err(Error::Checkpoint(format!(
                    "entry '{key}' is {:?}, model expects {:?}",
                    m.shape(),
                    current.shape()
                )));
            }
            values.push(m.clone());
        }
        for (dst, src) in model.params_mut().into_iter().zip(values) {
            *dst = src;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, m) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes
                .get(pos..pos + n)
                .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(take(4)?.try_into().unwrap());
        let mut entries = Vec::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(len)?)
                .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?
                .to_string();
            let rows = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let cols = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let n = rows
                .checked_mul(cols)
                .filter(|n| n.checked_mul(8).is_some())
                .ok_or_else(|| Error::Checkpoint(format!("entry '{name}' is too large")))?;
            let raw = take(8 * n)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.push((name, Matrix::from_vec(rows, cols, data)?));
        }
        if pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after last entry".into()));
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
