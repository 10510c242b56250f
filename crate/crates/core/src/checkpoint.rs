//! Training state on disk.
//!
//! Layout (little-endian): magic `GSCK`, u32 version, u32 config length and
//! the config text, u64 epoch, u64 step, u32 parameter count followed by
//! `(u32 name length, name, u8 stream tag, GSTN tensor)` records, then u32
//! momentum count and `(u32 name length, name, GSTN tensor)` records.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::{Param, ParameterStore, StreamTag};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"GSCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Canonical training configuration text.
    pub config: String,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps.
    pub step: u64,
    pub params: ParameterStore,
    pub momentum: BTreeMap<String, Tensor<f32>>,
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_name(&mut out, &self.config);
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, p) in self.params.iter() {
            put_name(&mut out, name);
            out.push(p.tag.code());
            p.tensor.write_to(&mut out).expect("writing to a Vec cannot fail");
        }
        out.extend_from_slice(&(self.momentum.len() as u32).to_le_bytes());
        for (name, t) in &self.momentum {
            put_name(&mut out, name);
            t.write_to(&mut out).expect("writing to a Vec cannot fail");
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(r.err(0, "bad magic, expected GSCK"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err(4, format!("unsupported version {version}")));
        }
        let config = r.string()?;
        let epoch = r.u64()?;
        let step = r.u64()?;
        let mut params = ParameterStore::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let at = r.pos;
            let tag = StreamTag::from_code(r.take(1)?[0]).ok_or_else(|| r.err(at, "unknown stream tag"))?;
            let tensor = r.tensor()?;
            params
                .insert(name, tag, tensor)
                .map_err(|e| r.err(at, e.to_string()))?;
        }
        let mut momentum = BTreeMap::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            momentum.insert(name, r.tensor()?);
        }
        if r.pos != bytes.len() {
            return Err(r.err(r.pos, "trailing bytes"));
        }
        Ok(Checkpoint {
            config,
            epoch,
            step,
            params,
            momentum,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // write-then-rename so an interrupted save keeps the old file
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes).map_err(|e| e.in_file(path))
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Parse {
            what: "checkpoint".into(),
            offset,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(self.pos, format!("truncated, wanted {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let at = self.pos;
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.err(at, "name is not UTF-8"))
    }

    fn tensor(&mut self) -> Result<Tensor<f32>> {
        let base = self.pos;
        let mut rest = &self.bytes[base..];
        let before = rest.len();
        let t = Tensor::read_from(&mut rest).map_err(|e| match e {
            Error::Parse { offset, msg, .. } => self.err(base + offset, format!("tensor: {msg}")),
            other => other,
        })?;
        self.pos += before - rest.len();
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParameterStore::new();
        params
            .insert("a.weight", StreamTag::Regular, Tensor::new(&[2, 1, 1, 1], vec![1.0, -2.0]).unwrap())
            .unwrap();
        params.insert("b.bias", StreamTag::Shape, Tensor::new(&[1], vec![0.5]).unwrap()).unwrap();
        let mut momentum = BTreeMap::new();
        momentum.insert("a.weight".to_string(), Tensor::new(&[2, 1, 1, 1], vec![0.1, 0.2]).unwrap());
        Checkpoint {
            config: "[train]\nepochs = 2\n".into(),
            epoch: 3,
            step: 17,
            params,
            momentum,
        }
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..4], b"GSCK");
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), c);
    }

    #[test]
    fn corruption_is_located() {
        let bytes = sample().to_bytes();
        match Checkpoint::from_bytes(&bytes[..bytes.len() - 3]) {
            Err(Error::Parse { offset, .. }) => assert!(offset > 40 && offset <= bytes.len()),
            other => panic!("{other:?}"),
        }
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Parse { offset: 4, .. })));
    }
}
