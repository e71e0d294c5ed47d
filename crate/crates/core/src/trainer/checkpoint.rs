//! Binary container of named arrays.
//!
//! Layout (little-endian): magic `FWRP`, `u32` version, `u32` entry count,
//! then per entry `u32` name length, UTF-8 name, `u8` dtype (0 = f64, 1 = u8,
//! 2 = u64), `u32` rank, `u64` extents and the payload.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::AdamState;
use super::config::{Stage, TrainConfig};
use super::model::Model;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::fields::Bbox;
use crate::trajectory::BASIS_TAG;

pub const MAGIC: &[u8; 4] = b"FWRP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Array {
    F64(Vec<usize>, Vec<f64>),
    U8(Vec<usize>, Vec<u8>),
    U64(Vec<usize>, Vec<u64>),
}

impl Array {
    fn text(s: &str) -> Array {
        Array::U8(vec![s.len()], s.as_bytes().to_vec())
    }

    fn tensor(t: &Tensor) -> Array {
        Array::F64(t.shape().to_vec(), t.data().to_vec())
    }
}

pub fn encode_container(entries: &[(String, Array)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, arr) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let (tag, shape) = match arr {
            Array::F64(s, _) => (0u8, s),
            Array::U8(s, _) => (1, s),
            Array::U64(s, _) => (2, s),
        };
        out.push(tag);
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &e in shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        match arr {
            Array::F64(_, d) => d.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Array::U8(_, d) => out.extend_from_slice(d),
            Array::U64(_, d) => d.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint("truncated container".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_container(buf: &[u8]) -> Result<Vec<(String, Array)>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
        let tag = r.take(1)?[0];
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let arr = match tag {
            0 => Array::F64(shape, (0..n).map(|_| r.u64().map(f64::from_bits)).collect::<Result<_>>()?),
            1 => Array::U8(shape, r.take(n)?.to_vec()),
            2 => Array::U64(shape, (0..n).map(|_| r.u64()).collect::<Result<_>>()?),
            other => return Err(Error::Checkpoint(format!("{name}: unknown dtype {other}"))),
        };
        out.push((name, arr));
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes after the last entry".into()));
    }
    Ok(out)
}

/// Everything needed to resume or evaluate a stage.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub iteration: u64,
    /// The resolved configuration, verbatim.
    pub config_toml: String,
    pub model: Model,
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn config(&self) -> Result<TrainConfig> {
        TrainConfig::from_toml(&self.config_toml)
    }

    pub fn to_entries(&self) -> Vec<(String, Array)> {
        let b = &self.model.bbox;
        let mut e = vec![
            ("meta.stage".to_string(), Array::text(self.stage.name())),
            ("meta.iteration".into(), Array::U64(vec![1], vec![self.iteration])),
            ("meta.config".into(), Array::text(&self.config_toml)),
            ("meta.basis".into(), Array::text(BASIS_TAG)),
            ("meta.bbox".into(), Array::F64(vec![2, 3], [b.min, b.max].concat())),
            ("meta.res".into(), Array::U64(vec![3], self.model.res.iter().map(|&n| n as u64).collect())),
            ("adam.step".into(), Array::U64(vec![1], vec![self.adam.step])),
        ];
        let tensors = self.model.tensors();
        for (name, t) in &tensors {
            e.push((format!("param.{name}"), Array::tensor(t)));
        }
        for (i, (name, _)) in tensors.iter().enumerate() {
            e.push((format!("adam.m.{name}"), Array::tensor(&self.adam.m[i])));
            e.push((format!("adam.v.{name}"), Array::tensor(&self.adam.v[i])));
        }
        e
    }

    pub fn from_entries(entries: Vec<(String, Array)>) -> Result<Self> {
        let mut map: std::collections::HashMap<String, Array> = entries.into_iter().collect();
        let mut take = |k: &str| map.remove(k).ok_or_else(|| Error::Checkpoint(format!("missing entry {k}")));
        let text = |a: Array| match a {
            Array::U8(_, d) => String::from_utf8(d).map_err(|_| Error::Checkpoint("text entry is not UTF-8".into())),
            _ => Err(Error::Checkpoint("expected a text entry".into())),
        };
        let scalar_u64 = |a: Array| match a {
            Array::U64(_, d) if d.len() == 1 => Ok(d[0]),
            _ => Err(Error::Checkpoint("expected a u64 scalar".into())),
        };
        let tensor = |a: Array| match a {
            Array::F64(s, d) => Tensor::new(s, d),
            _ => Err(Error::Checkpoint("expected an f64 array".into())),
        };
        let stage = Stage::parse(&text(take("meta.stage")?)?)?;
        let iteration = scalar_u64(take("meta.iteration")?)?;
        let config_toml = text(take("meta.config")?)?;
        let basis = text(take("meta.basis")?)?;
        if basis != BASIS_TAG {
            return Err(Error::Checkpoint(format!("unknown DCT basis {basis:?}")));
        }
        let bb = tensor(take("meta.bbox")?)?;
        let bbox = Bbox::new([bb.data()[0], bb.data()[1], bb.data()[2]], [bb.data()[3], bb.data()[4], bb.data()[5]])?;
        let res: Vec<usize> = match take("meta.res")? {
            Array::U64(_, d) if d.len() == 3 => d.iter().map(|&n| n as usize).collect(),
            _ => return Err(Error::Checkpoint("meta.res must hold three extents".into())),
        };
        let adam_step = scalar_u64(take("adam.step")?)?;
        let cfg = TrainConfig::from_toml(&config_toml)?;
        let mut model = Model::new(&cfg, stage, bbox, &mut ChaCha8Rng::seed_from_u64(0))?;
        if model.res.as_slice() != res.as_slice() {
            return Err(Error::Checkpoint(format!("resolution {res:?} does not match the configuration ({:?})", model.res)));
        }
        let names: Vec<String> = model.tensors().into_iter().map(|(n, _)| n).collect();
        let mut params = Vec::with_capacity(names.len());
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for n in &names {
            params.push(tensor(take(&format!("param.{n}"))?)?);
            m.push(tensor(take(&format!("adam.m.{n}"))?)?);
            v.push(tensor(take(&format!("adam.v.{n}"))?)?);
        }
        model.set_tensors(params)?;
        if let Some(extra) = map.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected entry {extra}")));
        }
        Ok(Checkpoint { stage, iteration, config_toml, model, adam: AdamState { step: adam_step, m, v } })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode_container(&self.to_entries())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Checkpoint::from_entries(decode_container(bytes)?)
    }

    /// Write atomically through a temporary file in the same directory.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Load { path: path.to_path_buf(), reason: e.to_string() })?;
        Checkpoint::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_round_trip() {
        let entries = vec![
            ("a".to_string(), Array::F64(vec![2], vec![1.5, -0.0])),
            ("b".to_string(), Array::U8(vec![3], b"xyz".to_vec())),
            ("c".to_string(), Array::U64(vec![1, 1], vec![7])),
        ];
        let bytes = encode_container(&entries);
        assert_eq!(&bytes[..4], b"FWRP");
        let back = decode_container(&bytes).unwrap();
        assert_eq!(back, entries);
        assert_eq!(encode_container(&back), bytes);
        assert!(decode_container(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_container(&bad).is_err());
    }
}
