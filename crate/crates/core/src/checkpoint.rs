//! Tensor checkpoint files.
//!
//! Layout: `b"MVKT"`, a `u32` format version, a `u32`-length JSON header,
//! a `u32` record count, then records of
//! `(u32 name length, name, u32 rank, u64 dims.., u8 dtype, raw LE bytes)`.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MVKT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            t => Err(Error::Checkpoint(format!("unknown dtype tag {t}"))),
        }
    }
}

/// Pipeline stage that produced a checkpoint, in pipeline order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Autoencoder,
    Base,
    GuidanceDistilled,
    VFinetuned,
    Adversarial,
    AdversarialState,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Autoencoder => "autoencoder",
            Stage::Base => "base",
            Stage::GuidanceDistilled => "guidance-distilled",
            Stage::VFinetuned => "v-finetuned",
            Stage::Adversarial => "adversarial",
            Stage::AdversarialState => "adversarial-state",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.into()))
            .map_err(|_| Error::InvalidArgument(format!("unknown stage {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub stage: Stage,
    /// Checksums of the checkpoints this one was derived from, by stage.
    #[serde(default)]
    pub parents: Vec<(Stage, String)>,
    /// Stage-specific metadata (model configs, optimizer scalars, ...).
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl Header {
    pub fn new(stage: Stage) -> Self {
        Self {
            stage,
            parents: Vec::new(),
            meta: serde_json::Value::Null,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(header: Header) -> Self {
        Self {
            header,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    /// Add every tensor of `store` under `prefix/`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore) {
        for (name, t) in store.iter() {
            self.push(format!("{prefix}/{name}"), t.clone());
        }
    }

    /// Tensors stored under `prefix/`, prefix stripped.
    pub fn store(&self, prefix: &str) -> ParamStore {
        let lead = format!("{prefix}/");
        let mut s = ParamStore::new();
        for (name, t) in &self.tensors {
            if let Some(rest) = name.strip_prefix(&lead) {
                s.add(rest, t.clone());
            }
        }
        s
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Fail unless this checkpoint came from `stage`.
    pub fn expect_stage(&self, stage: Stage) -> Result<&Self> {
        if self.header.stage != stage {
            return Err(Error::Checkpoint(format!(
                "expected a {stage} checkpoint, found {}",
                self.header.stage
            )));
        }
        Ok(self)
    }

    pub fn meta<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .header
            .meta
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("{} checkpoint lacks {key:?}", self.header.stage)))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    pub fn to_bytes(&self, dtype: Dtype) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header)?;
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.push(dtype.tag());
            for &v in t.data() {
                match dtype {
                    Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a moviekit checkpoint".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let hlen = read_u32(&mut r)? as usize;
        let header: Header = serde_json::from_slice(take(&mut r, hlen)?)?;
        let n = read_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            let len = read_u32(&mut r)? as usize;
            let name = String::from_utf8(take(&mut r, len)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))?;
            let rank = read_u32(&mut r)? as usize;
            let shape = (0..rank).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let mut tag = [0u8];
            read_exact(&mut r, &mut tag)?;
            let count: usize = shape.iter().product();
            let data = match Dtype::from_tag(tag[0])? {
                Dtype::F32 => take(&mut r, count * 4)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                Dtype::F64 => take(&mut r, count * 8)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            };
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
        let bytes = self.to_bytes(dtype)?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?
            .read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Hex SHA-256 of the serialized checkpoint, used as a parent link.
    pub fn digest(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        let h = Sha256::digest(self.to_bytes(Dtype::F64)?);
        Ok(h.iter().map(|b| format!("{b:02x}")).collect())
    }
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(Error::Checkpoint("truncated checkpoint".into()));
    }
    let (head, rest) = r.split_at(n);
    *r = rest;
    Ok(head)
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    buf.copy_from_slice(take(r, buf.len())?);
    Ok(())
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(r, 4)?.try_into().unwrap()))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    Ok(u64::from_le_bytes(take(r, 8)?.try_into().unwrap()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut c = Checkpoint::new(Header {
            stage: Stage::Base,
            parents: vec![(Stage::Autoencoder, "abc".into())],
            meta: serde_json::json!({"steps": 3}),
        });
        c.push("a/w", Tensor::randn(&[2, 3], &mut rng));
        c.push("b", Tensor::scalar(0.1));
        c
    }

    #[test]
    fn f64_round_trip_is_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes(Dtype::F64).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.meta::<u32>("steps").unwrap(), 3);
        assert_eq!(back.store("a").by_name("w"), c.get("a/w"));
    }

    #[test]
    fn f32_round_trip_is_close() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes(Dtype::F32).unwrap()).unwrap();
        for ((_, a), (_, b)) in c.tensors.iter().zip(&back.tensors) {
            assert!(a.sub(b).unwrap().max_abs() < 1e-6);
        }
    }

    #[test]
    fn corrupt_input_rejected() {
        let bytes = sample().to_bytes(Dtype::F64).unwrap();
        assert_eq!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).unwrap_err().kind(), "checkpoint");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        bad = bytes;
        bad.push(0);
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }

    #[test]
    fn stage_checks() {
        let c = sample();
        assert!(c.expect_stage(Stage::Base).is_ok());
        assert_eq!(c.expect_stage(Stage::GuidanceDistilled).unwrap_err().kind(), "checkpoint");
        assert_eq!("v-finetuned".parse::<Stage>().unwrap(), Stage::VFinetuned);
        assert!(Stage::Base < Stage::Adversarial);
    }
}
