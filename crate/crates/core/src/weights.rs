//! Named parameter maps and the `OPWT` weight-file format.
//!
//! Layout, all integers u64 little-endian:
//!
//! ```text
//! "OPWT" | version u8 | len, architecture utf8 | len, provenance utf8 | count
//! count x ( len, path utf8 | rank | rank x extent | numel x f32 LE )
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use octmh_tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{ArchitectureSpec, ParamKind};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::rng;

pub const MAGIC: &[u8; 4] = b"OPWT";
pub const VERSION: u8 = 1;
const MAX_REPORTED: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Random,
    ExternalFile,
    Byol,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Random => "random",
            Provenance::ExternalFile => "external-file",
            Provenance::Byol => "byol",
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Provenance::Random),
            "external-file" => Ok(Provenance::ExternalFile),
            "byol" => Ok(Provenance::Byol),
            _ => Err(Error::WeightFormat(format!("unknown provenance {s:?}"))),
        }
    }
}

/// Parameter path to tensor, plus where the values came from.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub architecture: String,
    pub provenance: Provenance,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl ModelWeights {
    pub fn new(architecture: impl Into<String>, provenance: Provenance) -> Self {
        Self {
            architecture: architecture.into(),
            provenance,
            tensors: BTreeMap::new(),
        }
    }

    /// Fan-in scaled uniform init for conv and dense weights, zero biases,
    /// unit batch-norm scale and running variance. Each tensor draws from
    /// its own stream keyed by its path.
    pub fn random(spec: &ArchitectureSpec, seed: u64) -> Self {
        let mut w = Self::new(spec.name.as_str(), Provenance::Random);
        for p in spec.params() {
            let n = p.numel();
            let data = match p.kind {
                ParamKind::ConvWeight { fan_in } | ParamKind::DenseWeight { fan_in } => {
                    let a = (6.0 / fan_in as f64).sqrt();
                    let mut r = rng::substream(seed, &[rng::INIT, rng::tag(&p.path)]);
                    (0..n).map(|_| r.random_range(-a..a) as f32).collect()
                }
                ParamKind::DenseBias | ParamKind::BnBias | ParamKind::RunningMean => vec![0.0; n],
                ParamKind::BnWeight | ParamKind::RunningVar => vec![1.0; n],
            };
            w.tensors
                .insert(p.path, Tensor::new(p.shape, data).expect("shape from spec"));
        }
        w
    }

    pub fn get(&self, path: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .get(path)
            .ok_or_else(|| Error::WeightFormat(format!("missing tensor {path}")))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor<f32>> {
        self.tensors
            .get_mut(path)
            .ok_or_else(|| Error::WeightFormat(format!("missing tensor {path}")))
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Checks that the paths and shapes are exactly those of `spec`.
    pub fn validate(&self, spec: &ArchitectureSpec) -> Result<()> {
        let expected = spec.params();
        let mut bad = Vec::new();
        for p in &expected {
            match self.tensors.get(&p.path) {
                None => bad.push(format!("{} (missing)", p.path)),
                Some(t) if t.shape() != p.shape.as_slice() => bad.push(format!(
                    "{} (shape {:?}, expected {:?})",
                    p.path,
                    t.shape(),
                    p.shape
                )),
                Some(_) => {}
            }
        }
        let known: std::collections::HashSet<&str> = expected.iter().map(|p| p.path.as_str()).collect();
        for path in self.tensors.keys() {
            if !known.contains(path.as_str()) {
                bad.push(format!("{path} (unexpected)"));
            }
        }
        if bad.is_empty() {
            return Ok(());
        }
        let total = bad.len();
        bad.truncate(MAX_REPORTED);
        Err(Error::WeightMismatch {
            arch: spec.name.to_string(),
            paths: bad,
            total,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 4 * self.numel());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        put_str(&mut out, &self.architecture);
        put_str(&mut out, self.provenance.as_str());
        put_u64(&mut out, self.tensors.len() as u64);
        for (path, t) in &self.tensors {
            put_str(&mut out, path);
            put_u64(&mut out, t.shape().len() as u64);
            for &d in t.shape() {
                put_u64(&mut out, d as u64);
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::WeightFormat("bad magic, not an OPWT file".into()));
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(Error::WeightFormat(format!("unsupported version {version}")));
        }
        let architecture = r.string()?;
        let provenance = r.string()?.parse()?;
        let count = r.u64()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let path = r.string()?;
            let rank = r.u64()? as usize;
            if rank > 8 {
                return Err(Error::WeightFormat(format!("{path}: rank {rank} too large")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::WeightFormat(format!("{path}: truncated data")))?;
            let raw = r.take(numel * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(shape, data)?;
            if tensors.insert(path.clone(), t).is_some() {
                return Err(Error::WeightFormat(format!("duplicate path {path}")));
            }
        }
        if r.remaining() != 0 {
            return Err(Error::WeightFormat(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self {
            architecture,
            provenance,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(Error::io(path))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u64(out, s.len() as u64);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::WeightFormat(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u64()?;
        if n > self.remaining() as u64 {
            return Err(Error::WeightFormat(format!("truncated at byte {}", self.pos)));
        }
        let b = self.take(n as usize)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::WeightFormat("path is not UTF-8".into()))
    }
}
