//! Named weight arrays, their initialization, and the VWTS container.
//!
//! VWTS layout (all integers little-endian):
//!
//! ```text
//! "VWTS" | version u8 = 1 | count u32
//! per entry: key_len u16 | key utf-8 | ndim u8 | extents u32 × ndim | f64 × Π extents
//! ```
//!
//! Entries are written in key order.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::ssm;

pub const VWTS_MAGIC: &[u8; 4] = b"VWTS";
pub const VWTS_VERSION: u8 = 1;

/// Standard deviation of the truncated-normal initializer.
pub const INIT_SIGMA: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "tensor shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

pub type WeightMap = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Normal,
    Zeros,
    Ones,
    /// `ln(1..=N)` along the last axis.
    ALog,
    /// Softplus-inverse of a log-uniform sample in `[1e-3, 1e-1]`.
    DeltaBias,
}

/// Shape and initializer of one named array.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub key: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(key: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            key: key.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn sample(&self, rng: &mut SplitMix64) -> Tensor {
        let n = self.numel();
        let data = match self.init {
            Init::Normal => (0..n).map(|_| rng.truncated_normal(INIT_SIGMA)).collect(),
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::ALog => {
                let s = *self.shape.last().unwrap();
                ssm::a_log_init(n / s, s)
            }
            Init::DeltaBias => ssm::delta_bias_init(n, rng),
        };
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }
}

/// Draws every array in `specs` order from one stream.
pub fn init_weights(specs: &[ParamSpec], rng: &mut SplitMix64) -> WeightMap {
    specs
        .iter()
        .map(|s| (s.key.clone(), s.sample(rng)))
        .collect()
}

/// Checks `weights` against `specs`: no unknown keys, matching shapes,
/// nothing missing, all values finite.
pub fn validate_weights(weights: &WeightMap, specs: &[ParamSpec]) -> Result<()> {
    let by_key: HashMap<&str, &ParamSpec> = specs.iter().map(|s| (s.key.as_str(), s)).collect();
    for (key, t) in weights {
        let spec = by_key
            .get(key.as_str())
            .ok_or_else(|| Error::UnknownKey(key.clone()))?;
        if spec.shape != t.shape {
            return Err(Error::WeightShape {
                key: key.clone(),
                expected: spec.shape.clone(),
                found: t.shape.clone(),
            });
        }
        if let Some(bad) = t.data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("weight `{key}` holds {bad}")));
        }
    }
    let missing: Vec<String> = specs
        .iter()
        .filter(|s| !weights.contains_key(&s.key))
        .map(|s| s.key.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Incomplete(missing));
    }
    Ok(())
}

pub fn weights_to_bytes(weights: &WeightMap) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(VWTS_MAGIC);
    out.push(VWTS_VERSION);
    out.extend_from_slice(&(weights.len() as u32).to_le_bytes());
    for (key, t) in weights {
        out.extend_from_slice(&(key.len() as u16).to_le_bytes());
        out.extend_from_slice(key.as_bytes());
        out.push(t.shape.len() as u8);
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Truncation {
                expected: n,
                found: self.bytes.len() - self.pos,
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses a VWTS byte stream without checking it against any architecture.
pub fn weights_from_bytes(bytes: &[u8]) -> Result<WeightMap> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| Error::Format("file too short for VWTS header".into()))? != VWTS_MAGIC {
        return Err(Error::Format("bad magic, expected VWTS".into()));
    }
    let version = r.u8()?;
    if version != VWTS_VERSION {
        return Err(Error::Format(format!("unsupported VWTS version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = WeightMap::new();
    for _ in 0..count {
        let klen = r.u16()? as usize;
        let key = std::str::from_utf8(r.take(klen)?)
            .map_err(|_| Error::Format("weight key is not valid UTF-8".into()))?
            .to_string();
        let ndim = r.u8()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let Some(n) = n.filter(|&n| n <= (bytes.len() - r.pos) / 8) else {
            return Err(Error::Truncation {
                expected: shape.iter().product::<usize>(),
                found: (bytes.len() - r.pos) / 8,
            });
        };
        let data = r
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if out.insert(key.clone(), Tensor { shape, data }).is_some() {
            return Err(Error::Format(format!("duplicate weight key `{key}`")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after last entry", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn write_weights(weights: &WeightMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, weights_to_bytes(weights)).map_err(|e| Error::io(path, e))
}

pub fn read_weights(path: impl AsRef<Path>) -> Result<WeightMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    weights_from_bytes(&bytes)
}

/// Places weights on a tape on first use, so gradients come back keyed by
/// the same names.
pub struct Binder<'w> {
    weights: &'w WeightMap,
    bound: HashMap<String, Var>,
}

impl<'w> Binder<'w> {
    pub fn new(weights: &'w WeightMap) -> Self {
        Self {
            weights,
            bound: HashMap::new(),
        }
    }

    pub fn var(&mut self, tape: &mut Tape, key: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(key) {
            return Ok(v);
        }
        let t = self
            .weights
            .get(key)
            .ok_or_else(|| Error::Incomplete(vec![key.to_string()]))?;
        let v = tape.param(key, &t.shape, t.data.clone());
        self.bound.insert(key.to_string(), v);
        Ok(v)
    }

    pub fn tensor(&self, key: &str) -> Result<&'w Tensor> {
        self.weights
            .get(key)
            .ok_or_else(|| Error::Incomplete(vec![key.to_string()]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> WeightMap {
        let mut m = WeightMap::new();
        m.insert("b.bias".into(), Tensor::new(&[2], vec![0.5, -1.0]).unwrap());
        m.insert("a.weight".into(), Tensor::new(&[2, 3], (0..6).map(|i| i as f64 * 0.1).collect()).unwrap());
        m
    }

    #[test]
    fn byte_round_trip_is_identical() {
        let bytes = weights_to_bytes(&sample());
        let back = weights_from_bytes(&bytes).unwrap();
        assert_eq!(back, sample());
        assert_eq!(weights_to_bytes(&back), bytes);
    }

    #[test]
    fn header_layout() {
        let bytes = weights_to_bytes(&sample());
        assert_eq!(&bytes[..4], b"VWTS");
        assert_eq!(bytes[4], 1);
        assert_eq!(u32::from_le_bytes(bytes[5..9].try_into().unwrap()), 2);
        // first key in sorted order
        assert_eq!(u16::from_le_bytes(bytes[9..11].try_into().unwrap()), 8);
        assert_eq!(&bytes[11..19], b"a.weight");
        assert_eq!(bytes[19], 2);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut bytes = weights_to_bytes(&sample());
        assert!(matches!(weights_from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Truncation { .. })));
        bytes[0] = b'X';
        assert!(matches!(weights_from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn validation_errors() {
        let specs = vec![
            ParamSpec::new("a.weight", &[2, 3], Init::Normal),
            ParamSpec::new("b.bias", &[2], Init::Zeros),
            ParamSpec::new("c.bias", &[4], Init::Zeros),
        ];
        match validate_weights(&sample(), &specs) {
            Err(Error::Incomplete(m)) => assert_eq!(m, vec!["c.bias".to_string()]),
            other => panic!("{other:?}"),
        }
        let mut w = sample();
        w.get_mut("a.weight").unwrap().shape = vec![3, 2];
        match validate_weights(&w, &specs) {
            Err(Error::WeightShape { key, .. }) => assert_eq!(key, "a.weight"),
            other => panic!("{other:?}"),
        }
        let mut w = sample();
        w.insert("zzz".into(), Tensor::zeros(&[1]));
        assert!(matches!(validate_weights(&w, &specs[..2]), Err(Error::UnknownKey(_))));
    }

    #[test]
    fn initializers() {
        let mut rng = SplitMix64::new(9);
        let t = ParamSpec::new("a", &[2, 3], Init::ALog).sample(&mut rng);
        assert_eq!(t.data[..3], [0.0, 2f64.ln(), 3f64.ln()]);
        let t = ParamSpec::new("d", &[50], Init::DeltaBias).sample(&mut rng);
        for v in t.data {
            let d = ssm::softplus(v);
            assert!((1e-3 * (1.0 - 1e-12)..=1e-1 * (1.0 + 1e-12)).contains(&d));
        }
        let t = ParamSpec::new("w", &[1000], Init::Normal).sample(&mut rng);
        assert!(t.data.iter().all(|v| v.abs() <= 2.0 * INIT_SIGMA));
    }
}
