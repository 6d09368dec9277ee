use std::collections::HashMap;

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    BnScale,
    BnShift,
    /// Batch-norm running mean or variance; updated by momentum, not by SGD.
    RunningStat,
}

impl ParamKind {
    fn code(self) -> u8 {
        match self {
            ParamKind::Weight => 0,
            ParamKind::Bias => 1,
            ParamKind::BnScale => 2,
            ParamKind::BnShift => 3,
            ParamKind::RunningStat => 4,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => ParamKind::Weight,
            1 => ParamKind::Bias,
            2 => ParamKind::BnScale,
            3 => ParamKind::BnShift,
            4 => ParamKind::RunningStat,
            _ => return Err(Error::Format(format!("unknown parameter kind {c}"))),
        })
    }

    pub fn trainable(self) -> bool {
        self != ParamKind::RunningStat
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Named parameters in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    lookup: HashMap<String, usize>,
}

const MAGIC: &[u8; 4] = b"NFPS";
const VERSION: u32 = 1;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> Result<usize> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(Error::InvalidParams(format!("duplicate parameter `{name}`")));
        }
        let id = self.entries.len();
        self.lookup.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, kind, value });
        Ok(id)
    }

    /// Uniform `±1/√fan_in` weight of shape `(fan_in, fan_out)` and bias.
    pub fn add_dense<R: Rng>(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Result<()> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..=bound)).collect();
        let b = (0..fan_out).map(|_| rng.random_range(-bound..=bound)).collect();
        self.add(format!("{name}.w"), ParamKind::Weight, Tensor::matrix(fan_in, fan_out, w)?)?;
        self.add(format!("{name}.b"), ParamKind::Bias, Tensor::new(vec![fan_out], b)?)?;
        Ok(())
    }

    pub fn add_batch_norm(&mut self, name: &str, dim: usize) -> Result<()> {
        self.add(format!("{name}.gamma"), ParamKind::BnScale, Tensor::filled(&[dim], 1.0))?;
        self.add(format!("{name}.beta"), ParamKind::BnShift, Tensor::zeros(&[dim]))?;
        self.add(format!("{name}.mean"), ParamKind::RunningStat, Tensor::zeros(&[dim]))?;
        self.add(format!("{name}.var"), ParamKind::RunningStat, Tensor::filled(&[dim], 1.0))?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.lookup.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.entries[i].value)
    }

    pub fn value(&self, id: usize) -> &Tensor {
        &self.entries[id].value
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.entries[id].value
    }

    pub(crate) fn require(&self, name: &str, layer: &str) -> Result<usize> {
        self.index_of(name).ok_or_else(|| Error::ShapeMismatch { layer: layer.into(), detail: format!("missing parameter `{name}`") })
    }

    /// Total number of scalar values.
    pub fn size(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// `magic "NFPS" | u32 version | u32 count | records`; each record is
    /// `u32 name length | UTF-8 name | u8 kind | u32 rank | u64 dims | f64 values`,
    /// all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.size() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.kind.code());
            out.extend_from_slice(&(e.value.shape.len() as u32).to_le_bytes());
            for &d in &e.value.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &e.value.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses one store and returns it with the number of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad parameter-store magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported parameter-store version {version}")));
        }
        let count = r.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let kind = ParamKind::from_code(r.take(1)?[0])?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            store.add(name, kind, Tensor::new(shape, data)?)?;
        }
        Ok((store, r.pos))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Format("truncated parameter store".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        s.add_dense("fc", 3, 4, &mut rng).unwrap();
        s.add_batch_norm("bn", 4).unwrap();
        let bytes = s.to_bytes();
        let (back, used) = ParamStore::from_bytes(&bytes).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(back, s);
        assert!(ParamStore::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(ParamStore::from_bytes(b"XXXX").is_err());
    }

    #[test]
    fn names_are_unique_and_init_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = ParamStore::new();
        s.add_dense("fc", 16, 8, &mut rng).unwrap();
        assert!(s.add_dense("fc", 2, 2, &mut rng).is_err());
        assert!(s.get("fc.w").unwrap().data.iter().all(|v| v.abs() <= 0.25));
        assert_eq!(s.get("fc.w").unwrap().shape, vec![16, 8]);
    }
}
