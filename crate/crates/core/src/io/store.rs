//! Binary weight container.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "SPLW" | version u8 (= 1)
//! per entry:
//!   u16 name length | UTF-8 name
//!   u8 dtype (0 = f32, 1 = i8, 2 = i32) | u8 rank | rank × u32 dims
//!   i8 only: u8 granularity (0 = per tensor, 1 = per channel)
//!            f32 × (1 or dims[0]) scales | i32 zero point
//!   raw element data
//! u32 CRC-32 of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{dequantize, DenseTensor, Granularity, QuantizedTensor};

pub const MAGIC: &[u8; 4] = b"SPLW";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    F32(DenseTensor),
    I8(QuantizedTensor),
    I32 { shape: Vec<usize>, data: Vec<i32> },
}

impl StoredTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::I8(q) => &q.shape,
            StoredTensor::I32 { shape, .. } => shape,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape().iter().product()
    }

    fn dtype(&self) -> u8 {
        match self {
            StoredTensor::F32(_) => 0,
            StoredTensor::I8(_) => 1,
            StoredTensor::I32 { .. } => 2,
        }
    }
}

/// Named tensors in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    entries: BTreeMap<String, StoredTensor>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: StoredTensor) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn insert_f32(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        let t = DenseTensor::new(shape, data)?;
        self.insert(name, StoredTensor::F32(t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<StoredTensor> {
        self.entries.remove(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &StoredTensor)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Total element count over all tensors.
    pub fn num_parameters(&self) -> usize {
        self.entries.values().map(StoredTensor::numel).sum()
    }

    pub fn has_int8(&self) -> bool {
        self.entries.values().any(|t| matches!(t, StoredTensor::I8(_)))
    }

    /// Tensor as `f32`, dequantizing int8 entries.
    pub fn f32(&self, name: &str) -> Result<DenseTensor> {
        match self.entries.get(name) {
            None => Err(Error::MissingParameter(name.to_string())),
            Some(StoredTensor::F32(t)) => Ok(t.clone()),
            Some(StoredTensor::I8(q)) => Ok(dequantize(q)),
            Some(StoredTensor::I32 { shape, data }) => {
                DenseTensor::new(shape.clone(), data.iter().map(|&v| v as f32).collect())
            }
        }
    }

    /// Like [`WeightStore::f32`] but also checks the shape.
    pub fn f32_shaped(&self, name: &str, shape: &[usize]) -> Result<DenseTensor> {
        let t = self.f32(name)?;
        if t.shape() != shape {
            return Err(Error::ParameterShape {
                name: name.to_string(),
                expected: shape.to_vec(),
                actual: t.shape().to_vec(),
            });
        }
        Ok(t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(16 + self.num_parameters() * 4);
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        for (name, t) in &self.entries {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::invalid(format!("parameter name too long: {name}")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype());
            let shape = t.shape();
            out.push(
                u8::try_from(shape.len())
                    .map_err(|_| Error::invalid(format!("rank too large for {name}")))?,
            );
            for &d in shape {
                let d = u32::try_from(d).map_err(|_| Error::invalid(format!("extent too large for {name}")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            match t {
                StoredTensor::F32(t) => {
                    for v in t.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                StoredTensor::I8(q) => {
                    out.push(match q.granularity {
                        Granularity::PerTensor => 0,
                        Granularity::PerChannel => 1,
                    });
                    for s in &q.scales {
                        out.extend_from_slice(&s.to_le_bytes());
                    }
                    out.extend_from_slice(&q.zero_point.to_le_bytes());
                    out.extend(q.data.iter().map(|&v| v as u8));
                }
                StoredTensor::I32 { data, .. } => {
                    for v in data {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes.len() < 5 {
            return Err(Error::Truncated("header"));
        }
        if bytes[4] != VERSION {
            return Err(Error::UnsupportedVersion(bytes[4]));
        }
        if bytes.len() < 9 {
            return Err(Error::Truncated("checksum"));
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::ChecksumMismatch { stored, computed });
        }

        let mut r = Reader { buf: body, pos: 5 };
        let mut store = WeightStore::new();
        while r.pos < body.len() {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| Error::Malformed("parameter name is not UTF-8".into()))?
                .to_string();
            let dtype = r.u8()?;
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let tensor = match dtype {
                0 => {
                    let raw = r.take(n * 4, "f32 data")?;
                    let data = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    StoredTensor::F32(DenseTensor::new(shape, data)?)
                }
                1 => {
                    let granularity = match r.u8()? {
                        0 => Granularity::PerTensor,
                        1 => Granularity::PerChannel,
                        g => return Err(Error::Malformed(format!("granularity flag {g}"))),
                    };
                    let groups = match granularity {
                        Granularity::PerTensor => 1,
                        Granularity::PerChannel => shape.first().copied().unwrap_or(1),
                    };
                    let scales = (0..groups)
                        .map(|_| r.u32().map(f32::from_bits))
                        .collect::<Result<Vec<_>>>()?;
                    let zero_point = r.u32()? as i32;
                    let data = r.take(n, "i8 data")?.iter().map(|&b| b as i8).collect();
                    StoredTensor::I8(
                        QuantizedTensor::new(shape, data, granularity, scales, zero_point)
                            .map_err(|e| Error::Malformed(format!("{name}: {e}")))?,
                    )
                }
                2 => {
                    let raw = r.take(n * 4, "i32 data")?;
                    let data = raw
                        .chunks_exact(4)
                        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    StoredTensor::I32 { shape, data }
                }
                d => return Err(Error::Malformed(format!("unknown dtype {d} for {name}"))),
            };
            if store.entries.insert(name.clone(), tensor).is_some() {
                return Err(Error::Malformed(format!("duplicate parameter {name}")));
            }
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated(what))?;
        if end > self.buf.len() {
            return Err(Error::Truncated(what));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1, "header field")?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, "header field")?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, "header field")?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::quantize_affine;

    #[test]
    fn empty_store_round_trips() {
        let s = WeightStore::new();
        let bytes = s.to_bytes().unwrap();
        assert_eq!(&bytes[..5], b"SPLW\x01");
        assert_eq!(bytes.len(), 9);
        assert_eq!(WeightStore::from_bytes(&bytes).unwrap(), s);
    }

    #[test]
    fn single_f32_entry_layout() {
        let mut s = WeightStore::new();
        s.insert_f32("a.weight", vec![2], vec![1.5, -0.0]).unwrap();
        let bytes = s.to_bytes().unwrap();
        let mut expect = b"SPLW\x01".to_vec();
        expect.extend_from_slice(&8u16.to_le_bytes());
        expect.extend_from_slice(b"a.weight");
        expect.extend_from_slice(&[0, 1]);
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&1.5f32.to_le_bytes());
        expect.extend_from_slice(&(-0.0f32).to_le_bytes());
        let crc = crc32fast::hash(&expect);
        expect.extend_from_slice(&crc.to_le_bytes());
        assert_eq!(bytes, expect);
        let back = WeightStore::from_bytes(&bytes).unwrap();
        let StoredTensor::F32(t) = back.get("a.weight").unwrap() else { panic!() };
        assert_eq!(t.data()[1].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn crc_matches_reference_value() {
        assert_eq!(crc32fast::hash(b"123456789"), 0xCBF4_3926);
    }

    #[test]
    fn quantized_entry_round_trips() {
        let mut s = WeightStore::new();
        let t = DenseTensor::new(vec![2, 3], vec![0.1, -0.2, 0.3, 4.0, 5.0, -6.0]).unwrap();
        s.insert("q", StoredTensor::I8(quantize_affine(&t, Granularity::PerChannel).unwrap()));
        s.insert("i", StoredTensor::I32 { shape: vec![3], data: vec![-1, 0, i32::MAX] });
        let back = WeightStore::from_bytes(&s.to_bytes().unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn header_errors_are_distinct() {
        let mut s = WeightStore::new();
        s.insert_f32("x", vec![1], vec![1.0]).unwrap();
        let bytes = s.to_bytes().unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(WeightStore::from_bytes(&bad), Err(Error::BadMagic)));

        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(WeightStore::from_bytes(&bad), Err(Error::UnsupportedVersion(2))));

        let mut bad = bytes.clone();
        let last = bad.len() - 6;
        bad[last] ^= 0x10;
        assert!(matches!(WeightStore::from_bytes(&bad), Err(Error::ChecksumMismatch { .. })));
    }

    #[test]
    fn missing_and_misshapen_parameters_are_named() {
        let mut s = WeightStore::new();
        s.insert_f32("w", vec![2, 2], vec![0.0; 4]).unwrap();
        match s.f32("nope") {
            Err(Error::MissingParameter(n)) => assert_eq!(n, "nope"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(s.f32_shaped("w", &[4]), Err(Error::ParameterShape { .. })));
    }
}
