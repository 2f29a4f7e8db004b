use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ModelGraph, Tensor};

pub const ARCHIVE_MAGIC: &[u8; 4] = b"RGBN";
pub const ARCHIVE_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct ArchivedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Ordered, uniquely named f32 tensors.
///
/// Wire format, little-endian, unpadded: `"RGBN"`, version `u32`, count
/// `u32`, then per tensor `u16` name length, UTF-8 name, `u8` rank, rank
/// `u32` dims, `u8` dtype (0 = f32) and the raw data.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightArchive {
    tensors: Vec<ArchivedTensor>,
}

impl WeightArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::Format(format!("duplicate tensor name `{name}`")));
        }
        if name.len() > u16::MAX as usize || shape.len() > u8::MAX as usize {
            return Err(Error::Format(format!("tensor `{name}` header does not fit the format")));
        }
        if shape.iter().product::<usize>() != data.len() || shape.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::Format(format!(
                "tensor `{name}`: shape {shape:?} does not match {} values",
                data.len()
            )));
        }
        self.tensors.push(ArchivedTensor { name, shape, data });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensors(&self) -> &[ArchivedTensor] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&ArchivedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArchivedTensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.tensors.iter().map(|t| 16 + 4 * t.data.len()).sum::<usize>());
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.push(DTYPE_F32);
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != ARCHIVE_MAGIC {
            return Err(Error::Format("bad magic, not a weight archive".into()));
        }
        let version = r.u32()?;
        if version != ARCHIVE_VERSION {
            return Err(Error::Format(format!("unsupported archive version {version}")));
        }
        let count = r.u32()?;
        let mut archive = WeightArchive::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_owned();
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let dtype = r.u8()?;
            if dtype != DTYPE_F32 {
                return Err(Error::Format(format!("tensor `{name}`: unknown dtype {dtype}")));
            }
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n
                .filter(|n| n.checked_mul(4).is_some_and(|b| b <= bytes.len()))
                .ok_or_else(|| Error::Format(format!("tensor `{name}` is truncated")))?;
            let raw = r.take(4 * n)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                .collect();
            archive.push(name, shape, data)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after archive", bytes.len() - r.pos)));
        }
        Ok(archive)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Snapshot of every model parameter, narrowed to f32.
    pub fn from_model(model: &ModelGraph) -> Self {
        let mut a = WeightArchive::new();
        for (name, t) in model.parameters() {
            let data = t.data().iter().map(|&v| v as f32).collect();
            a.push(name, t.shape().to_vec(), data)
                .expect("model parameter names are unique");
        }
        a
    }

    /// Copies every tensor into the model's parameter of the same name.
    /// The archive and the model must hold exactly the same names and shapes.
    pub fn load_into(&self, model: &mut ModelGraph) -> Result<()> {
        let wanted: HashSet<String> = model.parameters().into_iter().map(|(n, _)| n).collect();
        if let Some(extra) = self.tensors.iter().find(|t| !wanted.contains(&t.name)) {
            return Err(Error::Format(format!("archive tensor `{}` has no model parameter", extra.name)));
        }
        for (name, p) in model.parameters_mut() {
            let t = self
                .get(&name)
                .ok_or_else(|| Error::Format(format!("archive lacks parameter `{name}`")))?;
            if t.shape != p.shape() {
                return Err(Error::Shape(format!(
                    "parameter `{name}`: archive shape {:?}, model shape {:?}",
                    t.shape,
                    p.shape()
                )));
            }
            for (dst, &src) in p.data_mut().iter_mut().zip(&t.data) {
                *dst = f64::from(src);
            }
            p.clear_grad();
        }
        Ok(())
    }
}

impl ArchivedTensor {
    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| f64::from(v)).collect())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("archive truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_tensor() -> WeightArchive {
        let mut a = WeightArchive::new();
        a.push("conv.weight", vec![2, 1, 1, 1], vec![0.5, -1.25]).unwrap();
        a.push("conv.bias", vec![2], vec![f32::MIN_POSITIVE, 3.0e7]).unwrap();
        a
    }

    #[test]
    fn round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.rgbn");
        two_tensor().save(&p).unwrap();
        assert_eq!(WeightArchive::load(&p).unwrap(), two_tensor());
    }

    #[test]
    fn empty_archive_is_a_12_byte_header() {
        let bytes = WeightArchive::new().to_bytes();
        let mut expected = b"RGBN".to_vec();
        expected.extend(1u32.to_le_bytes());
        expected.extend(0u32.to_le_bytes());
        assert_eq!(bytes, expected);
        assert!(WeightArchive::from_bytes(&bytes).unwrap().is_empty());
    }

    #[test]
    fn hand_encoded_layout() {
        let mut a = WeightArchive::new();
        a.push("w", vec![1], vec![1.0]).unwrap();
        let mut expected = b"RGBN".to_vec();
        expected.extend([1, 0, 0, 0, 1, 0, 0, 0]);
        expected.extend([1, 0, b'w', 1, 1, 0, 0, 0, 0]);
        expected.extend(1.0f32.to_le_bytes());
        assert_eq!(a.to_bytes(), expected);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let mut bytes = two_tensor().to_bytes();
        for cut in [3, 11, 20, bytes.len() - 1] {
            assert!(matches!(WeightArchive::from_bytes(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(WeightArchive::from_bytes(&trailing).is_err());
        bytes[0] = b'X';
        assert!(matches!(WeightArchive::from_bytes(&bytes), Err(Error::Format(_))));

        let mut dup = WeightArchive::new();
        dup.push("a", vec![1], vec![0.0]).unwrap();
        let mut bytes = dup.to_bytes();
        bytes[8] = 2;
        bytes.extend_from_slice(&dup.to_bytes()[12..]);
        assert!(matches!(WeightArchive::from_bytes(&bytes), Err(Error::Format(_))));
        assert!(dup.push("a", vec![1], vec![0.0]).is_err());
    }

    #[test]
    fn absurd_dimensions_do_not_allocate() {
        let mut bytes = b"RGBN".to_vec();
        bytes.extend([1, 0, 0, 0, 1, 0, 0, 0, 1, 0, b'w', 2]);
        bytes.extend(u32::MAX.to_le_bytes());
        bytes.extend(u32::MAX.to_le_bytes());
        bytes.push(0);
        assert!(matches!(WeightArchive::from_bytes(&bytes), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn save_load_identity(
            tensors in prop::collection::vec(
                (prop::collection::vec(1usize..4, 0..4), any::<u32>()),
                0..6,
            )
        ) {
            let mut a = WeightArchive::new();
            for (i, (shape, seed)) in tensors.iter().enumerate() {
                let n: usize = shape.iter().product();
                // arbitrary bit patterns, NaN payloads included
                let data = (0..n).map(|j| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(j as u32))).collect();
                a.push(format!("t{i}.weight"), shape.clone(), data).unwrap();
            }
            let back = WeightArchive::from_bytes(&a.to_bytes()).unwrap();
            prop_assert_eq!(back.to_bytes(), a.to_bytes());
            prop_assert_eq!(back.len(), a.len());
        }
    }
}
