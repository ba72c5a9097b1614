//! Named-tensor container shared by backbone, adapter and head files.
//!
//! ```text
//! "LTNS" | u32 version (=1) | u32 metadata length | metadata JSON (UTF-8)
//! then per tensor, sorted by name:
//!   u32 name length | name (UTF-8) | u8 rank | u32 dims[rank] | f32 payload
//! ```
//! All integers and floats are little-endian; payloads are row-major.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{Map, Value};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::io::{read_file, write_atomic};

pub const MAGIC: &[u8; 4] = b"LTNS";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub metadata: Map<String, Value>,
    pub tensors: BTreeMap<String, Tensor>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated container while reading {what}")))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

impl Container {
    pub fn new(metadata: Map<String, Value>) -> Self {
        Self {
            metadata,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    /// Total number of stored floats across all tensors.
    pub fn float_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.metadata).expect("JSON map serialises");
        let payload: usize = self
            .tensors
            .iter()
            .map(|(n, t)| 5 + n.len() + 4 * t.rank() + 4 * t.numel())
            .sum();
        let mut out = Vec::with_capacity(12 + meta.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        for (name, tensor) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(tensor.rank() as u8);
            for &d in tensor.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format("bad magic, expected \"LTNS\"".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported container version {version}, expected {VERSION}"
            )));
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta = r.take(meta_len, "metadata")?;
        let metadata = match serde_json::from_slice::<Value>(meta)? {
            Value::Object(map) => map,
            _ => return Err(Error::Format("metadata is not a JSON object".into())),
        };

        let mut tensors = BTreeMap::new();
        while !r.done() {
            let name_len = r.u32("tensor name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_owned();
            let rank = r.take(1, "tensor rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("tensor dims")? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 4, &name)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let tensor = Tensor::new(shape, data)
                .map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))?;
            if tensors.insert(name.clone(), tensor).is_some() {
                return Err(Error::Format(format!("duplicate tensor `{name}`")));
            }
        }
        Ok(Self { metadata, tensors })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_owned()))
    }

    /// Removes a tensor, checking it against the expected shape.
    pub fn take(&mut self, name: &str, expected: &[usize]) -> Result<Tensor> {
        let tensor = self
            .tensors
            .remove(name)
            .ok_or_else(|| Error::MissingTensor(name.to_owned()))?;
        if tensor.shape() != expected {
            return Err(Error::TensorShape {
                name: name.to_owned(),
                expected: expected.to_vec(),
                found: tensor.shape().to_vec(),
            });
        }
        Ok(tensor)
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Format(format!("metadata field `{key}` missing or not a string")))
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        self.metadata
            .get(key)
            .and_then(Value::as_u64)
            .map(|v| v as usize)
            .ok_or_else(|| Error::Format(format!("metadata field `{key}` missing or not an integer")))
    }

    pub fn meta_f64(&self, key: &str) -> Result<f64> {
        self.metadata
            .get(key)
            .and_then(Value::as_f64)
            .ok_or_else(|| Error::Format(format!("metadata field `{key}` missing or not a number")))
    }

    pub fn expect_format(&self, format: &str) -> Result<()> {
        let found = self.meta_str("format")?;
        if found != format {
            return Err(Error::Format(format!(
                "container format is `{found}`, expected `{format}`"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Container {
        let mut meta = Map::new();
        meta.insert("format".into(), Value::from("test"));
        let mut c = Container::new(meta);
        c.insert("b", Tensor::new([2], vec![1.5, -0.0]).unwrap());
        c.insert("a", Tensor::new([1, 3], vec![f32::NAN, f32::INFINITY, 3.0]).unwrap());
        c
    }

    #[test]
    fn layout_is_bit_exact() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[0..4], b"LTNS");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        assert_eq!(&bytes[12..12 + meta_len], br#"{"format":"test"}"#);
        let rest = &bytes[12 + meta_len..];
        // first tensor is "a" (sorted by name)
        assert_eq!(&rest[0..4], &1u32.to_le_bytes());
        assert_eq!(rest[4], b'a');
        assert_eq!(rest[5], 2);
        assert_eq!(&rest[6..10], &1u32.to_le_bytes());
        assert_eq!(&rest[10..14], &3u32.to_le_bytes());
        assert_eq!(&rest[22..26], &3.0f32.to_le_bytes());
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Container::from_bytes(&bytes), Err(Error::Format(_))));
        let mut bytes = sample().to_bytes();
        bytes[4] = 2;
        let err = Container::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"));
        let bytes = sample().to_bytes();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn take_reports_missing_and_shape() {
        let mut c = sample();
        assert!(matches!(c.take("zzz", &[1]), Err(Error::MissingTensor(n)) if n == "zzz"));
        match c.take("b", &[3]) {
            Err(Error::TensorShape { expected, found, .. }) => {
                assert_eq!(expected, vec![3]);
                assert_eq!(found, vec![2]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(
            tensors in proptest::collection::btree_map(
                "[a-z.]{1,12}",
                (1usize..4, 1usize..5).prop_flat_map(|(r, c)| {
                    proptest::collection::vec(any::<u32>(), r * c)
                        .prop_map(move |bits| (r, c, bits))
                }),
                0..5,
            )
        ) {
            let mut c = Container::default();
            for (name, (r, col, bits)) in &tensors {
                let data = bits.iter().map(|&b| f32::from_bits(b)).collect();
                c.insert(name.clone(), Tensor::new([*r, *col], data).unwrap());
            }
            let bytes = c.to_bytes();
            let back = Container::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            for (name, t) in &c.tensors {
                prop_assert!(back.tensors[name].bitwise_eq(t));
            }
        }
    }
}
