//! SSPB binary tensor format and the multi-tensor container built on it.
//!
//! Single tensor layout (all integers little-endian):
//!
//! ```text
//! "SSPB" | version u8 = 0x01 | dtype u8 | ndim u8 | ndim x u32 dims | payload
//! ```
//!
//! dtype `0x01` is IEEE-754 `f32`, `0x02` is `i32`. The payload is row-major.
//!
//! A container is a text manifest followed by concatenated single-tensor
//! blobs:
//!
//! ```text
//! SSPB-CONTAINER 1
//! <name> <offset> <d0>x<d1>x...
//! ...
//! END
//! <blob bytes>
//! ```
//!
//! Offsets are relative to the first byte after the `END\n` line.

use std::fs;
use std::path::Path;

use crate::error::{Error, FormatError, Result};

pub const MAGIC: [u8; 4] = *b"SSPB";
pub const VERSION: u8 = 0x01;
const CONTAINER_HEADER: &str = "SSPB-CONTAINER 1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    I32,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0x01,
            DType::I32 => 0x02,
        }
    }

    fn from_code(b: u8) -> Result<Self, FormatError> {
        match b {
            0x01 => Ok(DType::F32),
            0x02 => Ok(DType::I32),
            other => Err(FormatError::UnsupportedDtype(other)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I32(Vec<i32>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::I32(_) => DType::I32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<u32>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(dims: Vec<u32>, data: TensorData) -> Result<Self, FormatError> {
        let expected = element_count(&dims);
        if expected != data.len() {
            return Err(FormatError::ShapeMismatch {
                dims,
                expected,
                found: data.len(),
            });
        }
        Ok(Tensor { dims, data })
    }

    pub fn f32(dims: &[usize], data: Vec<f32>) -> Result<Self, FormatError> {
        Tensor::new(dims.iter().map(|&d| d as u32).collect(), TensorData::F32(data))
    }

    pub fn i32(dims: &[usize], data: Vec<i32>) -> Result<Self, FormatError> {
        Tensor::new(dims.iter().map(|&d| d as u32).collect(), TensorData::I32(data))
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn dims_usize(&self) -> Vec<usize> {
        self.dims.iter().map(|&d| d as usize).collect()
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            TensorData::I32(_) => None,
        }
    }

    pub fn as_i32(&self) -> Option<&[i32]> {
        match &self.data {
            TensorData::I32(v) => Some(v),
            TensorData::F32(_) => None,
        }
    }
}

fn element_count(dims: &[u32]) -> usize {
    dims.iter().map(|&d| d as usize).product()
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.dims.len() + 4 * t.data.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(t.dtype().code());
    out.push(t.dims.len() as u8);
    for d in &t.dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    match &t.data {
        TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    out
}

/// Decode one tensor from the start of `bytes`; returns it with the number of bytes used.
pub fn decode_prefix(bytes: &[u8]) -> Result<(Tensor, usize), FormatError> {
    let need = |expected: usize| {
        if bytes.len() < expected {
            Err(FormatError::Truncated {
                expected,
                found: bytes.len(),
            })
        } else {
            Ok(())
        }
    };
    need(4)?;
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    need(7)?;
    if bytes[4] != VERSION {
        return Err(FormatError::UnsupportedVersion(bytes[4]));
    }
    let dtype = DType::from_code(bytes[5])?;
    let ndim = bytes[6] as usize;
    let header = 7 + 4 * ndim;
    need(header)?;
    let dims: Vec<u32> = bytes[7..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let count = element_count(&dims);
    let total = header + 4 * count;
    need(total)?;
    let payload = bytes[header..total].chunks_exact(4);
    let data = match dtype {
        DType::F32 => TensorData::F32(payload.map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
        DType::I32 => TensorData::I32(payload.map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect()),
    };
    Ok((Tensor { dims, data }, total))
}

/// Decode a buffer holding exactly one tensor.
pub fn decode(bytes: &[u8]) -> Result<Tensor, FormatError> {
    let (t, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(FormatError::TrailingBytes(bytes.len() - used));
    }
    Ok(t)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = read_input(path)?;
    decode(&bytes).map_err(|source| Error::FileFormat {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn read_input(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingInput {
                path: path.to_path_buf(),
                reason: "file not found".into(),
            }
        } else {
            Error::io(path, e)
        }
    })
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    sections: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new() -> Self {
        Container::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        assert!(
            !name.is_empty() && !name.contains(char::is_whitespace),
            "section names must be non-empty and whitespace-free"
        );
        self.sections.push((name, t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.sections.iter().map(|(n, _)| n.as_str())
    }

    pub fn encode(&self) -> Vec<u8> {
        let blobs: Vec<Vec<u8>> = self.sections.iter().map(|(_, t)| encode(t)).collect();
        let mut head = String::from(CONTAINER_HEADER);
        head.push('\n');
        let mut offset = 0usize;
        for ((name, t), blob) in self.sections.iter().zip(&blobs) {
            let dims: Vec<String> = t.dims.iter().map(u32::to_string).collect();
            head.push_str(&format!("{name} {offset} {}\n", dims.join("x")));
            offset += blob.len();
        }
        head.push_str("END\n");
        let mut out = head.into_bytes();
        for b in blobs {
            out.extend_from_slice(&b);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        let bad = |m: &str| FormatError::Container(m.to_string());
        let end = find_subslice(bytes, b"\nEND\n").ok_or_else(|| bad("missing END line"))?;
        let text = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("manifest is not utf-8"))?;
        let body = &bytes[end + 5..];
        let mut lines = text.lines();
        if lines.next() != Some(CONTAINER_HEADER) {
            return Err(bad("missing container header"));
        }
        let mut sections = Vec::new();
        let mut expected_offset = 0usize;
        for line in lines {
            let parts: Vec<&str> = line.split(' ').collect();
            let [name, offset, dims] = parts[..] else {
                return Err(bad(&format!("bad section line {line:?}")));
            };
            let offset: usize = offset.parse().map_err(|_| bad(&format!("bad offset in {line:?}")))?;
            if offset != expected_offset || offset > body.len() {
                return Err(bad(&format!("section {name} offset {offset} out of place")));
            }
            let (t, used) = decode_prefix(&body[offset..])?;
            let declared: Vec<String> = t.dims.iter().map(u32::to_string).collect();
            if declared.join("x") != dims {
                return Err(bad(&format!("section {name} declares dims {dims}")));
            }
            expected_offset += used;
            sections.push((name.to_string(), t));
        }
        if expected_offset != body.len() {
            return Err(FormatError::TrailingBytes(body.len() - expected_offset));
        }
        Ok(Container { sections })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = read_input(path)?;
        Container::decode(&bytes).map_err(|source| Error::FileFormat {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn find_subslice(hay: &[u8], needle: &[u8]) -> Option<usize> {
    hay.windows(needle.len()).position(|w| w == needle)
}
