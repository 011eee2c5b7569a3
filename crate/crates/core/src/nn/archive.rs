//! Portable tensor archive, used for model checkpoints and cached
//! membership maps.
//!
//! Layout: a UTF-8 manifest followed by a little-endian payload.
//!
//! ```text
//! fcce-tensors 1
//! meta <key> <value...>
//! tensor <name> <f32|f64> <d0,d1,...|-> <byte offset> <byte length>
//! end
//! <payload bytes>
//! ```
//!
//! Offsets are relative to the first payload byte. Reading a file back
//! yields bit-identical values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::tensor::{Real, Tensor};

const MAGIC: &str = "fcce-tensors 1";

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    fn dtype(&self) -> &'static str {
        match self {
            TensorData::F32(_) => "f32",
            TensorData::F64(_) => "f64",
        }
    }

    fn byte_len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len() * 4,
            TensorData::F64(v) => v.len() * 8,
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl ArchiveEntry {
    /// Converts to an engine tensor. `f32` entries load exactly into either
    /// precision.
    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        let data = match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| T::from_f64(x as f64)).collect(),
            TensorData::F64(v) => v.iter().map(|&x| T::from_f64(x)).collect(),
        };
        Tensor::new(&self.shape, data)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    pub meta: Vec<(String, String)>,
    pub entries: Vec<ArchiveEntry>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<String>) {
        let value = value.into();
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn push_f32(&mut self, name: &str, shape: &[usize], data: Vec<f32>) {
        self.entries.push(ArchiveEntry { name: name.into(), shape: shape.to_vec(), data: TensorData::F32(data) });
    }

    pub fn push_f64(&mut self, name: &str, shape: &[usize], data: Vec<f64>) {
        self.entries.push(ArchiveEntry { name: name.into(), shape: shape.to_vec(), data: TensorData::F64(data) });
    }

    pub fn get(&self, name: &str) -> Option<&ArchiveEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = String::from(MAGIC);
        header.push('\n');
        for (k, v) in &self.meta {
            if k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(Error::invalid(format!("meta entry `{k}` cannot be encoded")));
            }
            header.push_str(&format!("meta {k} {v}\n"));
        }
        let mut offset = 0usize;
        for e in &self.entries {
            if e.name.is_empty() || e.name.contains(char::is_whitespace) {
                return Err(Error::invalid(format!("tensor name `{}` cannot be encoded", e.name)));
            }
            if e.shape.iter().product::<usize>() != e.data.len() {
                return Err(Error::Checkpoint { tensor: e.name.clone(), message: "shape does not match data".into() });
            }
            let shape = if e.shape.is_empty() {
                "-".to_string()
            } else {
                e.shape.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
            };
            header.push_str(&format!("tensor {} {} {} {} {}\n", e.name, e.data.dtype(), shape, offset, e.data.byte_len()));
            offset += e.data.byte_len();
        }
        header.push_str("end\n");

        let mut out = header.into_bytes();
        out.reserve(offset);
        for e in &self.entries {
            match &e.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let next_line = |pos: &mut usize| -> Result<(usize, String)> {
            let start = *pos;
            let rel = bytes[start..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::Parse { offset: start, message: "unterminated manifest line".into() })?;
            *pos = start + rel + 1;
            let line = std::str::from_utf8(&bytes[start..start + rel])
                .map_err(|_| Error::Parse { offset: start, message: "manifest is not UTF-8".into() })?;
            Ok((start, line.to_string()))
        };

        let (off, magic) = next_line(&mut pos)?;
        if magic != MAGIC {
            return Err(Error::Parse { offset: off, message: format!("bad magic `{magic}`") });
        }
        let mut archive = TensorArchive::new();
        let mut layout = Vec::new();
        loop {
            let (off, line) = next_line(&mut pos)?;
            if line == "end" {
                break;
            }
            let bad = |m: &str| Error::Parse { offset: off, message: format!("{m}: `{line}`") };
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                archive.meta.push((k.to_string(), v.to_string()));
                continue;
            }
            let fields: Vec<&str> = line.split(' ').collect();
            if fields.len() != 6 || fields[0] != "tensor" {
                return Err(bad("malformed manifest line"));
            }
            let shape: Vec<usize> = if fields[3] == "-" {
                Vec::new()
            } else {
                fields[3].split(',').map(str::parse).collect::<Result<_, _>>().map_err(|_| bad("bad shape"))?
            };
            let offset: usize = fields[4].parse().map_err(|_| bad("bad offset"))?;
            let len: usize = fields[5].parse().map_err(|_| bad("bad length"))?;
            let width = match fields[2] {
                "f32" => 4,
                "f64" => 8,
                _ => return Err(bad("unknown dtype")),
            };
            if shape.iter().product::<usize>() * width != len {
                return Err(bad("length does not match shape"));
            }
            layout.push((fields[1].to_string(), fields[2] == "f64", shape, offset, len));
        }

        let payload = &bytes[pos..];
        for (name, is_f64, shape, offset, len) in layout {
            let chunk = payload.get(offset..offset + len).ok_or_else(|| Error::Checkpoint {
                tensor: name.clone(),
                message: format!("payload truncated (needs bytes {offset}..{})", offset + len),
            })?;
            let data = if is_f64 {
                TensorData::F64(chunk.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
            } else {
                TensorData::F32(chunk.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
            };
            archive.entries.push(ArchiveEntry { name, shape, data });
        }
        Ok(archive)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
