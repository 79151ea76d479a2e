//! NGC1 tensor container.
//!
//! Layout: magic `NGC1`, an 8-byte little-endian header length, a UTF-8
//! JSON header (kind, optional arch descriptor, metadata, ordered tensor
//! directory with byte offsets), then raw little-endian f32 payloads,
//! row-major, at the recorded offsets relative to the payload start.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use adkernel::Tensor;
use serde::{Deserialize, Serialize};

use crate::fields::ArchDescriptor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NGC1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    arch: Option<ArchDescriptor>,
    #[serde(default)]
    metadata: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// An NGC1 container in memory. Tensor order is preserved exactly.
#[derive(Debug, Clone)]
pub struct Container {
    pub kind: String,
    pub arch: Option<ArchDescriptor>,
    pub metadata: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Container {
    pub fn new(kind: &str) -> Self {
        Self { kind: kind.to_string(), arch: None, metadata: serde_json::Value::Null, tensors: Vec::new() }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        }
        let mut offset = 0u64;
        let entries: Vec<TensorEntry> = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset };
                offset += (t.numel() * 4) as u64;
                e
            })
            .collect();
        let header = Header {
            kind: self.kind.clone(),
            arch: self.arch.clone(),
            metadata: self.metadata.clone(),
            tensors: entries,
        };
        let header_bytes = serde_json::to_vec(&header)?;
        let mut w = BufWriter::new(File::create(path).map_err(Error::io(path))?);
        w.write_all(MAGIC).map_err(Error::io(path))?;
        w.write_all(&(header_bytes.len() as u64).to_le_bytes()).map_err(Error::io(path))?;
        w.write_all(&header_bytes).map_err(Error::io(path))?;
        let mut buf = Vec::with_capacity(64 * 1024);
        for (_, t) in &self.tensors {
            buf.clear();
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf).map_err(Error::io(path))?;
        }
        w.flush().map_err(Error::io(path))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path).map_err(Error::io(path))?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(Error::io(path))?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("{}: bad magic {:?}", path.display(), magic)));
        }
        let mut len_bytes = [0u8; 8];
        r.read_exact(&mut len_bytes).map_err(Error::io(path))?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let mut header_bytes = vec![0u8; header_len];
        r.read_exact(&mut header_bytes).map_err(Error::io(path))?;
        let header: Header = serde_json::from_slice(&header_bytes)?;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload).map_err(Error::io(path))?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let numel: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + numel * 4;
            if end > payload.len() {
                return Err(Error::Format(format!(
                    "{}: tensor {} overruns payload ({} > {})",
                    path.display(),
                    e.name,
                    end,
                    payload.len()
                )));
            }
            let data: Vec<f32> =
                payload[start..end].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push((e.name.clone(), Tensor::from_vec(data, &e.shape).map_err(adkernel::KernelError::from)?));
        }
        Ok(Self { kind: header.kind, arch: header.arch, metadata: header.metadata, tensors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_container_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ngc");
        let mut c = Container::new("GMN");
        c.metadata = serde_json::json!({"note": "x", "n": 3});
        c.tensors.push(("a".into(), Tensor::from_vec(vec![1.0f32, -2.5, 3.25], &[1, 3]).unwrap()));
        c.tensors.push(("b.w".into(), Tensor::from_vec(vec![0.1f32; 6], &[2, 3]).unwrap()));
        c.write(&path).unwrap();
        let back = Container::read(&path).unwrap();
        assert_eq!(back.kind, "GMN");
        assert_eq!(back.tensors.len(), 2);
        assert_eq!(back.tensors[0].0, "a");
        assert_eq!(back.tensors[0].1.data(), c.tensors[0].1.data());
        assert_eq!(back.tensors[1].1.shape(), &[2, 3]);
        assert_eq!(back.metadata["n"], 3);
    }

    #[test]
    fn test_bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ngc");
        std::fs::write(&path, b"NOPE00000000").unwrap();
        assert!(matches!(Container::read(&path), Err(Error::Format(_))));
    }
}
