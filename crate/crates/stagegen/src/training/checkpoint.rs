//! Binary checkpoint container: named f32 tensors, optimizer state, a JSON
//! metadata block, and a trailing SHA-256 digest.
//!
//! Layout (little-endian):
//!
//! ```text
//! "SGCK" | version u32 | meta_len u32 | meta JSON |
//! n_tensors u32 | { name_len u32, name, rank u32, dims u64×rank, f32×∏dims }… |
//! n_optim u32   | { name_len u32, name, len u64, first f32×len, second f32×len, step u64 }… |
//! sha256 (32 bytes over everything before it)
//! ```
//!
//! Any byte flip is caught by the digest; truncation is caught by the
//! reader. Saves are atomic (write to a temp sibling, then rename).

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorBlob {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimBlob {
    pub name: String,
    pub first: Vec<f32>,
    pub second: Vec<f32>,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Raw JSON metadata bytes, preserved verbatim across load/save.
    pub meta: Vec<u8>,
    pub tensors: Vec<TensorBlob>,
    pub optim: Vec<OptimBlob>,
}

fn err(detail: impl Into<String>) -> Error {
    Error::Checkpoint(detail.into())
}

impl Checkpoint {
    pub fn new<M: serde::Serialize>(meta: &M) -> Result<Self> {
        Ok(Checkpoint {
            meta: serde_json::to_vec(meta)?,
            tensors: Vec::new(),
            optim: Vec::new(),
        })
    }

    pub fn meta_as<'a, M: serde::Deserialize<'a>>(&'a self) -> Result<M> {
        Ok(serde_json::from_slice(&self.meta)?)
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorBlob> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&u32::try_from(self.meta.len()).map_err(|_| err("meta too large"))?.to_le_bytes());
        out.extend_from_slice(&self.meta);

        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            let expected: u64 = t.dims.iter().product();
            if expected != t.data.len() as u64 {
                return Err(err(format!(
                    "tensor {:?}: {} values but dims {:?}",
                    t.name,
                    t.data.len(),
                    t.dims
                )));
            }
            write_str(&mut out, &t.name)?;
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for &d in &t.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }

        out.extend_from_slice(&(self.optim.len() as u32).to_le_bytes());
        for o in &self.optim {
            if o.first.len() != o.second.len() {
                return Err(err(format!("optim {:?}: moment length mismatch", o.name)));
            }
            write_str(&mut out, &o.name)?;
            out.extend_from_slice(&(o.first.len() as u64).to_le_bytes());
            for &v in &o.first {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for &v in &o.second {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&o.step.to_le_bytes());
        }

        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 32 {
            return Err(err("file shorter than its digest"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        let expected = Sha256::digest(body);
        if digest != expected.as_slice() {
            return Err(err("checksum mismatch: file is corrupt"));
        }

        let mut r = body;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(err(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(err(format!(
                "unsupported version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let meta_len = read_u32(&mut r)? as usize;
        let mut meta = vec![0u8; meta_len];
        read_exact(&mut r, &mut meta)?;

        let n_tensors = read_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let name = read_str(&mut r)?;
            let rank = read_u32(&mut r)? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(read_u64(&mut r)?);
            }
            let count: u64 = dims.iter().product();
            let data = read_f32s(&mut r, count as usize)?;
            tensors.push(TensorBlob { name, dims, data });
        }

        let n_optim = read_u32(&mut r)? as usize;
        let mut optim = Vec::with_capacity(n_optim);
        for _ in 0..n_optim {
            let name = read_str(&mut r)?;
            let len = read_u64(&mut r)? as usize;
            let first = read_f32s(&mut r, len)?;
            let second = read_f32s(&mut r, len)?;
            let step = read_u64(&mut r)?;
            optim.push(OptimBlob {
                name,
                first,
                second,
                step,
            });
        }
        if !r.is_empty() {
            return Err(err(format!("{} trailing bytes after payload", r.len())));
        }
        Ok(Checkpoint { meta, tensors, optim })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Error::io(format!("creating {parent:?}"), e))?;
        }
        let tmp = path.with_extension("sgck.tmp");
        {
            let mut f = std::fs::File::create(&tmp)
                .map_err(|e| Error::io(format!("creating {tmp:?}"), e))?;
            f.write_all(&bytes)
                .map_err(|e| Error::io(format!("writing {tmp:?}"), e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {path:?}"), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::io(format!("opening {path:?}"), e))?
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(format!("reading {path:?}"), e))?;
        Self::from_bytes(&bytes)
            .map_err(|e| err(format!("{path:?}: {e}")))
    }

    /// SHA-256 hex fingerprint of the serialized checkpoint.
    pub fn fingerprint(&self) -> Result<String> {
        let bytes = self.to_bytes()?;
        Ok(Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect())
    }
}

fn write_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let bytes = s.as_bytes();
    out.extend_from_slice(&u32::try_from(bytes.len()).map_err(|_| err("name too long"))?.to_le_bytes());
    out.extend_from_slice(bytes);
    Ok(())
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    if r.len() < buf.len() {
        return Err(err("unexpected end of file"));
    }
    let (head, tail) = r.split_at(buf.len());
    buf.copy_from_slice(head);
    *r = tail;
    Ok(())
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str(r: &mut &[u8]) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut b = vec![0u8; len];
    read_exact(r, &mut b)?;
    String::from_utf8(b).map_err(|e| err(format!("invalid utf-8 name: {e}")))
}

fn read_f32s(r: &mut &[u8], count: usize) -> Result<Vec<f32>> {
    if r.len() < count * 4 {
        return Err(err("unexpected end of file in tensor payload"));
    }
    let (head, tail) = r.split_at(count * 4);
    let out = head
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    *r = tail;
    Ok(out)
}
