//! Versioned binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "PMIXCKPT" | u32 version | u32 n | n bytes of `key=value\n` text
//! u32 blocks | per block: u16 name length, name, u8 rank, u32 dims, f32 data
//! u32 CRC-32 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PMIXCKPT";
pub const VERSION: u32 = 1;

/// Key-value header plus named `f32` tensors, in insertion order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    header: Vec<(String, String)>,
    blocks: Vec<(String, Tensor<f32>)>,
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), reason: reason.into() }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        let value = value.to_string();
        if let Some(slot) = self.header.iter_mut().find(|(k, _)| *k == key) {
            slot.1 = value;
        } else {
            self.header.push((key, value));
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.header.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn header(&self) -> &[(String, String)] {
        &self.header
    }

    /// Parse a required header value.
    pub fn parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.get(key).ok_or_else(|| Error::Config(format!("checkpoint lacks `{key}`")))?;
        raw.parse().map_err(|_| Error::Config(format!("checkpoint value `{key}={raw}` is malformed")))
    }

    pub fn push_block(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.blocks.push((name.into(), tensor));
    }

    pub fn block(&self, name: &str) -> Option<&Tensor<f32>> {
        self.blocks.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn blocks(&self) -> &[(String, Tensor<f32>)] {
        &self.blocks
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut text = String::new();
        for (k, v) in &self.header {
            if k.is_empty() || k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Config(format!("header entry `{k}` cannot be serialized")));
            }
            text.push_str(k);
            text.push('=');
            text.push_str(v);
            text.push('\n');
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for (name, t) in &self.blocks {
            if name.len() > u16::MAX as usize || t.rank() > u8::MAX as usize {
                return Err(Error::Config(format!("block `{name}` cannot be serialized")));
            }
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    /// Decode; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 || &bytes[..8] != MAGIC {
            return Err(bad(path, "not a checkpoint (bad magic)"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let mut r = Reader { buf: body, pos: 8, path };
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(path, format!("version {version}, this build reads {VERSION}")));
        }
        if crc32fast::hash(body) != stored {
            return Err(bad(path, "checksum mismatch (corrupt file)"));
        }
        let text_len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(text_len)?).map_err(|_| bad(path, "header is not UTF-8"))?;
        let mut ck = Checkpoint::new();
        for line in text.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(path, format!("header line `{line}`")))?;
            ck.header.push((k.to_string(), v.to_string()));
        }
        let n = r.u32()?;
        for _ in 0..n {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| bad(path, "block name"))?;
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let raw = r.take(count * 4)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(&shape, data).map_err(|e| bad(path, format!("block `{name}`: {e}")))?;
            ck.blocks.push((name, t));
        }
        if r.pos != body.len() {
            return Err(bad(path, "trailing bytes"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        // write-then-rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(bad(self.path, "truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
