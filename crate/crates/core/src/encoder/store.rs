//! Embeddings file: u32-length-prefixed UTF-8 `key=value` header, then per
//! utterance a u32-length-prefixed UTF-8 id followed by `embed_dim` f32
//! little-endian values.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::config::parse_kv;
use crate::encoder::Embedding;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub stream: String,
    pub embed_dim: usize,
    entries: Vec<(String, Embedding)>,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    pub fn new(stream: impl Into<String>, embed_dim: usize) -> Self {
        Self { stream: stream.into(), embed_dim, entries: Vec::new(), index: HashMap::new() }
    }

    pub fn push(&mut self, id: impl Into<String>, e: Embedding) -> Result<()> {
        if e.dim() != self.embed_dim {
            return Err(Error::DimMismatch { left: e.dim(), right: self.embed_dim });
        }
        let id = id.into();
        if self.index.insert(id.clone(), self.entries.len()).is_some() {
            return Err(Error::Malformed { what: "embeddings", msg: format!("duplicate utterance id {id}") });
        }
        self.entries.push((id, e));
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Embedding> {
        self.index.get(id).map(|&i| &self.entries[i].1)
    }

    pub fn entries(&self) -> &[(String, Embedding)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        let _ = writeln!(header, "stream={}", self.stream);
        let _ = writeln!(header, "embed_dim={}", self.embed_dim);
        let _ = writeln!(header, "count={}", self.entries.len());
        let mut out = Vec::new();
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for (id, e) in &self.entries {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for v in &e.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Malformed { what: "embeddings", msg: msg.to_string() };
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated"))?;
            let s = &bytes[pos..end];
            pos = end;
            Ok(s)
        };
        let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes")) as usize;

        let hlen = u32_at(take(4)?);
        let header = std::str::from_utf8(take(hlen)?).map_err(|_| bad("header is not UTF-8"))?;
        let (mut stream, mut dim, mut count) = (None, None, None);
        for (_, k, v) in parse_kv(header, Path::new("<embeddings header>"))? {
            match k.as_str() {
                "stream" => stream = Some(v),
                "embed_dim" => dim = Some(v.parse::<usize>().map_err(|_| bad("embed_dim"))?),
                "count" => count = Some(v.parse::<usize>().map_err(|_| bad("count"))?),
                _ => return Err(bad(&format!("unknown header key {k}"))),
            }
        }
        let (stream, dim, count) = match (stream, dim, count) {
            (Some(s), Some(d), Some(c)) => (s, d, c),
            _ => return Err(bad("header needs stream, embed_dim and count")),
        };
        let mut table = Self::new(stream, dim);
        for _ in 0..count {
            let n = u32_at(take(4)?);
            let id = String::from_utf8(take(n)?.to_vec()).map_err(|_| bad("id is not UTF-8"))?;
            let raw = take(dim * 4)?;
            let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            table.push(id, Embedding::new(values))?;
        }
        if take(1).is_ok() {
            return Err(bad("trailing bytes"));
        }
        Ok(table)
    }
}

pub fn write_embeddings(path: impl AsRef<Path>, table: &EmbeddingTable) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, table.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingTable::from_bytes(&bytes)
}
