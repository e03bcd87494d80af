//! Model file: `MSVW1` magic, a u32-length-prefixed UTF-8 `key=value`
//! header, then named tensors as `(u32 name length, name, u32 rank,
//! u32 extents…, f32 little-endian values)` until end of file.

use std::path::Path;

use crate::config::{parse_kv, RunConfig};
use crate::encoder::{Encoder, ModelWeights, StreamTag};
use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const MODEL_MAGIC: &[u8; 5] = b"MSVW1";
const MEAN_TENSOR: &str = "embedding_mean";

fn malformed(msg: impl Into<String>) -> Error {
    Error::Malformed { what: "model file", msg: msg.into() }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("value fits in u32").to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    put_u32(out, name.len());
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.rank());
    for &e in t.shape() {
        put_u32(out, e);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn model_to_bytes(m: &ModelWeights) -> Vec<u8> {
    let header = format!("stream.tag={}\n{}", m.stream_tag, RunConfig::model_header(&m.frontend, m.encoder.config()));
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    put_u32(&mut out, header.len());
    out.extend_from_slice(header.as_bytes());
    for p in m.encoder.params().iter() {
        put_tensor(&mut out, &p.name, &p.value);
    }
    if let Some(mean) = &m.embedding_mean {
        let t = Tensor::new([mean.len()], mean.clone()).expect("1-d");
        put_tensor(&mut out, MEAN_TENSOR, &t);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| malformed("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<ModelWeights> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MODEL_MAGIC.len())? != MODEL_MAGIC {
        return Err(malformed("bad magic"));
    }
    let len = r.u32()?;
    let header = std::str::from_utf8(r.take(len)?).map_err(|_| malformed("header is not UTF-8"))?;

    let mut cfg = RunConfig::default();
    let mut tag = None;
    for (_, k, v) in parse_kv(header, Path::new("<model header>"))? {
        if k == "stream.tag" {
            tag = Some(v.parse::<StreamTag>()?);
        } else {
            cfg.set(&k, &v)?;
        }
    }
    cfg.frontend.validate()?;
    cfg.encoder.validate()?;

    let mut named = Vec::new();
    let mut mean = None;
    while !r.done() {
        let n = r.u32()?;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| malformed("tensor name is not UTF-8"))?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let count =
            shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b)).ok_or_else(|| malformed("tensor too large"))?;
        let raw = r.take(count.checked_mul(4).ok_or_else(|| malformed("tensor too large"))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let t = Tensor::new(shape, data)?;
        if name == MEAN_TENSOR {
            mean = Some(t.into_data());
        } else {
            named.push((name, t));
        }
    }

    let mut encoder = Encoder::<f32>::new(&cfg.encoder, 0)?;
    encoder.params_mut().load(named)?;
    let mut m = ModelWeights::new(encoder, cfg.frontend)?;
    if let Some(tag) = tag {
        m.stream_tag = tag;
    }
    if let Some(mean) = &mean {
        if mean.len() != m.embed_dim() {
            return Err(malformed("embedding mean has the wrong length"));
        }
    }
    m.embedding_mean = mean;
    Ok(m)
}

pub fn write_model(path: impl AsRef<Path>, m: &ModelWeights) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, model_to_bytes(m)).map_err(|e| Error::io(path, e))
}

pub fn read_model(path: impl AsRef<Path>) -> Result<ModelWeights> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::FrontendConfig;
    use crate::encoder::{EncoderConfig, InitScheme};

    #[test]
    fn bit_exact_round_trip() {
        let cfg = EncoderConfig { init: InitScheme::Xavier, ..EncoderConfig::toy() };
        let mut m = ModelWeights::new(Encoder::new(&cfg, 9).unwrap(), FrontendConfig::band(1000.0, 8000.0)).unwrap();
        m.embedding_mean = Some((0..64).map(|i| i as f32 * 0.1 - 3.0).collect());
        let bytes = model_to_bytes(&m);
        assert_eq!(&bytes[..5], b"MSVW1");
        let back = model_from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(model_to_bytes(&back), bytes);
        assert_eq!(back.stream_tag, StreamTag::Hf);
    }

    #[test]
    fn rejects_corruption() {
        let m = ModelWeights::new(Encoder::new(&EncoderConfig::toy(), 1).unwrap(), FrontendConfig::default()).unwrap();
        let bytes = model_to_bytes(&m);
        assert!(model_from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(model_from_bytes(&bad), Err(Error::Malformed { .. })));
    }
}
