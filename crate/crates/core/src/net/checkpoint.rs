//! Checkpoint file format, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "HDRCKPT\0"
//! version      u32      1
//! config_hash  32 bytes sha256 of the canonical config text
//! config_len   u32
//! config       config_len bytes, canonical `key=value` text (UTF-8)
//! block_count  u32
//! block_count times:
//!   name_len   u16
//!   name       name_len bytes (UTF-8)
//!   trainable  u8       0 or 1
//!   ndim       u8
//!   dims       ndim × u32
//!   values     prod(dims) × f32
//! ```
//!
//! Nothing may follow the last block.

use std::io::Write;
use std::path::Path;

use super::{ModelParams, NetConfig, NetError, ParamBlock};
use crate::autodiff::Tensor;
use crate::pano::io::atomic_write;
use crate::Real;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"HDRCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint<S: Real>(params: &ModelParams<S>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&params.config().hash());
    let text = params.config().canonical_text();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(params.blocks().len() as u32).to_le_bytes());
    for b in params.blocks() {
        out.extend_from_slice(&(b.name.len() as u16).to_le_bytes());
        out.extend_from_slice(b.name.as_bytes());
        out.push(u8::from(b.trainable));
        out.push(b.tensor.shape().len() as u8);
        for d in b.tensor.shape() {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in b.tensor.data() {
            out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_checkpoint<S: Real>(buf: &[u8], path: &Path) -> Result<ModelParams<S>, NetError> {
    let bad = |msg: &str| NetError::Format { path: path.to_path_buf(), msg: msg.to_string() };
    let trunc = || bad("truncated file");
    let mut r = Reader { buf, pos: 0 };
    if r.take(8).ok_or_else(trunc)? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = r.u32().ok_or_else(trunc)?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let hash: [u8; 32] = r.take(32).ok_or_else(trunc)?.try_into().expect("32 bytes");
    let len = r.u32().ok_or_else(trunc)? as usize;
    let text = std::str::from_utf8(r.take(len).ok_or_else(trunc)?).map_err(|_| bad("config text is not UTF-8"))?;
    let config = NetConfig::parse_canonical(text).map_err(|e| bad(&e.to_string()))?;
    if config.hash() != hash {
        return Err(bad("config hash does not match the embedded config"));
    }
    let count = r.u32().ok_or_else(trunc)? as usize;
    let mut blocks = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let nlen = r.u16().ok_or_else(trunc)? as usize;
        let name = std::str::from_utf8(r.take(nlen).ok_or_else(trunc)?).map_err(|_| bad("block name is not UTF-8"))?;
        let trainable = match r.u8().ok_or_else(trunc)? {
            0 => false,
            1 => true,
            _ => return Err(bad("trainable flag must be 0 or 1")),
        };
        let ndim = r.u8().ok_or_else(trunc)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32().ok_or_else(trunc)? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, d| a.checked_mul(*d)).ok_or_else(|| bad("dims overflow"))?;
        let bytes = r.take(n.checked_mul(4).ok_or_else(|| bad("dims overflow"))?).ok_or_else(trunc)?;
        let data: Vec<S> = bytes.chunks_exact(4).map(|c| S::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(bad(&format!("block {name} holds non-finite values")));
        }
        blocks.push(ParamBlock { name: name.to_string(), tensor: Tensor::new(&shape, data), trainable });
    }
    if r.pos != buf.len() {
        return Err(bad(&format!("{} trailing bytes", buf.len() - r.pos)));
    }
    ModelParams::from_parts(config, blocks).map_err(|e| bad(&e.to_string()))
}

pub fn save_checkpoint<S: Real>(params: &ModelParams<S>, path: &Path) -> Result<(), NetError> {
    let bytes = encode_checkpoint(params);
    atomic_write(path, |w| w.write_all(&bytes))
        .map_err(|e| NetError::Io { path: path.to_path_buf(), source: std::io::Error::other(e.to_string()) })
}

/// Loads a checkpoint using the config embedded in the file.
pub fn load_checkpoint<S: Real>(path: &Path) -> Result<ModelParams<S>, NetError> {
    let buf = std::fs::read(path).map_err(|source| NetError::Io { path: path.to_path_buf(), source })?;
    decode_checkpoint(&buf, path)
}

/// Loads a checkpoint and requires it to match `expected`.
pub fn load_checkpoint_for<S: Real>(path: &Path, expected: &NetConfig) -> Result<ModelParams<S>, NetError> {
    let p: ModelParams<S> = load_checkpoint(path)?;
    if p.config().hash() != expected.hash() {
        return Err(NetError::ConfigMismatch { path: path.to_path_buf() });
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> NetConfig {
        NetConfig { enc_channels: [4, 4, 8, 8], input_height: 16, input_width: 32, ..NetConfig::default() }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        for dom in [false, true] {
            let p = ModelParams::<f32>::init(&cfg(), dom, 42).unwrap();
            save_checkpoint(&p, &path).unwrap();
            let q: ModelParams<f32> = load_checkpoint(&path).unwrap();
            assert_eq!(p, q);
            for (a, b) in p.blocks().iter().zip(q.blocks()) {
                let ab: Vec<u32> = a.tensor.data().iter().map(|v| v.to_bits()).collect();
                let bb: Vec<u32> = b.tensor.data().iter().map(|v| v.to_bits()).collect();
                assert_eq!(ab, bb);
            }
            assert_eq!(std::fs::read(&path).unwrap(), encode_checkpoint(&q));
        }
    }

    #[test]
    fn header_layout() {
        let p = ModelParams::<f32>::init(&cfg(), false, 1).unwrap();
        let bytes = encode_checkpoint(&p);
        assert_eq!(&bytes[..8], b"HDRCKPT\0");
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..44], &cfg().hash());
    }

    #[test]
    fn mismatched_config_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&ModelParams::<f32>::init(&cfg(), false, 1).unwrap(), &path).unwrap();
        let other = NetConfig { output_bias: -1.0, ..cfg() };
        assert!(matches!(load_checkpoint_for::<f32>(&path, &other), Err(NetError::ConfigMismatch { .. })));
        assert!(load_checkpoint_for::<f32>(&path, &cfg()).is_ok());
    }

    #[test]
    fn truncation_and_trailing_bytes_are_rejected() {
        let p = ModelParams::<f32>::init(&cfg(), false, 1).unwrap();
        let bytes = encode_checkpoint(&p);
        let path = Path::new("mem");
        for cut in [0, 7, 12, 50, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode_checkpoint::<f32>(&bytes[..cut], path), Err(NetError::Format { .. })), "cut {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint::<f32>(&extra, path).is_err());
        let mut corrupt = bytes.clone();
        corrupt[12] ^= 1;
        assert!(decode_checkpoint::<f32>(&corrupt, path).is_err());
    }

    #[test]
    fn failed_save_leaves_no_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("missing").join("m.ckpt");
        let p = ModelParams::<f32>::init(&cfg(), false, 1).unwrap();
        assert!(save_checkpoint(&p, &path).is_err());
        assert!(!path.exists());
    }
}
