//! `PSDM` checkpoint files.
//!
//! Layout (little endian): magic `PSDM`, `u16` version, the model config,
//! `u32` tensor count, then per tensor: `u16` name length, UTF-8 name,
//! `u8` group tag, `u8` rank, `u32` dims, binary32 values.

use std::path::Path;

use super::{ModelConfig, ModelParams, ParamGroup};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PSDM";
pub const CHECKPOINT_VERSION: u16 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_list(out: &mut Vec<u8>, vs: &[usize]) {
    put_u32(out, vs.len());
    vs.iter().for_each(|&v| put_u32(out, v));
}

pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let cfg = params.config();
    let mut out = Vec::with_capacity(params.values().len() * 4 + 4096);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [
        cfg.hidden_dim,
        cfg.n_layers,
        cfg.n_heads,
        cfg.ffn_dim,
        cfg.frames,
        cfg.target_dim,
        cfg.n_classes,
        cfg.classifier_hidden,
    ] {
        put_u32(&mut out, v);
    }
    out.extend_from_slice(&cfg.dropout_rate.to_le_bytes());
    put_list(&mut out, &cfg.conv_strides);
    put_list(&mut out, &cfg.conv_kernels);
    put_list(&mut out, &cfg.conv_channels);
    let layout = params.layout();
    put_u32(&mut out, layout.tensors().len());
    for t in layout.tensors() {
        out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.group.tag());
        out.push(t.shape.len() as u8);
        t.shape.iter().for_each(|&d| put_u32(&mut out, d));
        for &v in &params.values()[t.range()] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(self.origin.to_string()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn list(&mut self) -> Result<Vec<usize>> {
        let n = self.u32()?;
        if n > 64 {
            return Err(self.bad("implausible conv layer count"));
        }
        (0..n).map(|_| self.u32()).collect()
    }

    fn bad(&self, msg: &str) -> Error {
        Error::Parse { path: self.origin.into(), msg: msg.to_string() }
    }
}

pub fn decode_checkpoint(bytes: &[u8], origin: &str) -> Result<ModelParams> {
    let mut r = Reader { bytes, pos: 0, origin };
    if r.take(4).map_err(|_| Error::BadMagic(origin.to_string()))? != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic(origin.to_string()));
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let mut cfg = ModelConfig {
        hidden_dim: r.u32()?,
        n_layers: r.u32()?,
        n_heads: r.u32()?,
        ffn_dim: r.u32()?,
        frames: r.u32()?,
        target_dim: r.u32()?,
        n_classes: r.u32()?,
        classifier_hidden: r.u32()?,
        dropout_rate: r.f64()?,
        ..ModelConfig::default()
    };
    cfg.conv_strides = r.list()?;
    cfg.conv_kernels = r.list()?;
    cfg.conv_channels = r.list()?;
    cfg.validate()?;
    let layout = super::Layout::new(&cfg);
    let mut values = vec![0.0; layout.total()];
    let mut seen = vec![false; layout.tensors().len()];
    let count = r.u32()?;
    if count != layout.tensors().len() {
        return Err(r.bad(&format!("expected {} tensors, found {count}", layout.tensors().len())));
    }
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| r.bad("tensor name is not UTF-8"))?.to_string();
        let group = ParamGroup::from_tag(r.u8()?).ok_or_else(|| r.bad("unknown parameter group"))?;
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let idx = layout
            .tensors()
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| r.bad(&format!("unexpected tensor {name}")))?;
        let info = &layout.tensors()[idx];
        if seen[idx] || info.group != group || info.shape != shape {
            return Err(r.bad(&format!("tensor {name} duplicated or inconsistent with config")));
        }
        seen[idx] = true;
        let raw = r.take(info.len * 4)?;
        for (dst, chunk) in values[info.range()].iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64;
        }
    }
    if r.pos != bytes.len() {
        return Err(r.bad("trailing bytes"));
    }
    ModelParams::from_values(&cfg, values)
}

pub fn write_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<ModelParams> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let p = ModelParams::init(&ModelConfig::tiny(), 11).unwrap();
        let bytes = encode_checkpoint(&p);
        let back = decode_checkpoint(&bytes, "mem").unwrap();
        assert_eq!(back, p.quantized());
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let p = ModelParams::init(&ModelConfig::tiny(), 11).unwrap();
        let bytes = encode_checkpoint(&p);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad, "m"), Err(Error::BadMagic(_))));
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3], "m"), Err(Error::Truncated(_))));
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(matches!(decode_checkpoint(&v, "m"), Err(Error::UnsupportedVersion(9))));
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_checkpoint(&extra, "m").is_err());
    }
}
