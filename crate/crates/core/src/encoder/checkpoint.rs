//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `RADCLCKP`, version u32, config JSON
//! (u32 length + bytes), flags u32, tensor count u32, then per tensor its
//! name (u16 length + UTF-8), rank u8, dims u32 each, and f32 data. A
//! SHA-256 of everything before it closes the file.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{EncoderConfig, EncoderError, Model, Tensor};
use crate::tensor::Real;

pub const MAGIC: &[u8; 8] = b"RADCLCKP";
pub const VERSION: u32 = 1;
const FLAG_PROJECTION_DISCARDED: u32 = 1;

pub fn to_bytes<F: Real>(model: &Model<F>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(&model.config).expect("config serializes");
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    let flags = if model.projection_discarded { FLAG_PROJECTION_DISCARDED } else { 0 };
    out.extend_from_slice(&flags.to_le_bytes());

    let p = model.config.proj_dim;
    let rm = Tensor { shape: vec![p], data: model.running_mean.clone() };
    let rv = Tensor { shape: vec![p], data: model.running_var.clone() };
    let mut named: Vec<(String, &Tensor<F>)> = model.params.tensors().into_iter().map(|(n, _, t)| (n, t)).collect();
    named.push(("proj.running_mean".into(), &rm));
    named.push(("proj.running_var".into(), &rv));
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape.len() as u8);
        for d in &t.shape {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in &t.data {
            let x = v.to_f32().unwrap_or(f32::NAN);
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], EncoderError> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len()).ok_or_else(|| fmt("truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, EncoderError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, EncoderError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, EncoderError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn fmt(m: &str) -> EncoderError {
    EncoderError::Format(m.to_string())
}

pub fn from_bytes<F: Real>(bytes: &[u8]) -> Result<Model<F>, EncoderError> {
    if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(fmt("bad magic"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(EncoderError::ChecksumMismatch);
    }
    let mut r = Reader { buf: body, pos: MAGIC.len() };
    let version = r.u32()?;
    if version != VERSION {
        return Err(fmt(&format!("unsupported version {version}")));
    }
    let n = r.u32()? as usize;
    let config: EncoderConfig = serde_json::from_slice(r.take(n)?).map_err(|e| fmt(&format!("config: {e}")))?;
    config.validate()?;
    let flags = r.u32()?;
    let count = r.u32()? as usize;

    let mut model = Model::<F>::new(config, 0)?;
    model.projection_discarded = flags & FLAG_PROJECTION_DISCARDED != 0;
    let mut seen = 0usize;
    let mut extra: Vec<(String, Vec<F>)> = Vec::new();
    {
        let mut slots = model.params.tensors_mut();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| fmt("tensor name not UTF-8"))?.to_string();
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| fmt("tensor too large"))?)?;
            let data: Vec<F> = raw
                .chunks_exact(4)
                .map(|c| F::c(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect();
            match slots.iter_mut().find(|(n, _, _)| *n == name) {
                Some((_, _, t)) => {
                    if t.shape != shape {
                        return Err(fmt(&format!("{name}: shape {shape:?}, expected {:?}", t.shape)));
                    }
                    t.data = data;
                    seen += 1;
                }
                None => extra.push((name, data)),
            }
        }
        if seen != slots.len() {
            return Err(fmt("missing tensors"));
        }
    }
    if r.pos != body.len() {
        return Err(fmt("trailing bytes"));
    }
    let p = model.config.proj_dim;
    for (name, data) in extra {
        if data.len() != p {
            return Err(fmt(&format!("{name}: wrong length")));
        }
        match name.as_str() {
            "proj.running_mean" => model.running_mean = data,
            "proj.running_var" => model.running_var = data,
            _ => return Err(fmt(&format!("unknown tensor {name}"))),
        }
    }
    Ok(model)
}

pub fn save<F: Real>(model: &Model<F>, path: &Path) -> Result<(), EncoderError> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load<F: Real>(path: &Path) -> Result<Model<F>, EncoderError> {
    from_bytes(&fs::read(path)?)
}

/// `<ckpt>.vocab.tsv`, the vocabulary written next to a checkpoint.
pub fn vocab_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".vocab.tsv");
    PathBuf::from(s)
}
