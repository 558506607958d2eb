//! Checkpoint layout, all integers little-endian:
//!
//! ```text
//! "PDVT" | u32 version
//! u32 × 9: depth width heads patch image_h image_w channels classes mlp_ratio
//! u32 tensor count
//! per tensor: u32 name length | name (utf-8) | u32 rank | u32 × rank extents | f64 × numel
//! ```

use std::path::Path;

use super::params::{Params, ViTParams};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PDVT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

pub fn write_checkpoint(params: &ViTParams) -> Vec<u8> {
    let c = &params.config;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [
        c.depth,
        c.width,
        c.heads,
        c.patch,
        c.image_h,
        c.image_w,
        c.channels,
        c.classes,
        c.mlp_ratio,
    ] {
        put_u32(&mut out, v);
    }
    let named = params.named();
    put_u32(&mut out, named.len());
    for (name, t) in named {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank());
        for &e in t.shape() {
            put_u32(&mut out, e);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::TruncatedFile(what));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self, what: &'static str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<ViTParams> {
    let mut r = Reader { buf: bytes };
    if r.take(4, "magic").ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(Error::BadMagic { expected: "PDVT" });
    }
    let version = r.u32("version")? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let mut f = [0usize; 9];
    for v in &mut f {
        *v = r.u32("model config")?;
    }
    let config = ModelConfig {
        depth: f[0],
        width: f[1],
        heads: f[2],
        patch: f[3],
        image_h: f[4],
        image_w: f[5],
        channels: f[6],
        classes: f[7],
        mlp_ratio: f[8],
    };
    config.validate()?;
    let expected = Params::shapes(&config);
    let count = r.u32("tensor count")?;
    if count != expected.len() {
        return Err(Error::InvalidConfig(format!(
            "checkpoint has {count} tensors, config needs {}",
            expected.len()
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for (want_name, want_shape) in &expected {
        let len = r.u32("tensor name")?;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| Error::InvalidConfig("tensor name is not utf-8".into()))?;
        let rank = r.u32("tensor rank")?;
        let shape = (0..rank)
            .map(|_| r.u32("tensor extents"))
            .collect::<Result<Vec<_>>>()?;
        if name != want_name || &shape != want_shape {
            return Err(Error::InvalidConfig(format!(
                "tensor {name} {shape:?} where {want_name} {want_shape:?} was expected"
            )));
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor::new(shape, data)?);
    }
    Ok(ViTParams {
        config,
        tensors: Params::from_ordered(config.depth, tensors),
    })
}

impl ViTParams {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, write_checkpoint(self)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        read_checkpoint(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
