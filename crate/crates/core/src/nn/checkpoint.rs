//! Binary checkpoints: little-endian header, network and schedule
//! configuration, a table of named `f32` tensors and a SHA-256 trailer.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{ScoreNetConfig, ScoreNetwork};
use crate::error::{Error, Result};
use crate::sde::SdeSchedule;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SGMSCORE";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

pub fn save(net: &ScoreNetwork, path: &Path) -> Result<()> {
    fs::write(path, encode(net)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ScoreNetwork> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub(crate) fn encode(net: &ScoreNetwork) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    let c = net.config();
    for v in [c.omega, c.dim, c.n_layer, c.n_resnet, c.channel_width, c.time_embed_dim] {
        put_u32(&mut out, v as u32);
    }
    out.extend_from_slice(&c.seed.to_le_bytes());
    let s = net.schedule();
    for v in [s.beta_min, s.beta_max, s.t_eps] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let params = net.params();
    put_u32(&mut out, params.specs().len() as u32);
    for spec in params.specs() {
        put_u32(&mut out, spec.name.len() as u32);
        out.extend_from_slice(spec.name.as_bytes());
        put_u32(&mut out, spec.shape.len() as u32);
        for &d in &spec.shape {
            put_u32(&mut out, d as u32);
        }
        for &v in &params.flat()[spec.range()] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub(crate) fn decode(bytes: &[u8]) -> Result<ScoreNetwork> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    if bytes.len() < 12 + DIGEST_LEN {
        return Err(bad("truncated file"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    let mut r = Reader { buf: body, pos: 8 };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch"));
    }
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let config = ScoreNetConfig {
        omega: dims[0],
        dim: dims[1],
        n_layer: dims[2],
        n_resnet: dims[3],
        channel_width: dims[4],
        time_embed_dim: dims[5],
        seed: r.u64()?,
    };
    let schedule = SdeSchedule::new(r.f64()?, r.f64()?, r.f64()?)?;
    let mut net = ScoreNetwork::init(config, schedule).map_err(|e| bad(&format!("invalid stored config: {e}")))?;
    let n = r.u32()? as usize;
    if n != net.params().specs().len() {
        return Err(bad("parameter table does not match the architecture"));
    }
    for k in 0..n {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| bad("parameter name is not UTF-8"))?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let spec = net.params().specs()[k].clone();
        if spec.name != name || spec.shape != shape {
            return Err(bad(&format!("unexpected tensor {name} {shape:?}")));
        }
        let raw = r.take(4 * spec.numel())?;
        let dst = &mut net.params_mut().flat_mut()[spec.range()];
        for (d, chunk) in dst.iter_mut().zip(raw.chunks_exact(4)) {
            *d = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        }
    }
    if r.pos != body.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(net)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
