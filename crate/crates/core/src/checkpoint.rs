//! Binary checkpoint format.
//!
//! Layout (little-endian):
//!   magic "DNSG", version u32,
//!   schedule descriptor (kind u8, steps u32, endpoints f64×2,
//!     optional separate endpoints for the Bernoulli chain),
//!   canonical config text (u64 length + UTF-8),
//!   step counter u64,
//!   rng state (seed u64, stream u64, word position u64×2),
//!   segment index (count u64; per entry: name, offset, length, init),
//!   parameter payload (u64 length + f64 values),
//!   optimizer moments m and v (same encoding) and optimizer step u64.
//!
//! Save→load→save is byte-identical; a version or layout mismatch is
//! rejected outright.

use std::fs;
use std::path::Path;

use crate::config::{parse_config, render_config, TrainingConfig};
use crate::error::{Error, Result};
use crate::nn::params::{Init, ModelParams, SegmentBuilder};
use crate::pipeline::train::AdamState;
use crate::rng::RngState;

const MAGIC: &[u8; 4] = b"DNSG";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainingConfig,
    pub step: u64,
    pub rng: RngState,
    pub params: ModelParams,
    pub opt: AdamState,
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode(ckpt);
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode(&bytes)
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());

    // schedule descriptor, regenerated on load rather than stored per step
    out.push(0u8); // kind: linear
    out.extend_from_slice(&(ckpt.config.t_steps as u32).to_le_bytes());
    out.extend_from_slice(&ckpt.config.beta_min.to_le_bytes());
    out.extend_from_slice(&ckpt.config.beta_max.to_le_bytes());
    match (ckpt.config.bernoulli_beta_min, ckpt.config.bernoulli_beta_max) {
        (Some(lo), Some(hi)) => {
            out.push(1u8);
            out.extend_from_slice(&lo.to_le_bytes());
            out.extend_from_slice(&hi.to_le_bytes());
        }
        _ => out.push(0u8),
    }

    let cfg_text = render_config(&ckpt.config);
    out.extend_from_slice(&(cfg_text.len() as u64).to_le_bytes());
    out.extend_from_slice(cfg_text.as_bytes());

    out.extend_from_slice(&ckpt.step.to_le_bytes());
    out.extend_from_slice(&ckpt.rng.seed.to_le_bytes());
    out.extend_from_slice(&ckpt.rng.stream.to_le_bytes());
    out.extend_from_slice(&(ckpt.rng.word_pos as u64).to_le_bytes());
    out.extend_from_slice(&((ckpt.rng.word_pos >> 64) as u64).to_le_bytes());

    let entries = ckpt.params.index().entries();
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.off as u64).to_le_bytes());
        out.extend_from_slice(&(e.len as u64).to_le_bytes());
        match e.init {
            Init::Zero => {
                out.push(0u8);
                out.extend_from_slice(&0u64.to_le_bytes());
            }
            Init::Uniform { fan_in } => {
                out.push(1u8);
                out.extend_from_slice(&(fan_in as u64).to_le_bytes());
            }
        }
    }

    write_f64s(&mut out, ckpt.params.values());
    write_f64s(&mut out, &ckpt.opt.m);
    write_f64s(&mut out, &ckpt.opt.v);
    out.extend_from_slice(&ckpt.opt.steps.to_le_bytes());
    out
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }

    let kind = r.u8()?;
    if kind != 0 {
        return Err(Error::Checkpoint(format!("unknown schedule kind {kind}")));
    }
    let t_steps = r.u32()? as usize;
    let beta_min = r.f64()?;
    let beta_max = r.f64()?;
    let has_bern = r.u8()? == 1;
    let (bern_lo, bern_hi) = if has_bern { (Some(r.f64()?), Some(r.f64()?)) } else { (None, None) };

    let cfg_len = r.u64()? as usize;
    let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
        .map_err(|_| Error::Checkpoint("config text is not UTF-8".into()))?;
    let config = parse_config(cfg_text)?;
    // descriptor and config snapshot must agree
    if config.t_steps != t_steps
        || config.beta_min != beta_min
        || config.beta_max != beta_max
        || config.bernoulli_beta_min != bern_lo
        || config.bernoulli_beta_max != bern_hi
    {
        return Err(Error::Checkpoint("schedule descriptor disagrees with config".into()));
    }

    let step = r.u64()?;
    let seed = r.u64()?;
    let stream = r.u64()?;
    let lo = r.u64()? as u128;
    let hi = r.u64()? as u128;
    let rng = RngState { seed, stream, word_pos: lo | (hi << 64) };

    let n_entries = r.u64()? as usize;
    let mut builder = SegmentBuilder::new();
    let mut expected_off = 0usize;
    for _ in 0..n_entries {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("segment name is not UTF-8".into()))?
            .to_string();
        let off = r.u64()? as usize;
        let len = r.u64()? as usize;
        let init = match r.u8()? {
            0 => {
                let _ = r.u64()?;
                Init::Zero
            }
            1 => Init::Uniform { fan_in: r.u64()? as usize },
            other => return Err(Error::Checkpoint(format!("unknown init kind {other}"))),
        };
        if off != expected_off {
            return Err(Error::Checkpoint("segment offsets are not contiguous".into()));
        }
        expected_off += len;
        builder.register(name, len, init);
    }
    let index = builder.build();

    let values = read_f64s(&mut r)?;
    if values.len() != index.total_len() {
        return Err(Error::Checkpoint("parameter payload does not match index".into()));
    }
    // the layout implied by the config must match what was stored
    let expected = config.net.layout();
    if expected.entries().len() != index.entries().len()
        || expected
            .entries()
            .iter()
            .zip(index.entries())
            .any(|(a, b)| a.name != b.name || a.off != b.off || a.len != b.len)
    {
        return Err(Error::Checkpoint("segment index does not match configured network".into()));
    }

    let m = read_f64s(&mut r)?;
    let v = read_f64s(&mut r)?;
    if m.len() != values.len() || v.len() != values.len() {
        return Err(Error::Checkpoint("optimizer moment length mismatch".into()));
    }
    let opt_steps = r.u64()?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after checkpoint payload".into()));
    }

    Ok(Checkpoint {
        config,
        step,
        rng,
        params: ModelParams::from_parts(index, values),
        opt: AdamState { m, v, steps: opt_steps },
    })
}

fn write_f64s(out: &mut Vec<u8>, values: &[f64]) {
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_f64s(r: &mut Reader) -> Result<Vec<f64>> {
    let n = r.u64()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(r.f64()?);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
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
