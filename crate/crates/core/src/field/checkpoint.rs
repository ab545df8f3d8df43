//! Binary checkpoint format.
//!
//! All integers and floats are little-endian.
//!
//! | offset | size | content                                              |
//! |--------|------|------------------------------------------------------|
//! | 0      | 8    | magic `PNRFCKPT`                                     |
//! | 8      | 4    | version (`u32`, currently 1)                         |
//! | 12     | 4    | flags (`u32`; bit 0: optimizer state follows)        |
//! | 16     | 32   | architecture, eight `u32`: depth, width, skip layer  |
//! |        |      | (`0xFFFFFFFF` = none), color width, activation       |
//! |        |      | (0 relu, 1 softplus), position frequencies,          |
//! |        |      | direction frequencies, include-input (0/1)           |
//! | 48     | 8    | near and far sampling bounds (`f32` each, meters)    |
//! | 56     | 8    | training iteration (`u64`)                           |
//! | 64     | 8    | parameter count `n` (`u64`, both branches)           |
//! | 72     | 4n   | parameters (`f32`): coarse then fine; per layer      |
//! |        |      | weight (row-major, `in × out`) then bias; layers in  |
//! |        |      | order trunk.0.., sigma, feature, color_hidden,       |
//! |        |      | color_out                                            |
//! |        |      | if flag bit 0: Adam step (`u64`), first moments      |
//! |        |      | (`4n`), second moments (`4n`), same order            |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Activation, Architecture, EncodingConfig, FieldParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PNRFCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const NO_SKIP: u32 = u32::MAX;

/// Adam moments stored alongside the parameters for exact resumption.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSnapshot {
    pub step: u64,
    pub m: FieldParams<f32>,
    pub v: FieldParams<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: FieldParams<f32>,
    pub near: f32,
    pub far: f32,
    pub iteration: u64,
    pub optimizer: Option<OptimizerSnapshot>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_params(out: &mut Vec<u8>, p: &FieldParams<f32>) {
    for (_, block) in p.blocks() {
        for v in block {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn write_checkpoint(ckpt: &Checkpoint, mut w: impl Write) -> Result<()> {
    let a = &ckpt.params.arch;
    let n = ckpt.params.param_count();
    let mut out = Vec::with_capacity(72 + 12 * n + 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u32(&mut out, ckpt.optimizer.is_some() as u32);
    for v in [
        a.depth as u32,
        a.width as u32,
        a.skip.map_or(NO_SKIP, |k| k as u32),
        a.color_width as u32,
        a.activation.code(),
        a.encoding.pos_freqs as u32,
        a.encoding.dir_freqs as u32,
        a.encoding.include_input as u32,
    ] {
        put_u32(&mut out, v);
    }
    out.extend_from_slice(&ckpt.near.to_le_bytes());
    out.extend_from_slice(&ckpt.far.to_le_bytes());
    out.extend_from_slice(&ckpt.iteration.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    put_params(&mut out, &ckpt.params);
    if let Some(opt) = &ckpt.optimizer {
        out.extend_from_slice(&opt.step.to_le_bytes());
        put_params(&mut out, &opt.m);
        put_params(&mut out, &opt.v);
    }
    w.write_all(&out)
        .map_err(|e| Error::Format(format!("checkpoint write failed: {e}")))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
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

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn params(&mut self, arch: Architecture) -> Result<FieldParams<f32>> {
        let mut p = FieldParams::zeros(arch)?;
        for block in p.blocks_mut() {
            for v in block.iter_mut() {
                *v = self.f32()?;
            }
        }
        Ok(p)
    }
}

pub fn read_checkpoint(mut r: impl Read) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)
        .map_err(|e| Error::Format(format!("checkpoint read failed: {e}")))?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let flags = c.u32()?;
    let mut f = [0u32; 8];
    for v in f.iter_mut() {
        *v = c.u32()?;
    }
    let arch = Architecture {
        depth: f[0] as usize,
        width: f[1] as usize,
        skip: (f[2] != NO_SKIP).then_some(f[2] as usize),
        color_width: f[3] as usize,
        activation: Activation::from_code(f[4])
            .ok_or_else(|| Error::Format(format!("unknown activation code {}", f[4])))?,
        encoding: EncodingConfig {
            pos_freqs: f[5] as usize,
            dir_freqs: f[6] as usize,
            include_input: f[7] != 0,
        },
    };
    arch.validate()
        .map_err(|e| Error::Format(format!("bad architecture: {e}")))?;
    let near = c.f32()?;
    let far = c.f32()?;
    let iteration = c.u64()?;
    let n = c.u64()? as usize;
    let params = c.params(arch)?;
    if params.param_count() != n {
        return Err(Error::Format(format!(
            "parameter count {n} does not match architecture ({})",
            params.param_count()
        )));
    }
    let optimizer = if flags & 1 != 0 {
        let step = c.u64()?;
        let m = c.params(arch)?;
        let v = c.params(arch)?;
        Some(OptimizerSnapshot { step, m, v })
    } else {
        None
    };
    if c.pos != buf.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(Checkpoint {
        params,
        near,
        far,
        iteration,
        optimizer,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(ckpt, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(with_opt: bool) -> Checkpoint {
        let arch = Architecture {
            skip: Some(1),
            ..Architecture::desk()
        };
        let params = FieldParams::<f32>::init(arch, 4).unwrap();
        let optimizer = with_opt.then(|| OptimizerSnapshot {
            step: 17,
            m: FieldParams::init(arch, 5).unwrap(),
            v: FieldParams::init(arch, 6).unwrap(),
        });
        Checkpoint {
            params,
            near: 0.05,
            far: 2.5,
            iteration: 17,
            optimizer,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for with_opt in [false, true] {
            let ckpt = sample(with_opt);
            let mut bytes = Vec::new();
            write_checkpoint(&ckpt, &mut bytes).unwrap();
            let back = read_checkpoint(bytes.as_slice()).unwrap();
            assert_eq!(back, ckpt);
            let mut again = Vec::new();
            write_checkpoint(&back, &mut again).unwrap();
            assert_eq!(again, bytes);
        }
    }

    #[test]
    fn header_layout() {
        let ckpt = sample(false);
        let mut bytes = Vec::new();
        write_checkpoint(&ckpt, &mut bytes).unwrap();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 4);
        assert_eq!(u32::from_le_bytes(bytes[24..28].try_into().unwrap()), 1);
        let n = ckpt.params.param_count();
        assert_eq!(bytes.len(), 72 + 4 * n);
        let first = f32::from_le_bytes(bytes[72..76].try_into().unwrap());
        assert_eq!(first, ckpt.params.coarse.trunk[0].weight[[0, 0]]);
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = Vec::new();
        write_checkpoint(&sample(true), &mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(bad.as_slice()).is_err());
        assert!(read_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(read_checkpoint(extra.as_slice()).is_err());
    }
}
