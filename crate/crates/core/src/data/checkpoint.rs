//! Versioned binary checkpoints: head parameters, optimiser state and the
//! training configuration that produced them.
//!
//! ```text
//! magic b"CPFC", version u32 = 1
//! config echo   u32 byte length + UTF-8 `key = value` lines
//! D, d, B       u32 each
//! 10 tensors    rank u32, dims u32 * rank, f64 data
//! adam          beta1 beta2 eps f64, step u64,
//!               then per tensor: len u64, m f64 * len, v f64 * len
//! ```
//!
//! Values are stored as `f64`, so a load reproduces the saved state exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::features::Cursor;
use crate::error::{Error, Result};
use crate::model::{CpfParams, Dims, Linear, PARAM_NAMES};
use crate::tensor::Tensor;
use crate::training::{AdamState, TrainConfig};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CPFC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: CpfParams,
    pub optimizer: AdamState,
    pub config: TrainConfig,
}

impl Checkpoint {
    pub fn new(params: CpfParams, optimizer: AdamState, config: TrainConfig) -> Result<Self> {
        if params.config != config.head {
            return Err(Error::Contract(
                "checkpoint head config differs from the training config".into(),
            ));
        }
        if optimizer.m.len() != PARAM_NAMES.len() || optimizer.v.len() != PARAM_NAMES.len() {
            return Err(Error::Contract("optimizer state does not cover every tensor".into()));
        }
        Ok(Checkpoint {
            params,
            optimizer,
            config,
        })
    }

    pub fn write_to<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = BufWriter::new(writer);
        w.write_all(&CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let echo = self.config.to_kv();
        w.write_all(&(echo.len() as u32).to_le_bytes())?;
        w.write_all(echo.as_bytes())?;
        let dims = self.params.dims();
        for v in [dims.visual, dims.text, dims.blocks] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for t in self.params.tensors() {
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &s in t.shape() {
                w.write_all(&(s as u32).to_le_bytes())?;
            }
            put_f64s(&mut w, t.data())?;
        }
        let o = &self.optimizer;
        put_f64s(&mut w, &[o.beta1, o.beta2, o.eps])?;
        w.write_all(&o.step.to_le_bytes())?;
        for (m, v) in o.m.iter().zip(&o.v) {
            w.write_all(&(m.len() as u64).to_le_bytes())?;
            put_f64s(&mut w, m)?;
            put_f64s(&mut w, v)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(File::create(path)?)
    }

    pub fn read_from<R: Read>(reader: R) -> Result<Self> {
        let mut cur = Cursor::new(reader);
        let mut magic = [0u8; 4];
        cur.bytes(&mut magic, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::format(0, format!("bad magic {magic:?}, expected \"CPFC\"")));
        }
        let version = cur.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
        }
        let echo_len = cur.u32("config length")? as usize;
        let echo_at = cur.offset;
        let mut echo = vec![0u8; echo_len];
        cur.bytes(&mut echo, "config echo")?;
        let echo = String::from_utf8(echo).map_err(|_| Error::format(echo_at, "config echo is not UTF-8"))?;
        let config = TrainConfig::from_kv(&echo).map_err(|e| Error::format(echo_at, e.to_string()))?;
        let dims_at = cur.offset;
        let dims = Dims {
            visual: cur.u32("visual dim")? as usize,
            text: cur.u32("text dim")? as usize,
            blocks: cur.u32("block count")? as usize,
        };
        let mut params = CpfParams {
            proj_obj: Linear::zeros(dims.visual, dims.text),
            proj_attr: Linear::zeros(dims.visual, dims.text),
            fusion: Linear::zeros(dims.blocks * dims.visual, dims.visual),
            comp_visual: Linear::zeros(2 * dims.visual, dims.text),
            comp_text: Linear::zeros(2 * dims.text, dims.text),
            config: config.head,
        };
        for (slot, name) in params.tensors_mut().into_iter().zip(PARAM_NAMES) {
            let at = cur.offset;
            let rank = cur.u32("tensor rank")? as usize;
            if rank != slot.shape().len() {
                return Err(Error::format(at, format!("{name}: rank {rank}, expected {}", slot.shape().len())));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u32("tensor dims")? as usize);
            }
            if shape != slot.shape() {
                return Err(Error::format(
                    at,
                    format!("{name}: shape {shape:?} does not match dims {:?} (declared at byte {dims_at})", slot.shape()),
                ));
            }
            let data = read_f64s(&mut cur, slot.len(), name)?;
            *slot = Tensor::new(shape, data)?;
        }
        let mut opt = AdamState::new(&[]);
        opt.beta1 = cur.f64("adam beta1")?;
        opt.beta2 = cur.f64("adam beta2")?;
        opt.eps = cur.f64("adam eps")?;
        opt.step = cur.u64("adam step")?;
        for (t, name) in params.tensors().into_iter().zip(PARAM_NAMES) {
            let at = cur.offset;
            let len = cur.u64("moment length")? as usize;
            if len != t.len() {
                return Err(Error::format(at, format!("{name}: moment length {len}, expected {}", t.len())));
            }
            opt.m.push(read_f64s(&mut cur, len, name)?);
            opt.v.push(read_f64s(&mut cur, len, name)?);
        }
        let mut probe = [0u8; 1];
        if cur.bytes(&mut probe, "").is_ok() {
            return Err(Error::format(cur.offset - 1, "trailing bytes after checkpoint"));
        }
        Checkpoint::new(params, opt, config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn put_f64s<W: Write>(w: &mut W, data: &[f64]) -> std::io::Result<()> {
    for &x in data {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s<R: Read>(cur: &mut Cursor<R>, n: usize, what: &str) -> Result<Vec<f64>> {
    (0..n).map(|_| cur.f64(what)).collect()
}
