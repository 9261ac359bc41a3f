//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "LVITCKPT" | version u32
//! config text      (u64 length + UTF-8)
//! label names      (u32 count, each u32 length + UTF-8)
//! epochs_done u64  | adam_step u64
//! tensor count u32, then per tensor:
//!   name (u32 length + UTF-8) | rank u32 | dims u64 × rank
//!   value, first moment, second moment: numel × f64 each
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::TrainConfig;
use crate::model::ViTModel;
use crate::optim::AdamW;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"LVITCKPT";
const VERSION: u32 = 1;

/// Full training state after some number of epochs. The stored config
/// carries no output location, so identical runs give identical files.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub label_names: Vec<String>,
    pub epochs_done: usize,
    pub model: ViTModel,
    pub optimizer: AdamW,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn str32(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }

    fn floats(&mut self, xs: &[f64]) {
        for x in xs {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::data(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, n: u64) -> Result<usize> {
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| Error::data(format!("checkpoint length {n} is implausible")))
    }

    fn string(&mut self, n: u64) -> Result<String> {
        let n = self.len(n)?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::data("checkpoint string is not UTF-8"))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::data("checkpoint tensor too large"))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        let cfg = self.config.to_text();
        w.u64(cfg.len() as u64);
        w.0.extend_from_slice(cfg.as_bytes());
        w.u32(self.label_names.len() as u32);
        for l in &self.label_names {
            w.str32(l);
        }
        w.u64(self.epochs_done as u64);
        w.u64(self.optimizer.step_count());
        let params = self.model.params();
        w.u32(params.len() as u32);
        for (i, p) in params.iter().enumerate() {
            w.str32(&p.name);
            w.u32(p.value.shape().len() as u32);
            for &d in p.value.shape() {
                w.u64(d as u64);
            }
            w.floats(p.value.data());
            w.floats(&self.optimizer.first_moments()[i]);
            w.floats(&self.optimizer.second_moments()[i]);
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::data("not a checkpoint file (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::data(format!("unsupported checkpoint version {version}")));
        }
        let n = r.u64()?;
        let config = TrainConfig::parse(&r.string(n)?, None)?;
        let mut label_names = Vec::new();
        for _ in 0..r.u32()? {
            let n = r.u32()?;
            label_names.push(r.string(n.into())?);
        }
        let epochs_done = r.u64()?;
        let epochs_done = r.len(epochs_done)?;
        let step = r.u64()?;
        let count = r.u32()?;
        let mut tensors = Vec::new();
        let (mut first, mut second) = (Vec::new(), Vec::new());
        for _ in 0..count {
            let n = r.u32()?;
            let name = r.string(n.into())?;
            let rank = r.u32()?;
            let mut shape = Vec::new();
            for _ in 0..rank {
                let d = r.u64()?;
                shape.push(r.len(d)?);
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::data(format!("tensor {name} is too large")))?;
            tensors.push((name, Tensor::new(shape, r.floats(numel)?)?));
            first.push(r.floats(numel)?);
            second.push(r.floats(numel)?);
        }
        if r.pos != buf.len() {
            return Err(Error::data(format!(
                "{} trailing bytes in checkpoint",
                buf.len() - r.pos
            )));
        }
        let mut moments = Vec::with_capacity(first.len());
        for spec in config.vit.param_specs() {
            let i = tensors.iter().position(|(n, _)| *n == spec.name);
            let i = i.ok_or_else(|| Error::data(format!("missing parameter {}", spec.name)))?;
            moments.push(i);
        }
        if moments.len() != tensors.len() {
            return Err(Error::data("checkpoint holds parameters the model does not use"));
        }
        let first = moments.iter().map(|&i| std::mem::take(&mut first[i])).collect();
        let second = moments.iter().map(|&i| std::mem::take(&mut second[i])).collect();
        let model = ViTModel::from_tensors(config.vit.clone(), tensors)?;
        let optimizer = AdamW::from_state(config.adamw(), config.eta_max, step, first, second)?;
        Ok(Self {
            config,
            label_names,
            epochs_done,
            model,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf).map_err(|e| match e {
            Error::Data { message, .. } => Error::data_at(path, None, message),
            other => other,
        })
    }
}
