//! Binary checkpoint container.
//!
//! ```text
//! magic "SHALRTCK" | u32 format_version
//! u64 len | run config (TOML)
//! u64 len | vocabulary and labels (JSON)
//! u64 count | { u64 len | name | u64 rank | u64 dims.. | f64 data.. }
//! u8 has_optimizer | [ u8 kind | f64 lr, β1, β2, ε, wd | u64 step
//!                      | u64 count | { u64 len | name | u64 n | f64 m.. | f64 v.. } ]
//! ```
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{LabelSets, Vocab};
use crate::error::{Error, Result};
use crate::model::{Dims, ShaLrt};
use crate::nn::{OptimizerKind, OptimizerState, ParamSet, Tensor};

pub const MAGIC: &[u8; 8] = b"SHALRTCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Meta {
    vocab: Vocab,
    labels: LabelSets,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub vocab: Vocab,
    pub labels: LabelSets,
    pub params: ParamSet<f64>,
    pub optimizer: Option<OptimizerState>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn floats(&mut self, v: &[f64]) {
        v.iter().for_each(|&x| self.f64(x));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("implausible length {n}")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len()?;
        self.take(n)
    }
    fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }
    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

impl Checkpoint {
    pub fn from_model(model: &ShaLrt<f64>, config: &RunConfig, vocab: &Vocab, labels: &LabelSets, optimizer: Option<&OptimizerState>) -> Self {
        let mut config = config.clone();
        config.model = model.config.clone();
        Self {
            config,
            vocab: vocab.clone(),
            labels: labels.clone(),
            params: model.params.clone(),
            optimizer: optimizer.cloned(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.0.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        w.bytes(self.config.to_toml().as_bytes());
        let meta = Meta { vocab: self.vocab.clone(), labels: self.labels.clone() };
        w.bytes(serde_json::to_string(&meta).expect("meta serializes").as_bytes());
        w.u64(self.params.len() as u64);
        for p in self.params.iter() {
            w.bytes(p.name.as_bytes());
            w.u64(p.tensor.shape().len() as u64);
            p.tensor.shape().iter().for_each(|&d| w.u64(d as u64));
            w.floats(p.tensor.data());
        }
        match &self.optimizer {
            None => w.u8(0),
            Some(o) => {
                w.u8(1);
                w.u8(match o.kind {
                    OptimizerKind::Adam => 0,
                    OptimizerKind::AdamW => 1,
                });
                for v in [o.learning_rate, o.betas.0, o.betas.1, o.eps, o.weight_decay] {
                    w.f64(v);
                }
                w.u64(o.step_count);
                w.u64(o.first.len() as u64);
                for (name, m) in &o.first {
                    let v = o.second.get(name).cloned().unwrap_or_else(|| vec![0.0; m.len()]);
                    w.bytes(name.as_bytes());
                    w.u64(m.len() as u64);
                    w.floats(m);
                    w.floats(&v);
                }
            }
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let config = RunConfig::from_toml(&r.string()?)?;
        let meta: Meta = serde_json::from_str(&r.string()?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut params = ParamSet::new();
        for _ in 0..r.u64()? {
            let name = r.string()?;
            let rank = r.len()?;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().product();
            let t = Tensor::new(&shape, r.floats(n)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
            params.register(name, t).map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let kind = match r.u8()? {
                    0 => OptimizerKind::Adam,
                    1 => OptimizerKind::AdamW,
                    k => return Err(Error::Checkpoint(format!("unknown optimizer tag {k}"))),
                };
                let mut o = OptimizerState::new(kind, r.f64()?, 0.0);
                o.betas = (r.f64()?, r.f64()?);
                o.eps = r.f64()?;
                o.weight_decay = r.f64()?;
                o.step_count = r.u64()?;
                let (mut first, mut second) = (BTreeMap::new(), BTreeMap::new());
                for _ in 0..r.u64()? {
                    let name = r.string()?;
                    let n = r.len()?;
                    first.insert(name.clone(), r.floats(n)?);
                    second.insert(name, r.floats(n)?);
                }
                o.first = first;
                o.second = second;
                Some(o)
            }
            t => return Err(Error::Checkpoint(format!("bad optimizer flag {t}"))),
        };
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self { config, vocab: meta.vocab, labels: meta.labels, params, optimizer })
    }

    /// Writes through a temporary file and a rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    pub fn dims(&self) -> Dims {
        Dims {
            vocab: self.vocab.len(),
            intents: self.labels.num_intents(),
            slots: self.labels.num_slots(),
        }
    }

    /// Rebuilds the model and copies every stored parameter into it. A checkpoint
    /// without decoder parameters yields a model without a decoder.
    pub fn into_model(&self) -> Result<ShaLrt<f64>> {
        let mut model = ShaLrt::with_seed(&self.config.model, &self.config.slg, self.dims(), 0)?;
        let has_decoder = self.params.names().iter().any(|n| n.starts_with("slg."));
        if !has_decoder {
            model.strip_decoder();
        }
        if model.params.len() != self.params.len() {
            return Err(Error::SchemaMismatch(format!(
                "checkpoint holds {} parameters, configuration expects {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for p in model.params.iter_mut() {
            let stored = self
                .params
                .by_name(&p.name)
                .ok_or_else(|| Error::SchemaMismatch(format!("parameter `{}` missing from checkpoint", p.name)))?;
            if stored.tensor.shape() != p.tensor.shape() {
                return Err(Error::SchemaMismatch(format!(
                    "`{}` has shape {:?}, expected {:?}",
                    p.name,
                    stored.tensor.shape(),
                    p.tensor.shape()
                )));
            }
            p.tensor.data_mut().copy_from_slice(stored.tensor.data());
        }
        Ok(model)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
