//! Versioned binary checkpoints.
//!
//! Layout (little-endian): magic `FSTRCKPT`, `u32` format version, `u32`
//! length plus JSON metadata (model config, input standardization, free-form
//! extras), `u32` tensor count, then per tensor a `u32`-prefixed UTF-8 path,
//! `u32` rank, `u64` extents and raw `f32` values. Batch-norm statistics are
//! stored as `<layer>.running_mean` / `<layer>.running_var`. A trailing flag
//! byte announces optimizer state: `u64` step, `f64` learning rate, then the
//! first and second moments in parameter order.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_model, InputNorm, ModelConfig, ModelParameters};
use crate::error::{Error, Result};
use crate::tensor::{RunningStats, Tensor};

const MAGIC: &[u8; 8] = b"FSTRCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Adam moments and schedule position.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub lr: f64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ModelParameters<f32>,
    pub optimizer: Option<OptimizerState>,
    /// Free-form run information (member index, seed, epoch, …).
    pub extra: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    input_norm: InputNorm,
    #[serde(default)]
    extra: serde_json::Value,
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_data(out: &mut Vec<u8>, t: &Tensor<f32>) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn checkpoint_bytes(ck: &Checkpoint) -> Result<Vec<u8>> {
    let p = &ck.params;
    let meta = serde_json::to_vec(&Meta {
        config: p.config().clone(),
        input_norm: p.input_norm.clone(),
        extra: ck.extra.clone(),
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);

    let mut tensors: Vec<(String, Tensor<f32>)> = p
        .store
        .iter()
        .map(|(_, n, t)| (n.to_string(), t.clone()))
        .collect();
    for (name, r) in p.bn_names.iter().zip(&p.running) {
        if let (Some(m), Some(v)) = (r.mean(), r.var()) {
            tensors.push((format!("{name}.running_mean"), Tensor::new(vec![m.len()], m.to_vec())?));
            tensors.push((format!("{name}.running_var"), Tensor::new(vec![v.len()], v.to_vec())?));
        }
    }
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (n, t) in &tensors {
        put_tensor(&mut out, n, t);
    }
    match &ck.optimizer {
        None => out.push(0),
        Some(o) => {
            if o.m.len() != p.store.len() || o.v.len() != p.store.len() {
                return Err(Error::Shape("optimizer moments do not match the parameters".into()));
            }
            out.push(1);
            out.extend_from_slice(&o.step.to_le_bytes());
            out.extend_from_slice(&o.lr.to_le_bytes());
            for t in o.m.iter().chain(&o.v) {
                put_data(&mut out, t);
            }
        }
    }
    Ok(out)
}

struct Reader<'a>(Cursor<&'a [u8]>);

impl Reader<'_> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut b = vec![0; n];
        self.0
            .read_exact(&mut b)
            .map_err(|_| Error::Format("truncated checkpoint".into()))?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .bytes(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader(Cursor::new(bytes));
    if r.bytes(8)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32()? as usize;
    let meta: Meta = serde_json::from_slice(&r.bytes(len)?)
        .map_err(|e| Error::Format(format!("bad checkpoint metadata: {e}")))?;
    let mut params = build_model::<f32>(&meta.config, 0)?;
    params.input_norm = meta.input_norm;

    let count = r.u32()? as usize;
    let mut seen = vec![false; params.store.len()];
    let mut stats: Vec<(Option<Vec<f32>>, Option<Vec<f32>>)> = vec![(None, None); params.running.len()];
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = String::from_utf8(r.bytes(nlen)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let data = r.f32s(shape.iter().product())?;
        if let Some(id) = params.store.id(&name) {
            let dst = params.store.get_mut(id);
            if dst.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {shape:?}, config implies {:?}",
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(&data);
            seen[id.0] = true;
            continue;
        }
        let slot = params.bn_names.iter().position(|b| {
            name.strip_prefix(b.as_str())
                .is_some_and(|rest| rest == ".running_mean" || rest == ".running_var")
        });
        match slot {
            Some(i) if name.ends_with("mean") => stats[i].0 = Some(data),
            Some(i) => stats[i].1 = Some(data),
            None => return Err(Error::Format(format!("unexpected tensor {name}"))),
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::Format(format!(
            "checkpoint lacks parameter {}",
            params.store.name(crate::tensor::ParamId(i))
        )));
    }
    for (slot, (m, v)) in params.running.iter_mut().zip(stats) {
        match (m, v) {
            (Some(m), Some(v)) if m.len() == slot.channels() && v.len() == slot.channels() => {
                *slot = RunningStats::from_parts(m, v);
            }
            (None, None) => {}
            _ => return Err(Error::Format("incomplete batch-norm statistics".into())),
        }
    }

    let optimizer = match r.bytes(1)?[0] {
        0 => None,
        1 => {
            let step = r.u64()?;
            let lr = f64::from_le_bytes(r.bytes(8)?.try_into().unwrap());
            let shapes: Vec<Vec<usize>> = params.store.iter().map(|(_, _, t)| t.shape().to_vec()).collect();
            let read = |r: &mut Reader| -> Result<Vec<Tensor<f32>>> {
                shapes
                    .iter()
                    .map(|s| Tensor::new(s.clone(), r.f32s(s.iter().product())?))
                    .collect()
            };
            let m = read(&mut r)?;
            let v = read(&mut r)?;
            Some(OptimizerState { step, lr, m, v })
        }
        f => return Err(Error::Format(format!("bad optimizer flag {f}"))),
    };
    if (r.0.position() as usize) != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(Checkpoint {
        params,
        optimizer,
        extra: meta.extra,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    fs::write(path, checkpoint_bytes(ck)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint_from_bytes(&fs::read(path)?)
}
