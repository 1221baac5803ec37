//! Binary checkpoints: magic, format version, JSON config header, then
//! parameters (in insertion order), optimizer accumulators and the step.

use std::io::{Read, Write};
use std::path::Path;

use super::optim::OptimizerState;
use super::trainer::{TrainConfig, TrainState};
use crate::error::{Result, RptError};
use crate::model::Model;
use crate::tensor::Mat;

const MAGIC: &[u8; 8] = b"RPTCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

fn fmt(e: std::io::Error) -> RptError {
    RptError::Format(format!("checkpoint: {e}"))
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_mat(out: &mut Vec<u8>, m: &Mat) {
    for v in &m.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn to_bytes(state: &TrainState) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let header = serde_json::to_vec(&state.config)?;
    put_u64(&mut out, header.len() as u64);
    out.extend_from_slice(&header);
    let params = &state.model.params;
    put_u64(&mut out, params.len() as u64);
    for (_, name, value) in params.iter() {
        put_u64(&mut out, name.len() as u64);
        out.extend_from_slice(name.as_bytes());
        put_u64(&mut out, value.rows as u64);
        put_u64(&mut out, value.cols as u64);
        put_mat(&mut out, value);
    }
    put_u64(&mut out, state.optimizer.steps);
    for (m, s) in state.optimizer.momentum.iter().zip(&state.optimizer.belief) {
        put_mat(&mut out, m);
        put_mat(&mut out, s);
    }
    put_u64(&mut out, state.step);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() < n {
            return Err(RptError::Format("checkpoint truncated".into()));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn mat_into(&mut self, m: &mut Mat) -> Result<()> {
        let raw = self.take(m.data.len() * 8)?;
        for (v, b) in m.data.iter_mut().zip(raw.chunks_exact(8)) {
            *v = f64::from_le_bytes(b.try_into().expect("8 bytes"));
        }
        Ok(())
    }
}

/// Read only the config header.
pub fn read_config(bytes: &[u8]) -> Result<TrainConfig> {
    let mut r = Reader { buf: bytes };
    read_header(&mut r)
}

fn read_header(r: &mut Reader) -> Result<TrainConfig> {
    if r.take(8)? != MAGIC {
        return Err(RptError::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(RptError::Version { expected: CHECKPOINT_VERSION, found: version });
    }
    let len = r.u64()? as usize;
    Ok(serde_json::from_slice(r.take(len)?)?)
}

/// Restore a training state. When `expected` is given, the stored model
/// config must equal it.
pub fn from_bytes(bytes: &[u8], expected: Option<&TrainConfig>) -> Result<TrainState> {
    let mut r = Reader { buf: bytes };
    let config = read_header(&mut r)?;
    if let Some(e) = expected {
        if e.model != config.model {
            return Err(RptError::ConfigMismatch(format!(
                "checkpoint model {:?} differs from configured {:?}",
                config.model, e.model
            )));
        }
    }
    let mut model = Model::new(config.model.clone(), config.seed)?;
    let n = r.u64()? as usize;
    if n != model.params.len() {
        return Err(RptError::ConfigMismatch(format!("{n} parameters stored, model has {}", model.params.len())));
    }
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let len = r.u64()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| RptError::Format(e.to_string()))?;
        let (rows, cols) = (r.u64()? as usize, r.u64()? as usize);
        if name != model.params.name(id) || (rows, cols) != model.params.value(id).shape() {
            return Err(RptError::ConfigMismatch(format!(
                "parameter {name} ({rows}x{cols}) does not match {}",
                model.params.name(id)
            )));
        }
        r.mat_into(model.params.value_mut(id))?;
    }
    let mut optimizer = OptimizerState::new(&model.params);
    optimizer.steps = r.u64()?;
    for (m, s) in optimizer.momentum.iter_mut().zip(optimizer.belief.iter_mut()) {
        r.mat_into(m)?;
        r.mat_into(s)?;
    }
    let step = r.u64()?;
    if !r.buf.is_empty() {
        return Err(RptError::Format("trailing bytes after checkpoint".into()));
    }
    Ok(TrainState { config, model, optimizer, step })
}

pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = to_bytes(state)?;
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| RptError::io(&tmp, e))?;
    f.write_all(&bytes).map_err(fmt)?;
    f.sync_all().map_err(fmt)?;
    std::fs::rename(&tmp, path).map_err(|e| RptError::io(path, e))
}

pub fn load(path: &Path, expected: Option<&TrainConfig>) -> Result<TrainState> {
    let mut bytes = Vec::new();
    std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| RptError::io(path, e))?;
    from_bytes(&bytes, expected)
}
