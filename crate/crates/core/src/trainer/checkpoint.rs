//! Checkpoint file format: 8-byte magic, length-prefixed JSON metadata, then
//! named fp32 little-endian tensor records. Round trips are bit-exact.

use super::{SgdMomentum, TrainState};
use crate::config::{config_hash, validate_config, ExperimentConfig, ObjectiveKind, ValidatedConfig};
use crate::error::{DeconError, Result};
use crate::models::{Arch, BranchParams, ModelBundle, ParamMap, PrototypeState};
use ndarray::{Array1, Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"DECON1\0\0";
const VERSION: &str = "DECON1";

#[derive(Serialize, Deserialize)]
struct Metadata {
    version: String,
    config: ExperimentConfig,
    config_hash: String,
    arch: Arch,
    epoch: u32,
    step: u64,
    total_steps: u64,
    empty_match_events: u64,
    tensor_count: usize,
}

fn io_err(path: &Path, e: std::io::Error) -> DeconError {
    DeconError::io(path.display().to_string(), e)
}

fn write_tensor(w: &mut impl Write, name: &str, tensor: &ArrayD<f32>) -> std::io::Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&[tensor.ndim() as u8])?;
    for d in tensor.shape() {
        w.write_all(&(*d as u64).to_le_bytes())?;
    }
    for v in tensor.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_tensor(r: &mut impl Read) -> std::io::Result<(String, ArrayD<f32>)> {
    let mut len4 = [0u8; 4];
    r.read_exact(&mut len4)?;
    let name_len = u32::from_le_bytes(len4) as usize;
    let mut name_buf = vec![0u8; name_len];
    r.read_exact(&mut name_buf)?;
    let name = String::from_utf8(name_buf)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
    let mut ndim = [0u8; 1];
    r.read_exact(&mut ndim)?;
    let mut shape = Vec::with_capacity(ndim[0] as usize);
    for _ in 0..ndim[0] {
        let mut d8 = [0u8; 8];
        r.read_exact(&mut d8)?;
        shape.push(u64::from_le_bytes(d8) as usize);
    }
    let count: usize = shape.iter().product();
    let mut data = Vec::with_capacity(count);
    let mut f4 = [0u8; 4];
    for _ in 0..count {
        r.read_exact(&mut f4)?;
        data.push(f32::from_le_bytes(f4));
    }
    let tensor = ArrayD::from_shape_vec(IxDyn(&shape), data)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
    Ok((name, tensor))
}

fn collect_tensors(state: &TrainState) -> BTreeMap<String, ArrayD<f32>> {
    let mut all = BTreeMap::new();
    for (name, t) in &state.bundle.student.params {
        all.insert(format!("s.p.{name}"), t.clone());
    }
    for (name, t) in &state.bundle.student.buffers {
        all.insert(format!("s.b.{name}"), t.clone());
    }
    for (name, t) in &state.bundle.teacher.params {
        all.insert(format!("t.p.{name}"), t.clone());
    }
    for (name, t) in &state.bundle.teacher.buffers {
        all.insert(format!("t.b.{name}"), t.clone());
    }
    for (head, proto) in &state.bundle.protos {
        all.insert(format!("proto.{head}.bank"), proto.bank.clone().into_dyn());
        all.insert(format!("proto.{head}.center"), proto.center.clone().into_dyn());
    }
    for (name, t) in &state.optimizer.velocity {
        all.insert(format!("opt.{name}"), t.clone());
    }
    all
}

/// Writes the full training state. Tensors are ordered by name.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let tensors = collect_tensors(state);
    let meta = Metadata {
        version: VERSION.to_string(),
        config: state.cfg.as_config().clone(),
        config_hash: config_hash(state.cfg.as_config()),
        arch: state.bundle.arch.clone(),
        epoch: state.epoch,
        step: state.step,
        total_steps: state.total_steps,
        empty_match_events: state.empty_match_events,
        tensor_count: tensors.len(),
    };
    let meta_bytes = serde_json::to_vec(&meta).expect("metadata serializes");
    let mut w = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| io_err(path, e))?,
    );
    (|| -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(meta_bytes.len() as u64).to_le_bytes())?;
        w.write_all(&meta_bytes)?;
        for (name, tensor) in &tensors {
            write_tensor(&mut w, name, tensor)?;
        }
        w.flush()
    })()
    .map_err(|e| io_err(path, e))
}

/// Reads a checkpoint back into a training state. The version tag is
/// validated; the stored config is re-validated.
pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let mut r = std::io::BufReader::new(
        std::fs::File::open(path).map_err(|e| io_err(path, e))?,
    );
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != MAGIC {
        return Err(DeconError::Checkpoint(format!(
            "bad magic {:02x?}; not a {VERSION} checkpoint",
            magic
        )));
    }
    let mut len8 = [0u8; 8];
    r.read_exact(&mut len8).map_err(|e| io_err(path, e))?;
    let meta_len = u64::from_le_bytes(len8) as usize;
    let mut meta_buf = vec![0u8; meta_len];
    r.read_exact(&mut meta_buf).map_err(|e| io_err(path, e))?;
    let meta: Metadata = serde_json::from_slice(&meta_buf)
        .map_err(|e| DeconError::Checkpoint(format!("metadata: {e}")))?;
    if meta.version != VERSION {
        return Err(DeconError::Checkpoint(format!(
            "version `{}` != expected `{VERSION}`",
            meta.version
        )));
    }
    let cfg = validate_config(meta.config.clone())?;
    if config_hash(cfg.as_config()) != meta.config_hash {
        return Err(DeconError::Checkpoint("stored config hash mismatch".into()));
    }

    let mut tensors = BTreeMap::new();
    for _ in 0..meta.tensor_count {
        let (name, tensor) = read_tensor(&mut r).map_err(|e| io_err(path, e))?;
        tensors.insert(name, tensor);
    }

    let mut student = BranchParams { params: ParamMap::new(), buffers: ParamMap::new() };
    let mut teacher = BranchParams { params: ParamMap::new(), buffers: ParamMap::new() };
    let mut protos: BTreeMap<String, PrototypeState<f32>> = BTreeMap::new();
    let mut velocity = ParamMap::new();
    let mut banks: BTreeMap<String, Array2<f32>> = BTreeMap::new();
    let mut centers: BTreeMap<String, Array1<f32>> = BTreeMap::new();
    for (name, tensor) in tensors {
        if let Some(rest) = name.strip_prefix("s.p.") {
            student.params.insert(rest.to_string(), tensor);
        } else if let Some(rest) = name.strip_prefix("s.b.") {
            student.buffers.insert(rest.to_string(), tensor);
        } else if let Some(rest) = name.strip_prefix("t.p.") {
            teacher.params.insert(rest.to_string(), tensor);
        } else if let Some(rest) = name.strip_prefix("t.b.") {
            teacher.buffers.insert(rest.to_string(), tensor);
        } else if let Some(rest) = name.strip_prefix("opt.") {
            velocity.insert(rest.to_string(), tensor);
        } else if let Some(rest) = name.strip_prefix("proto.") {
            if let Some(head) = rest.strip_suffix(".bank") {
                banks.insert(
                    head.to_string(),
                    tensor.into_dimensionality().map_err(|e| {
                        DeconError::Checkpoint(format!("bank shape: {e}"))
                    })?,
                );
            } else if let Some(head) = rest.strip_suffix(".center") {
                centers.insert(
                    head.to_string(),
                    tensor.into_dimensionality().map_err(|e| {
                        DeconError::Checkpoint(format!("center shape: {e}"))
                    })?,
                );
            }
        } else {
            return Err(DeconError::Checkpoint(format!("unknown tensor `{name}`")));
        }
    }
    for (head, bank) in banks {
        let center = centers.remove(&head).ok_or_else(|| {
            DeconError::Checkpoint(format!("prototype head `{head}` missing center"))
        })?;
        protos.insert(head, PrototypeState { bank, center });
    }
    if meta.arch.objective == ObjectiveKind::Prototype && protos.is_empty() {
        return Err(DeconError::Checkpoint("missing prototype tensors".into()));
    }

    Ok(TrainState {
        cfg,
        bundle: ModelBundle { arch: meta.arch, student, teacher, protos },
        optimizer: SgdMomentum { velocity, momentum: 0.9 },
        step: meta.step,
        epoch: meta.epoch,
        total_steps: meta.total_steps,
        empty_match_events: meta.empty_match_events,
    })
}

/// Compares a loaded state's config hash against an expected config.
/// Mismatch is an error under `strict`, otherwise a warning string.
pub fn verify_checkpoint_config(
    state: &TrainState,
    expected: &ValidatedConfig,
    strict: bool,
) -> Result<Option<String>> {
    let got = config_hash(state.cfg.as_config());
    let want = config_hash(expected.as_config());
    if got == want {
        return Ok(None);
    }
    let msg = format!("checkpoint config hash {got} differs from expected {want}");
    if strict {
        Err(DeconError::Checkpoint(msg))
    } else {
        Ok(Some(msg))
    }
}
