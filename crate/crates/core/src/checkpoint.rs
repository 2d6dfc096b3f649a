//! Versioned on-disk training state.
//!
//! Layout: 8-byte magic, `u32` version, `u64` header length, a JSON header,
//! then every tensor as raw little-endian `f32` in header order.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::trainer::{StepRecord, TrainConfig};

pub const MAGIC: &[u8; 8] = b"GCLUSTCK";
pub const VERSION: u32 = 1;

/// Position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Word position split as `(high, low)`.
    pub word_pos: [u64; 2],
}

/// Frozen Step-one context of a partially processed macro-batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroState {
    pub sample_indices: Vec<usize>,
    pub balanced: Vec<f64>,
    pub attention: Vec<f64>,
    pub relations: Vec<usize>,
    /// Shuffled macro-batch positions consumed by the mini-batches.
    pub order: Vec<usize>,
    pub transform_seed: u64,
    pub steps_done: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<ArrayD<f32>>,
    pub v: Vec<ArrayD<f32>>,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub params: Vec<ArrayD<f32>>,
    pub buffers: Vec<Array1<f32>>,
    pub adam: AdamState,
    pub epoch: usize,
    pub macro_index: usize,
    pub global_step: u64,
    pub epoch_order: Vec<usize>,
    pub macro_state: Option<MacroState>,
    pub rng: RngState,
    pub history: Vec<StepRecord>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    train_config: TrainConfig,
    param_shapes: Vec<Vec<usize>>,
    buffer_lens: Vec<usize>,
    adam_t: u64,
    epoch: usize,
    macro_index: usize,
    global_step: u64,
    epoch_order: Vec<usize>,
    macro_state: Option<MacroState>,
    rng: RngState,
    history: Vec<StepRecord>,
}

impl TrainState {
    /// Rebuilds the network in this state.
    pub fn model(&self) -> Result<Model> {
        model_from_arrays(&self.model_config, &self.params, &self.buffers)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            model_config: self.model_config.clone(),
            train_config: self.train_config.clone(),
            param_shapes: self.params.iter().map(|p| p.shape().to_vec()).collect(),
            buffer_lens: self.buffers.iter().map(|b| b.len()).collect(),
            adam_t: self.adam.t,
            epoch: self.epoch,
            macro_index: self.macro_index,
            global_step: self.global_step,
            epoch_order: self.epoch_order.clone(),
            macro_state: self.macro_state.clone(),
            rng: self.rng.clone(),
            history: self.history.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            w.write_all(MAGIC)?;
            w.write_all(&VERSION.to_le_bytes())?;
            w.write_all(&(json.len() as u64).to_le_bytes())?;
            w.write_all(&json)?;
            let tensors = self.params.iter().chain(&self.adam.m).chain(&self.adam.v);
            for t in tensors {
                write_f32(&mut w, t.iter())?;
            }
            for b in &self.buffers {
                write_f32(&mut w, b.iter())?;
            }
            w.flush()?;
            w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingPath(path.to_path_buf()));
        }
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| Error::Checkpoint("file too short".into()))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(read_array(&mut r)?);
        if version != VERSION {
            return Err(Error::CheckpointVersion { found: version, expected: VERSION });
        }
        let len = u64::from_le_bytes(read_array(&mut r)?) as usize;
        if len > 1 << 30 {
            return Err(Error::Checkpoint("header length is implausible".into()));
        }
        let mut json = vec![0; len];
        r.read_exact(&mut json).map_err(|_| Error::Checkpoint("truncated header".into()))?;
        let h: Header = serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;
        let mut read_tensors = || -> Result<Vec<ArrayD<f32>>> {
            h.param_shapes
                .iter()
                .map(|shape| {
                    let n = shape.iter().product();
                    ArrayD::from_shape_vec(IxDyn(shape), read_f32(&mut r, n)?)
                        .map_err(|e| Error::Checkpoint(e.to_string()))
                })
                .collect()
        };
        let params = read_tensors()?;
        let m = read_tensors()?;
        let v = read_tensors()?;
        let buffers = h
            .buffer_lens
            .iter()
            .map(|&n| Ok(Array1::from(read_f32(&mut r, n)?)))
            .collect::<Result<Vec<_>>>()?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Checkpoint("trailing bytes after tensors".into()));
        }
        Ok(Self {
            model_config: h.model_config,
            train_config: h.train_config,
            params,
            buffers,
            adam: AdamState { t: h.adam_t, m, v },
            epoch: h.epoch,
            macro_index: h.macro_index,
            global_step: h.global_step,
            epoch_order: h.epoch_order,
            macro_state: h.macro_state,
            rng: h.rng,
            history: h.history,
        })
    }
}

fn write_f32<'a, W: Write>(w: &mut W, values: impl Iterator<Item = &'a f32>) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|_| Error::Checkpoint("truncated file".into()))?;
    Ok(buf)
}

fn read_f32<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes).map_err(|_| Error::Checkpoint("truncated tensor data".into()))?;
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

/// Builds a network from stored parameter and buffer arrays.
pub fn model_from_arrays(config: &ModelConfig, params: &[ArrayD<f32>], buffers: &[Array1<f32>]) -> Result<Model> {
    let mut model = Model::new(config.clone(), 0)?;
    let mut slots = model.params_mut();
    if slots.len() != params.len() {
        return Err(Error::Incompatible(format!("{} parameter tensors for a model with {}", params.len(), slots.len())));
    }
    for (slot, value) in slots.iter_mut().zip(params) {
        if slot.value.shape() != value.shape() {
            return Err(Error::Incompatible(format!(
                "parameter shape {:?} does not fit {:?}",
                value.shape(),
                slot.value.shape()
            )));
        }
        slot.value.assign(value);
    }
    let mut bufs = model.buffers_mut();
    if bufs.len() != buffers.len() || bufs.iter().zip(buffers).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::Incompatible("batch-norm buffers do not fit the model".into()));
    }
    for (slot, value) in bufs.iter_mut().zip(buffers) {
        slot.assign(value);
    }
    Ok(model)
}

/// Loads just the network from a checkpoint file.
pub fn load_model(path: &Path) -> Result<Model> {
    TrainState::load(path)?.model()
}
