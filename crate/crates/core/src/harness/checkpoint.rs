//! Checkpoints as safetensors files. Tensor keys: `gen/`, `ds/`, `dt/` parameters,
//! `sn/<critic>/<block>.u|.v` power-iteration vectors and `opt/<g|ds|dt>/<param>.m|.v`
//! optimizer moments. The single metadata entry `pestgan` holds a JSON header with the
//! format version, step counters, spectral-norm scalars and the run config as TOML.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use crate::discriminators::{Critic, SpectralState};
use crate::error::{CheckpointError, Error, Result};
use crate::nn::ParamStore;

use super::config::RunConfig;
use super::train::TrainState;

pub const FORMAT_VERSION: u32 = 1;
const METADATA_KEY: &str = "pestgan";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SpectralMeta {
    sigma: f64,
    iterations: u64,
    degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    step: u64,
    optimizer_steps: [u64; 3],
    spectral: BTreeMap<String, SpectralMeta>,
    config: String,
}

fn corrupt(msg: impl std::fmt::Display) -> Error {
    CheckpointError::Corrupt(msg.to_string()).into()
}

fn tensor_bytes(t: &Tensor) -> Result<(Dtype, Vec<usize>, Vec<u8>)> {
    let shape = t.dims().to_vec();
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => (Dtype::F32, shape, flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect()),
        DType::F64 => (Dtype::F64, shape, flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect()),
        other => return Err(Error::invalid(format!("cannot checkpoint dtype {other:?}"))),
    })
}

fn view_to_tensor(view: &TensorView<'_>) -> Result<Tensor> {
    let shape = view.shape().to_vec();
    let data = view.data();
    let t = match view.dtype() {
        Dtype::F32 => {
            let v: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        Dtype::F64 => {
            let v: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        other => return Err(corrupt(format!("unsupported tensor dtype {other:?}"))),
    };
    Ok(t)
}

fn critic_states<'a>(name: &str, critic: &'a Critic) -> Vec<(String, &'a SpectralState)> {
    critic
        .blocks
        .iter()
        .enumerate()
        .map(|(i, b)| (format!("sn/{name}/{i}"), &b.state))
        .collect()
}

fn collect(state: &TrainState) -> Result<(BTreeMap<String, Tensor>, Header)> {
    let mut tensors = BTreeMap::new();
    for (prefix, store) in [("gen/", &state.gen_store), ("ds/", &state.ds_store), ("dt/", &state.dt_store)] {
        for (name, var) in store.iter() {
            tensors.insert(format!("{prefix}{name}"), var.as_tensor().clone());
        }
    }
    let mut spectral = BTreeMap::new();
    for (key, s) in critic_states("ds", &state.spatial.0).into_iter().chain(critic_states("dt", &state.temporal.0)) {
        tensors.insert(format!("{key}.u"), s.u.clone());
        tensors.insert(format!("{key}.v"), s.v.clone());
        spectral.insert(
            key,
            SpectralMeta {
                sigma: s.sigma,
                iterations: s.iterations,
                degenerate: s.degenerate,
            },
        );
    }
    for (prefix, opt) in [("opt/g/", &state.opt_g), ("opt/ds/", &state.opt_ds), ("opt/dt/", &state.opt_dt)] {
        tensors.extend(opt.export_state(prefix));
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        step: state.step,
        optimizer_steps: [state.opt_g.step_count(), state.opt_ds.step_count(), state.opt_dt.step_count()],
        spectral,
        config: state.config.to_toml_string()?,
    };
    Ok((tensors, header))
}

pub fn checkpoint_bytes(state: &TrainState) -> Result<Vec<u8>> {
    let (tensors, header) = collect(state)?;
    let raw: Vec<(String, (Dtype, Vec<usize>, Vec<u8>))> = tensors
        .iter()
        .map(|(k, t)| Ok((k.clone(), tensor_bytes(t)?)))
        .collect::<Result<_>>()?;
    let views: Vec<(String, TensorView<'_>)> = raw
        .iter()
        .map(|(k, (dt, shape, bytes))| Ok((k.clone(), TensorView::new(*dt, shape.clone(), bytes).map_err(corrupt)?)))
        .collect::<Result<_>>()?;
    let meta = HashMap::from([(
        METADATA_KEY.to_string(),
        serde_json::to_string(&header).map_err(corrupt)?,
    )]);
    safetensors::serialize(views, Some(meta)).map_err(corrupt)
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(state)?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Parsed {
    header: Header,
    tensors: BTreeMap<String, Tensor>,
}

fn parse(bytes: &[u8]) -> Result<Parsed> {
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(corrupt)?;
    let json = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(METADATA_KEY))
        .ok_or_else(|| corrupt("missing checkpoint header"))?;
    let value: serde_json::Value = serde_json::from_str(json).map_err(corrupt)?;
    let found = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| corrupt("header lacks format_version"))? as u32;
    if found != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found,
            expected: FORMAT_VERSION,
        }
        .into());
    }
    let header: Header = serde_json::from_value(value).map_err(corrupt)?;
    let st = SafeTensors::deserialize(bytes).map_err(corrupt)?;
    let mut tensors = BTreeMap::new();
    for (name, view) in st.iter() {
        tensors.insert(name.to_string(), view_to_tensor(&view)?);
    }
    Ok(Parsed { header, tensors })
}

fn read(path: &Path) -> Result<Parsed> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes)
}

fn take(tensors: &BTreeMap<String, Tensor>, key: &str, expected: &[usize], dtype: DType) -> Result<Tensor> {
    let t = tensors
        .get(key)
        .ok_or_else(|| CheckpointError::MissingTensor(key.to_string()))?;
    if t.dims() != expected {
        return Err(CheckpointError::TensorMismatch {
            name: key.to_string(),
            found: t.dims().to_vec(),
            expected: expected.to_vec(),
        }
        .into());
    }
    if t.dtype() != dtype {
        return Err(corrupt(format!("`{key}` stored as {:?}, model uses {dtype:?}", t.dtype())));
    }
    Ok(t.clone())
}

fn restore_store(store: &ParamStore, prefix: &str, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    for (name, var) in store.iter() {
        let t = take(tensors, &format!("{prefix}{name}"), var.dims(), var.dtype())?;
        var.set(&t)?;
    }
    Ok(())
}

fn restore_critic(name: &str, critic: &mut Critic, parsed: &Parsed) -> Result<()> {
    for (i, block) in critic.blocks.iter_mut().enumerate() {
        let key = format!("sn/{name}/{i}");
        let meta = parsed
            .header
            .spectral
            .get(&key)
            .ok_or_else(|| CheckpointError::MissingTensor(key.clone()))?;
        let s = &mut block.state;
        s.u = take(&parsed.tensors, &format!("{key}.u"), s.u.dims(), s.u.dtype())?;
        s.v = take(&parsed.tensors, &format!("{key}.v"), s.v.dims(), s.v.dtype())?;
        s.sigma = meta.sigma;
        s.iterations = meta.iterations;
        s.degenerate = meta.degenerate;
    }
    Ok(())
}

impl TrainState {
    /// Overwrite this state's parameters, spectral states and optimizer moments from a
    /// checkpoint; every tensor must match the current model's shapes.
    pub fn restore(&mut self, path: &Path) -> Result<()> {
        let parsed = read(path)?;
        self.restore_parsed(&parsed)
    }

    fn restore_parsed(&mut self, parsed: &Parsed) -> Result<()> {
        restore_store(&self.gen_store, "gen/", &parsed.tensors)?;
        restore_store(&self.ds_store, "ds/", &parsed.tensors)?;
        restore_store(&self.dt_store, "dt/", &parsed.tensors)?;
        restore_critic("ds", &mut self.spatial.0, parsed)?;
        restore_critic("dt", &mut self.temporal.0, parsed)?;
        let [g, ds, dt] = parsed.header.optimizer_steps;
        self.opt_g.import_state(g, "opt/g/", &parsed.tensors)?;
        self.opt_ds.import_state(ds, "opt/ds/", &parsed.tensors)?;
        self.opt_dt.import_state(dt, "opt/dt/", &parsed.tensors)?;
        self.step = parsed.header.step;
        Ok(())
    }
}

/// Rebuild the full training state from the config embedded in a checkpoint.
pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let parsed = read(path)?;
    let config = RunConfig::from_toml_str(&parsed.header.config)
        .map_err(|e| corrupt(format!("embedded config: {e}")))?;
    let mut state = TrainState::new(config)?;
    state.restore_parsed(&parsed)?;
    Ok(state)
}

/// Embedded run config of a checkpoint, without building the model.
pub fn checkpoint_config(path: &Path) -> Result<RunConfig> {
    let parsed = read(path)?;
    RunConfig::from_toml_str(&parsed.header.config).map_err(|e| corrupt(format!("embedded config: {e}")))
}
