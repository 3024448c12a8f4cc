//! Versioned binary checkpoint container.
//!
//! Layout: 8-byte magic, little-endian u64 header length, JSON header
//! (architecture, schedule parameters, normalization constants, tensor
//! name/shape manifest, training step), then raw little-endian f32 blobs:
//! parameters, and optionally the Adam moments. A sidecar
//! `<name>.manifest.txt` lists tensor names and shapes for inspection.
//! Writes are atomic (temp file + rename).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::{make_schedule, DiffusionSchedule};
use crate::error::{CoreError, Result};
use crate::io::write_atomic;

use super::adam::AdamState;
use super::train::{Normalization, TrainState};
use super::unet::{DenoiserNet, NetConfig};

const MAGIC: &[u8; 8] = b"SCTKCKP1";

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    in_channels: usize,
    base_width: usize,
    level_mults: Vec<usize>,
    temb_dim: usize,
    schedule_t: usize,
    beta1: f64,
    beta_t: f64,
    water_scale: f64,
    calcium_scale: f64,
    train_step: u64,
    has_optimizer: bool,
    tensors: Vec<TensorMeta>,
}

/// Everything needed to resume training or run inference.
pub struct Checkpoint {
    pub state: TrainState,
    pub sched: DiffusionSchedule,
    pub norm: Normalization,
}

fn f32s_to_bytes(v: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(v.len() * 4);
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

fn bytes_to_f32s(b: &[u8]) -> Vec<f32> {
    b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
}

pub fn save_checkpoint(
    path: &Path,
    state: &TrainState,
    sched: &DiffusionSchedule,
    norm: &Normalization,
    with_optimizer: bool,
) -> Result<()> {
    let cfg = state.net.config();
    let header = Header {
        version: 1,
        in_channels: cfg.in_channels,
        base_width: cfg.base_width,
        level_mults: cfg.level_mults.clone(),
        temb_dim: cfg.temb_dim,
        schedule_t: sched.t_steps,
        beta1: sched.beta[0],
        beta_t: *sched.beta.last().unwrap(),
        water_scale: norm.water_scale,
        calcium_scale: norm.calcium_scale,
        train_step: state.step,
        has_optimizer: with_optimizer,
        tensors: state
            .net
            .param_entries()
            .iter()
            .map(|e| TensorMeta { name: e.name.clone(), shape: e.shape.clone() })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| CoreError::Numerical(format!("checkpoint header: {e}")))?;
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    bytes.extend_from_slice(&f32s_to_bytes(state.net.params()));
    if with_optimizer {
        bytes.extend_from_slice(&f32s_to_bytes(&state.adam.m));
        bytes.extend_from_slice(&f32s_to_bytes(&state.adam.v));
    }
    write_atomic(path, &bytes)?;

    let mut manifest = String::new();
    for e in state.net.param_entries() {
        manifest.push_str(&format!(
            "{} {:?} len={}\n",
            e.name,
            e.shape,
            e.range.len()
        ));
    }
    let manifest_path = path.with_extension("manifest.txt");
    write_atomic(&manifest_path, manifest.as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let bad = |reason: &str| CoreError::Format {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + hlen {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + hlen])
        .map_err(|_| bad("malformed header JSON"))?;
    if header.version != 1 {
        return Err(bad("unsupported checkpoint version"));
    }
    let cfg = NetConfig {
        in_channels: header.in_channels,
        base_width: header.base_width,
        level_mults: header.level_mults.clone(),
        temb_dim: header.temb_dim,
    };
    let mut net = DenoiserNet::new(cfg, 0);
    // Verify the tensor manifest matches the reconstructed architecture.
    if net.param_entries().len() != header.tensors.len() {
        return Err(bad("tensor manifest does not match architecture"));
    }
    for (e, m) in net.param_entries().iter().zip(header.tensors.iter()) {
        if e.name != m.name || e.shape != m.shape {
            return Err(bad("tensor manifest does not match architecture"));
        }
    }
    let n = net.n_params();
    let body = &bytes[16 + hlen..];
    let expect = if header.has_optimizer { 3 * n * 4 } else { n * 4 };
    if body.len() != expect {
        return Err(bad("payload size does not match manifest"));
    }
    net.params_mut().copy_from_slice(&bytes_to_f32s(&body[..n * 4]));
    let mut adam = AdamState::new(n);
    if header.has_optimizer {
        adam.m = bytes_to_f32s(&body[n * 4..2 * n * 4]);
        adam.v = bytes_to_f32s(&body[2 * n * 4..]);
        adam.step = header.train_step;
    }
    let sched = make_schedule(header.schedule_t, header.beta1, header.beta_t)?;
    Ok(Checkpoint {
        state: TrainState { net, adam, step: header.train_step },
        sched,
        norm: Normalization {
            water_scale: header.water_scale,
            calcium_scale: header.calcium_scale,
        },
    })
}
