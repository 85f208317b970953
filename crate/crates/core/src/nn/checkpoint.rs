//! Versioned binary checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "CQMLP1" | u16 version = 1 | u32 layer_count | (layer_count + 1) × u32 dims
//! f64 dropout_rate | u64 epochs_completed
//! parameters: per layer, weights [out × in] row-major then bias, as f64
//! Adam: u64 t | f64 learning_rate | f64 beta1 | f64 beta2 | f64 epsilon
//!       first moments (parameter order) | second moments (parameter order)
//! 8-byte checksum (first 8 bytes of SHA-256 over all preceding bytes)
//! ```

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use super::adam::AdamState;
use super::mlp::{flatten_layers, Dense, MlpModel};
use crate::digest::checksum8;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"CQMLP1";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: MlpModel,
    pub adam: AdamState,
    pub epochs_completed: u64,
}

pub fn encode_checkpoint(model: &MlpModel, adam: &AdamState, epochs_completed: u64) -> Vec<u8> {
    let dims = model.dims();
    let mut buf = Vec::with_capacity(64 + 3 * 8 * model.param_count());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(model.layers().len() as u32).to_le_bytes());
    for d in &dims {
        buf.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    buf.extend_from_slice(&model.dropout_rate().to_le_bytes());
    buf.extend_from_slice(&epochs_completed.to_le_bytes());
    let put = |vals: Vec<f64>, buf: &mut Vec<u8>| {
        for v in vals {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    };
    put(model.flatten(), &mut buf);
    buf.extend_from_slice(&adam.t.to_le_bytes());
    for v in [adam.learning_rate, adam.beta1, adam.beta2, adam.epsilon] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    put(flatten_layers(&adam.m), &mut buf);
    put(flatten_layers(&adam.v), &mut buf);
    let sum = checksum8(&buf);
    buf.extend_from_slice(&sum);
    buf
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &MlpModel, adam: &AdamState, epochs_completed: u64) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(model, adam, epochs_completed);
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Option<[u8; N]> {
        let out = self.bytes.get(self.pos..self.pos + N)?.try_into().ok()?;
        self.pos += N;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Option<u64> {
        self.take().map(u64::from_le_bytes)
    }

    fn f64(&mut self) -> Option<f64> {
        self.take().map(f64::from_le_bytes)
    }

    fn layers(&mut self, dims: &[usize]) -> Option<Vec<Dense>> {
        dims.windows(2)
            .map(|w| {
                let (inp, out) = (w[0], w[1]);
                let weights = (0..inp * out).map(|_| self.f64()).collect::<Option<Vec<_>>>()?;
                let bias = (0..out).map(|_| self.f64()).collect::<Option<Vec<_>>>()?;
                Some(Dense {
                    weights: Array2::from_shape_vec((out, inp), weights).ok()?,
                    bias: Array1::from_vec(bias),
                })
            })
            .collect()
    }
}

/// Reads a checkpoint. The checksum is verified before any field is trusted,
/// so a truncated or damaged file never yields a partial model.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|msg| Error::format(path, msg))
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<Checkpoint, String> {
    if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
        return Err("not a model checkpoint (bad magic)".into());
    }
    if bytes.len() < 8 + 8 {
        return Err("checksum mismatch (file too short)".into());
    }
    let (body, sum) = bytes.split_at(bytes.len() - 8);
    if sum != checksum8(body) {
        return Err("checksum mismatch".into());
    }
    let version = u16::from_le_bytes([body[6], body[7]]);
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }

    let mut r = Reader { bytes: body, pos: 8 };
    let short = || "checkpoint body shorter than its header declares".to_string();
    let n_layers = r.u32().ok_or_else(short)? as usize;
    if n_layers == 0 || n_layers > 64 {
        return Err(format!("implausible layer count {n_layers}"));
    }
    let dims = (0..=n_layers)
        .map(|_| r.u32().map(|d| d as usize))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(short)?;
    let dropout_rate = r.f64().ok_or_else(short)?;
    let epochs_completed = r.u64().ok_or_else(short)?;
    let layers = r.layers(&dims).ok_or_else(short)?;
    let t = r.u64().ok_or_else(short)?;
    let mut hyper = [0.0; 4];
    for h in &mut hyper {
        *h = r.f64().ok_or_else(short)?;
    }
    let m = r.layers(&dims).ok_or_else(short)?;
    let v = r.layers(&dims).ok_or_else(short)?;
    if r.pos != body.len() {
        return Err(format!("{} unexpected bytes before checksum", body.len() - r.pos));
    }

    let model = MlpModel::from_layers(layers, dropout_rate).map_err(|e| e.to_string())?;
    let [learning_rate, beta1, beta2, epsilon] = hyper;
    Ok(Checkpoint {
        model,
        adam: AdamState {
            m,
            v,
            t,
            learning_rate,
            beta1,
            beta2,
            epsilon,
        },
        epochs_completed,
    })
}
