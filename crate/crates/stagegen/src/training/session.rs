//! Shared session plumbing: rng state capture and parameter/optimizer
//! hydration between live networks and checkpoint blobs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{NamedBuffers, NamedParams};
use crate::ndtensor::Adam;

use super::checkpoint::{Checkpoint, OptimBlob, TensorBlob};

/// Serializable ChaCha state: seed, stream, and word position capture the
/// generator exactly, so a resumed run continues the same draw sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct RngState {
    seed_hex: String,
    stream: u64,
    word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed_hex: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        if self.seed_hex.len() != 64 {
            return Err(Error::Checkpoint("rng seed must be 32 bytes".into()));
        }
        let mut seed = [0u8; 32];
        for (i, chunk) in self.seed_hex.as_bytes().chunks_exact(2).enumerate() {
            let s = std::str::from_utf8(chunk).map_err(|_| bad_rng())?;
            seed[i] = u8::from_str_radix(s, 16).map_err(|_| bad_rng())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        let pos: u128 = self.word_pos.parse().map_err(|_| bad_rng())?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

fn bad_rng() -> Error {
    Error::Checkpoint("malformed rng state".into())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub(crate) struct Counters {
    pub step: u64,
    pub epoch: u64,
    pub d_steps: u64,
    pub g_steps: u64,
}

pub(crate) fn push_params(ckpt: &mut Checkpoint, params: &NamedParams<f32>) {
    for (name, t) in params {
        ckpt.tensors.push(TensorBlob {
            name: name.clone(),
            dims: t.shape().iter().map(|&d| d as u64).collect(),
            data: t.to_vec(),
        });
    }
}

pub(crate) fn push_buffers(ckpt: &mut Checkpoint, buffers: &NamedBuffers<f32>) {
    for (name, buf) in buffers {
        let data = buf.borrow().clone();
        ckpt.tensors.push(TensorBlob {
            name: name.clone(),
            dims: vec![data.len() as u64],
            data,
        });
    }
}

pub(crate) fn push_optim(ckpt: &mut Checkpoint, prefix: &str, params: &NamedParams<f32>, opt: &Adam<f32>) {
    debug_assert_eq!(params.len(), opt.states.len());
    for ((name, _), st) in params.iter().zip(&opt.states) {
        ckpt.optim.push(OptimBlob {
            name: format!("{prefix}.{name}"),
            first: st.first_moment.clone(),
            second: st.second_moment.clone(),
            step: st.step,
        });
    }
}

/// Copies checkpoint tensors into live parameters by name, strictly: every
/// parameter must be present with matching dims. Consumed names are recorded
/// so the caller can detect stray blobs.
pub(crate) fn restore_params(
    ckpt: &Checkpoint,
    params: &NamedParams<f32>,
    consumed: &mut std::collections::HashSet<String>,
) -> Result<()> {
    for (name, t) in params {
        let blob = ckpt
            .tensor(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))?;
        let dims: Vec<u64> = t.shape().iter().map(|&d| d as u64).collect();
        if blob.dims != dims {
            return Err(Error::Checkpoint(format!(
                "tensor {name:?}: checkpoint dims {:?} != model dims {dims:?}",
                blob.dims
            )));
        }
        t.data_mut().copy_from_slice(&blob.data);
        consumed.insert(name.clone());
    }
    Ok(())
}

pub(crate) fn restore_buffers(
    ckpt: &Checkpoint,
    buffers: &NamedBuffers<f32>,
    consumed: &mut std::collections::HashSet<String>,
) -> Result<()> {
    for (name, buf) in buffers {
        let blob = ckpt
            .tensor(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing buffer {name:?}")))?;
        let mut dst = buf.borrow_mut();
        if blob.data.len() != dst.len() {
            return Err(Error::Checkpoint(format!(
                "buffer {name:?}: length {} != {}",
                blob.data.len(),
                dst.len()
            )));
        }
        dst.copy_from_slice(&blob.data);
        consumed.insert(name.clone());
    }
    Ok(())
}

pub(crate) fn expect_all_consumed(
    ckpt: &Checkpoint,
    consumed: &std::collections::HashSet<String>,
) -> Result<()> {
    for t in &ckpt.tensors {
        if !consumed.contains(&t.name) {
            return Err(Error::Checkpoint(format!(
                "checkpoint tensor {:?} does not match any model parameter",
                t.name
            )));
        }
    }
    Ok(())
}

pub(crate) fn restore_optim(
    ckpt: &Checkpoint,
    prefix: &str,
    params: &NamedParams<f32>,
    opt: &mut Adam<f32>,
) -> Result<()> {
    for ((name, t), st) in params.iter().zip(&mut opt.states) {
        let full = format!("{prefix}.{name}");
        let blob = ckpt
            .optim
            .iter()
            .find(|o| o.name == full)
            .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state {full:?}")))?;
        if blob.first.len() != t.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer state {full:?}: length {} != parameter length {}",
                blob.first.len(),
                t.len()
            )));
        }
        st.first_moment = blob.first.clone();
        st.second_moment = blob.second.clone();
        st.step = blob.step;
    }
    Ok(())
}
