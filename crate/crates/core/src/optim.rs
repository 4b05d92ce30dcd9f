//! Adaptive moment optimizer with decoupled weight decay, plus global-norm
//! gradient clipping. The update rule is
//!
//! ```text
//! m = b1*m + (1-b1)*g        v = b2*v + (1-b2)*g^2
//! m_hat = m / (1 - b1^t)     v_hat = v / (1 - b2^t)
//! theta = theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta
//! ```
//!
//! The decay term is applied to the parameter directly, never folded into
//! the gradient.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};

use crate::error::{Error, Result};

/// First/second moment accumulators and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl OptimizerState {
    pub fn zeros(len: usize) -> Self {
        OptimizerState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        out.write_u64::<LittleEndian>(self.t)?;
        out.write_u64::<LittleEndian>(self.m.len() as u64)?;
        for x in self.m.iter().chain(self.v.iter()) {
            out.write_f64::<LittleEndian>(*x)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path, expected_len: usize) -> Result<Self> {
        let bytes = fs::read(path)?;
        if bytes.len() < 16 {
            return Err(Error::CorruptStore("optimizer file too short".into()));
        }
        let t = LittleEndian::read_u64(&bytes[0..8]);
        let len = LittleEndian::read_u64(&bytes[8..16]) as usize;
        if len != expected_len {
            return Err(Error::IncompatibleCheckpoint(format!(
                "optimizer state holds {len} parameters, expected {expected_len}"
            )));
        }
        if bytes.len() != 16 + 16 * len {
            return Err(Error::CorruptStore(format!(
                "optimizer file holds {} bytes, expected {}",
                bytes.len(),
                16 + 16 * len
            )));
        }
        let mut m = vec![0.0; len];
        let mut v = vec![0.0; len];
        LittleEndian::read_f64_into(&bytes[16..16 + 8 * len], &mut m);
        LittleEndian::read_f64_into(&bytes[16 + 8 * len..], &mut v);
        Ok(OptimizerState { m, v, t })
    }
}

/// Optimizer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Scales `grad` so its global L2 norm is at most `max_norm`; returns the
/// pre-clip norm.
pub fn clip_global_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grad.iter_mut() {
            *g *= scale;
        }
    }
    norm
}

/// One optimizer step over the flat parameter vector.
pub fn apply_update(
    state: &mut OptimizerState,
    params: &mut [f64],
    grad: &[f64],
    lr: f64,
    hyper: &AdamHyper,
) -> Result<()> {
    if params.len() != state.len() || grad.len() != state.len() {
        return Err(Error::Shape(format!(
            "optimizer state len {} vs params {} vs grad {}",
            state.len(),
            params.len(),
            grad.len()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    state.t += 1;
    // bias corrections recomputed from t, so a reloaded state updates
    // exactly like an uninterrupted one
    let bc1 = 1.0 - hyper.beta1.powi(state.t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] = params[i]
            - lr * m_hat / (v_hat.sqrt() + hyper.epsilon)
            - lr * hyper.weight_decay * params[i];
    }
    Ok(())
}
