//! Central finite-difference verification of the policy backward pass.
//!
//! The loss probed here is the same surrogate the trainer optimizes:
//! `L = -(1/G) * sum_g coeff_g * log pi(mask_g | x)`. Every flat parameter
//! is perturbed by +/- epsilon and the resulting directional derivative is
//! compared against the analytic gradient, tensor by tensor.

use ndarray::Array2;
use rand::Rng;

use crate::error::Result;
use crate::policy::{self, PolicyParams};
use crate::pooling::KeepMask;
use crate::rng::StreamRng;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub dim: usize,
    pub heads: usize,
    pub rows: usize,
    pub num_masks: usize,
    pub epsilon: f64,
    pub seed: u64,
    /// Test hook: perturb one analytic gradient entry so the check fails.
    pub corrupt: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            dim: 8,
            heads: 2,
            rows: 6,
            num_masks: 3,
            epsilon: 1e-5,
            seed: 42,
            corrupt: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error across all parameters.
    pub max_rel_error: f64,
    /// Worst relative error per tensor, in layout order.
    pub per_tensor: Vec<(String, f64)>,
}

fn surrogate_loss(
    params: &PolicyParams,
    x: &Array2<f32>,
    masks: &[KeepMask],
    coeffs: &[f64],
) -> Result<f64> {
    let out = policy::forward(params, x.view())?;
    let mut loss = 0.0;
    for (mask, &c) in masks.iter().zip(coeffs) {
        loss -= c * policy::mask_log_prob(&out, mask)?;
    }
    Ok(loss / masks.len() as f64)
}

/// Runs the check and reports per-tensor worst-case relative errors.
pub fn run(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut init_rng = StreamRng::derive(cfg.seed, "gradcheck.params", &[]);
    let mut params = PolicyParams::init(cfg.dim, cfg.heads, &mut init_rng)?;
    // give the untouched-by-init tensors nonzero values too
    let count = params.data().len();
    for (i, v) in params.data_mut().iter_mut().enumerate() {
        if i >= 4 * cfg.dim * cfg.dim {
            *v = 0.3 * (init_rng.uniform() - 0.5) + if i == count - 1 { 0.2 } else { 0.0 };
        }
    }

    let mut data_rng = StreamRng::derive(cfg.seed, "gradcheck.input", &[]);
    let x = Array2::from_shape_fn((cfg.rows, cfg.dim), |_| {
        (data_rng.uniform() * 2.0 - 1.0) as f32
    });

    let mut mask_rng = StreamRng::derive(cfg.seed, "gradcheck.masks", &[]);
    let masks: Vec<KeepMask> = (0..cfg.num_masks)
        .map(|_| KeepMask::new((0..cfg.rows).map(|_| mask_rng.uniform() < 0.5).collect()))
        .collect();
    let coeffs: Vec<f64> = (0..cfg.num_masks)
        .map(|_| mask_rng.gen_range(-1.0..1.0))
        .collect();

    let out = policy::forward(&params, x.view())?;
    let mut grad = policy::backward(&params, &out, &masks, &coeffs)?;
    if cfg.corrupt {
        grad.data_mut()[0] += 1e-3;
    }

    let specs = params.tensor_specs();
    let mut per_tensor = Vec::with_capacity(specs.len());
    let mut max_rel = 0.0f64;
    for spec in &specs {
        let mut tensor_worst = 0.0f64;
        for i in spec.offset_floats..spec.offset_floats + spec.len() {
            let saved = params.data()[i];
            params.data_mut()[i] = saved + cfg.epsilon;
            let plus = surrogate_loss(&params, &x, &masks, &coeffs)?;
            params.data_mut()[i] = saved - cfg.epsilon;
            let minus = surrogate_loss(&params, &x, &masks, &coeffs)?;
            params.data_mut()[i] = saved;

            let fd = (plus - minus) / (2.0 * cfg.epsilon);
            let analytic = grad.data()[i];
            let rel = (analytic - fd).abs() / fd.abs().max(1e-6);
            tensor_worst = tensor_worst.max(rel);
        }
        max_rel = max_rel.max(tensor_worst);
        per_tensor.push((spec.name.clone(), tensor_worst));
    }

    Ok(GradCheckReport {
        max_rel_error: max_rel,
        per_tensor,
    })
}
