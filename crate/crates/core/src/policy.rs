//! The filtering policy: one multi-head self-attention layer with a
//! residual connection, followed by a linear head that scores each input
//! row with a keep probability.
//!
//! Rows are treated as a set: there is no positional encoding, so the
//! policy is permutation-equivariant up to floating-point summation order.
//! The backward pass is derived by hand (logistic head, residual, output
//! projection, per-head softmax attention, Q/K/V projections) and is
//! validated against central finite differences.
//!
//! All math runs in f64. Checkpoints are `policy.json` (tensor table) plus
//! `policy.bin` (little-endian f64s in table order).

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pooling::KeepMask;
use crate::rng::StreamRng;

pub const POLICY_JSON: &str = "policy.json";
pub const POLICY_BIN: &str = "policy.bin";

/// Description of one named tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset_floats: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn tensor_table(dim: usize) -> Vec<TensorSpec> {
    let d = dim;
    let mut specs = Vec::with_capacity(10);
    let mut offset = 0;
    let mut push = |name: &str, shape: Vec<usize>| {
        let len: usize = shape.iter().product();
        specs.push(TensorSpec {
            name: name.to_string(),
            shape,
            offset_floats: offset,
        });
        offset += len;
    };
    push("w_q", vec![d, d]);
    push("w_k", vec![d, d]);
    push("w_v", vec![d, d]);
    push("w_o", vec![d, d]);
    push("b_q", vec![d]);
    push("b_k", vec![d]);
    push("b_v", vec![d]);
    push("b_o", vec![d]);
    push("w_cls", vec![d]);
    push("b_cls", vec![1]);
    specs
}

/// All policy weights as one flat f64 vector with a fixed tensor layout.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    dim: usize,
    heads: usize,
    data: Vec<f64>,
}

impl PolicyParams {
    /// Zero-initialized parameters. With all weights zero the attention
    /// output vanishes and every row scores logit 0 (keep probability 0.5).
    pub fn zeros(dim: usize, heads: usize) -> Result<Self> {
        if dim == 0 || heads == 0 {
            return Err(Error::Config("dim and heads must be positive".into()));
        }
        if !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "heads ({heads}) must divide dim ({dim})"
            )));
        }
        Ok(PolicyParams {
            dim,
            heads,
            data: vec![0.0; Self::param_count(dim)],
        })
    }

    /// Random initialization: projection matrices uniform in
    /// (-sqrt(3/d), +sqrt(3/d)), biases and classifier weights zero, and a
    /// positive classifier bias so the initial keep probability sits near
    /// 0.73 (close to keep-all pooling).
    pub fn init(dim: usize, heads: usize, rng: &mut StreamRng) -> Result<Self> {
        let mut p = Self::zeros(dim, heads)?;
        let scale = (6.0 / (2.0 * dim as f64)).sqrt();
        for i in 0..4 * dim * dim {
            p.data[i] = rng.gen_range(-scale..scale);
        }
        let n = p.data.len();
        p.data[n - 1] = 1.0;
        Ok(p)
    }

    pub fn param_count(dim: usize) -> usize {
        4 * dim * dim + 4 * dim + dim + 1
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_width(&self) -> usize {
        self.dim / self.heads
    }

    pub fn tensor_specs(&self) -> Vec<TensorSpec> {
        tensor_table(self.dim)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn mat(&self, idx: usize) -> ArrayView2<'_, f64> {
        let d = self.dim;
        let off = idx * d * d;
        ArrayView2::from_shape((d, d), &self.data[off..off + d * d]).expect("layout")
    }

    fn vec(&self, idx: usize) -> ArrayView1<'_, f64> {
        let d = self.dim;
        let off = 4 * d * d + idx * d;
        ArrayView1::from_shape(d, &self.data[off..off + d]).expect("layout")
    }

    pub fn w_q(&self) -> ArrayView2<'_, f64> {
        self.mat(0)
    }
    pub fn w_k(&self) -> ArrayView2<'_, f64> {
        self.mat(1)
    }
    pub fn w_v(&self) -> ArrayView2<'_, f64> {
        self.mat(2)
    }
    pub fn w_o(&self) -> ArrayView2<'_, f64> {
        self.mat(3)
    }
    pub fn b_q(&self) -> ArrayView1<'_, f64> {
        self.vec(0)
    }
    pub fn b_k(&self) -> ArrayView1<'_, f64> {
        self.vec(1)
    }
    pub fn b_v(&self) -> ArrayView1<'_, f64> {
        self.vec(2)
    }
    pub fn b_o(&self) -> ArrayView1<'_, f64> {
        self.vec(3)
    }
    pub fn w_cls(&self) -> ArrayView1<'_, f64> {
        self.vec(4)
    }
    pub fn b_cls(&self) -> f64 {
        self.data[self.data.len() - 1]
    }

    pub fn set_b_cls(&mut self, value: f64) {
        let n = self.data.len();
        self.data[n - 1] = value;
    }
}

/// Gradient with the same flat layout as [`PolicyParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGrad {
    dim: usize,
    data: Vec<f64>,
}

impl PolicyGrad {
    pub fn zeros(dim: usize) -> Self {
        PolicyGrad {
            dim,
            data: vec![0.0; PolicyParams::param_count(dim)],
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn add_scaled(&mut self, other: &PolicyGrad, scale: f64) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.data.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Forward activations kept for the backward pass.
#[derive(Debug, Clone)]
struct ForwardCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Per-head attention weights, each n x n with rows summing to one.
    att: Vec<Array2<f64>>,
    /// Head outputs concatenated back to n x d, before the output projection.
    merged: Array2<f64>,
    hidden: Array2<f64>,
}

/// Per-row keep logits and probabilities plus cached activations.
#[derive(Debug, Clone)]
pub struct PolicyOutput {
    pub logits: Array1<f64>,
    pub keep_probs: Array1<f64>,
    cache: ForwardCache,
}

impl PolicyOutput {
    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x) without overflow.
fn softplus(x: f64) -> f64 {
    if x > 36.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Runs the policy over the rows of `x`.
pub fn forward(params: &PolicyParams, x: ArrayView2<'_, f32>) -> Result<PolicyOutput> {
    let (n, d) = (x.nrows(), x.ncols());
    if n == 0 {
        return Err(Error::Shape("policy input has no rows".into()));
    }
    if d != params.dim() {
        return Err(Error::DimensionMismatch {
            expected: params.dim(),
            got: d,
        });
    }
    let hw = params.head_width();
    let scale = 1.0 / (hw as f64).sqrt();

    let x64 = x.mapv(f64::from);
    let mut q = x64.dot(&params.w_q());
    q += &params.b_q();
    let mut k = x64.dot(&params.w_k());
    k += &params.b_k();
    let mut v = x64.dot(&params.w_v());
    v += &params.b_v();

    let mut att = Vec::with_capacity(params.heads());
    let mut merged = Array2::<f64>::zeros((n, d));
    for h in 0..params.heads() {
        let cols = h * hw..(h + 1) * hw;
        let qh = q.slice(s![.., cols.clone()]);
        let kh = k.slice(s![.., cols.clone()]);
        let vh = v.slice(s![.., cols.clone()]);

        let mut scores = qh.dot(&kh.t());
        scores.mapv_inplace(|s| s * scale);
        for mut row in scores.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|s| (s - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|s| s / sum);
        }
        merged.slice_mut(s![.., cols]).assign(&scores.dot(&vh));
        att.push(scores);
    }

    let mut attn_out = merged.dot(&params.w_o());
    attn_out += &params.b_o();
    let hidden = &x64 + &attn_out;
    let logits = hidden.dot(&params.w_cls()) + params.b_cls();
    if !logits.iter().all(|l| l.is_finite()) {
        return Err(Error::Numeric("non-finite policy logits".into()));
    }
    let keep_probs = logits.mapv(sigmoid);

    Ok(PolicyOutput {
        logits,
        keep_probs,
        cache: ForwardCache {
            x: x64,
            q,
            k,
            v,
            att,
            merged,
            hidden,
        },
    })
}

/// Samples an independent Bernoulli keep bit per row and returns the mask
/// together with its log-probability under the policy.
pub fn sample_mask(out: &PolicyOutput, rng: &mut StreamRng) -> (KeepMask, f64) {
    let mut bits = Vec::with_capacity(out.len());
    let mut log_prob = 0.0;
    for (&p, &logit) in out.keep_probs.iter().zip(out.logits.iter()) {
        let keep = rng.uniform() < p;
        bits.push(keep);
        // log sigmoid(l) = -softplus(-l); log(1 - sigmoid(l)) = -softplus(l)
        log_prob -= if keep {
            softplus(-logit)
        } else {
            softplus(logit)
        };
    }
    (KeepMask::new(bits), log_prob)
}

/// Log-probability of a fixed mask under the policy output.
pub fn mask_log_prob(out: &PolicyOutput, mask: &KeepMask) -> Result<f64> {
    if mask.len() != out.len() {
        return Err(Error::Shape(format!(
            "mask length {} does not match {} rows",
            mask.len(),
            out.len()
        )));
    }
    let mut log_prob = 0.0;
    for (i, &logit) in out.logits.iter().enumerate() {
        log_prob -= if mask.bit(i) {
            softplus(-logit)
        } else {
            softplus(logit)
        };
    }
    Ok(log_prob)
}

/// Deterministic mask: keep row t iff keep_probs[t] >= threshold.
pub fn greedy_mask(out: &PolicyOutput, threshold: f64) -> Result<KeepMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!(
            "threshold {threshold} outside (0, 1)"
        )));
    }
    Ok(KeepMask::new(
        out.keep_probs.iter().map(|p| *p >= threshold).collect(),
    ))
}

/// Total Bernoulli entropy of the policy output (summed over rows), in
/// nats.
pub fn total_entropy(out: &PolicyOutput) -> f64 {
    out.logits
        .iter()
        .zip(out.keep_probs.iter())
        // H(p) = softplus(l) - l * p for p = sigmoid(l)
        .map(|(&l, &p)| softplus(l) - l * p)
        .sum::<f64>()
}

/// Gradient of the surrogate loss
/// `L = -(1/G) * sum_g coeff_g * log pi(mask_g | x)`
/// with respect to every policy parameter.
pub fn backward(
    params: &PolicyParams,
    out: &PolicyOutput,
    masks: &[KeepMask],
    coefficients: &[f64],
) -> Result<PolicyGrad> {
    if masks.len() != coefficients.len() {
        return Err(Error::Shape(format!(
            "{} masks but {} coefficients",
            masks.len(),
            coefficients.len()
        )));
    }
    if masks.is_empty() {
        return Err(Error::EmptyInput("backward needs at least one mask".into()));
    }
    let n = out.len();
    let group = masks.len() as f64;
    let mut dlogits = Array1::<f64>::zeros(n);
    for (mask, &c) in masks.iter().zip(coefficients) {
        if mask.len() != n {
            return Err(Error::Shape(format!(
                "mask length {} does not match {} rows",
                mask.len(),
                n
            )));
        }
        // d log pi / d logit_t = a_t - p_t
        for t in 0..n {
            let a = if mask.bit(t) { 1.0 } else { 0.0 };
            dlogits[t] -= c * (a - out.keep_probs[t]) / group;
        }
    }
    backward_logits(params, out, dlogits.view())
}

/// Backpropagates an arbitrary per-row logit gradient through the network.
pub fn backward_logits(
    params: &PolicyParams,
    out: &PolicyOutput,
    dlogits: ArrayView1<'_, f64>,
) -> Result<PolicyGrad> {
    let cache = &out.cache;
    let (n, d) = (cache.x.nrows(), cache.x.ncols());
    if dlogits.len() != n {
        return Err(Error::Shape(format!(
            "logit gradient length {} does not match {} rows",
            dlogits.len(),
            n
        )));
    }
    let heads = params.heads();
    let hw = params.head_width();
    let scale = 1.0 / (hw as f64).sqrt();

    // classifier head
    let g_wcls = cache.hidden.t().dot(&dlogits);
    let g_bcls = dlogits.sum();

    // d hidden = dlogits (outer) w_cls; the residual feeds it to the
    // attention output unchanged
    let dl_col = dlogits.insert_axis(Axis(1));
    let d_attn_out = &dl_col * &params.w_cls();

    // output projection
    let g_wo = cache.merged.t().dot(&d_attn_out);
    let g_bo = d_attn_out.sum_axis(Axis(0));
    let d_merged = d_attn_out.dot(&params.w_o().t());

    // per-head softmax attention
    let mut d_q = Array2::<f64>::zeros((n, d));
    let mut d_k = Array2::<f64>::zeros((n, d));
    let mut d_v = Array2::<f64>::zeros((n, d));
    for h in 0..heads {
        let cols = h * hw..(h + 1) * hw;
        let a = &cache.att[h];
        let qh = cache.q.slice(s![.., cols.clone()]);
        let kh = cache.k.slice(s![.., cols.clone()]);
        let vh = cache.v.slice(s![.., cols.clone()]);
        let d_oh = d_merged.slice(s![.., cols.clone()]);

        d_v.slice_mut(s![.., cols.clone()])
            .assign(&a.t().dot(&d_oh));

        let mut d_scores = d_oh.dot(&vh.t());
        // softmax backward per row: dS = A * (dA - sum(dA * A))
        for (mut ds_row, a_row) in d_scores.rows_mut().into_iter().zip(a.rows()) {
            let inner: f64 = ds_row.iter().zip(a_row.iter()).map(|(g, w)| g * w).sum();
            for (g, w) in ds_row.iter_mut().zip(a_row.iter()) {
                *g = w * (*g - inner);
            }
        }
        d_scores.mapv_inplace(|s| s * scale);

        d_q.slice_mut(s![.., cols.clone()])
            .assign(&d_scores.dot(&kh));
        d_k.slice_mut(s![.., cols]).assign(&d_scores.t().dot(&qh));
    }

    // input projections
    let g_wq = cache.x.t().dot(&d_q);
    let g_bq = d_q.sum_axis(Axis(0));
    let g_wk = cache.x.t().dot(&d_k);
    let g_bk = d_k.sum_axis(Axis(0));
    let g_wv = cache.x.t().dot(&d_v);
    let g_bv = d_v.sum_axis(Axis(0));

    let mut grad = PolicyGrad::zeros(d);
    {
        let dd = d * d;
        let data = grad.data_mut();
        data[..dd].copy_from_slice(g_wq.as_slice().expect("contiguous"));
        data[dd..2 * dd].copy_from_slice(g_wk.as_slice().expect("contiguous"));
        data[2 * dd..3 * dd].copy_from_slice(g_wv.as_slice().expect("contiguous"));
        data[3 * dd..4 * dd].copy_from_slice(g_wo.as_slice().expect("contiguous"));
        let off = 4 * dd;
        data[off..off + d].copy_from_slice(g_bq.as_slice().expect("contiguous"));
        data[off + d..off + 2 * d].copy_from_slice(g_bk.as_slice().expect("contiguous"));
        data[off + 2 * d..off + 3 * d].copy_from_slice(g_bv.as_slice().expect("contiguous"));
        data[off + 3 * d..off + 4 * d].copy_from_slice(g_bo.as_slice().expect("contiguous"));
        data[off + 4 * d..off + 5 * d].copy_from_slice(g_wcls.as_slice().expect("contiguous"));
        data[off + 5 * d] = g_bcls;
    }
    Ok(grad)
}

#[derive(Serialize, Deserialize)]
struct PolicyHeader {
    dim: usize,
    heads: usize,
    tensors: Vec<TensorSpec>,
}

/// Writes `policy.json` + `policy.bin` into `dir`.
pub fn save_policy(params: &PolicyParams, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let header = PolicyHeader {
        dim: params.dim(),
        heads: params.heads(),
        tensors: params.tensor_specs(),
    };
    let mut jf = BufWriter::new(fs::File::create(dir.join(POLICY_JSON))?);
    serde_json::to_writer_pretty(&mut jf, &header)?;
    jf.write_all(b"\n")?;
    jf.flush()?;

    let mut bf = BufWriter::new(fs::File::create(dir.join(POLICY_BIN))?);
    for v in params.data() {
        bf.write_f64::<LittleEndian>(*v)?;
    }
    bf.flush()?;
    Ok(())
}

/// Loads a checkpoint written by [`save_policy`].
pub fn load_policy(dir: &Path) -> Result<PolicyParams> {
    let header: PolicyHeader =
        serde_json::from_reader(BufReader::new(fs::File::open(dir.join(POLICY_JSON))?))?;
    if header.tensors != tensor_table(header.dim) {
        return Err(Error::CorruptStore("policy tensor table mismatch".into()));
    }
    let mut params = PolicyParams::zeros(header.dim, header.heads)?;

    let bytes = fs::read(dir.join(POLICY_BIN))?;
    let expected = 8 * params.data.len();
    if bytes.len() != expected {
        return Err(Error::CorruptStore(format!(
            "policy.bin holds {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let mut cursor = &bytes[..];
    cursor.read_f64_into::<LittleEndian>(&mut params.data)?;
    if !params.data.iter().all(|v| v.is_finite()) {
        return Err(Error::Validation("non-finite policy weight".into()));
    }
    Ok(params)
}
