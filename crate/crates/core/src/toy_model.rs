//! One-layer, one-head Transformer classifier for the retrieval task.
//!
//! The forward pass follows the study's stated layer recipe literally:
//! a learnable CLS token is prepended, learnable positional embeddings are
//! added, queries/keys/values are projected from the post-positional input
//! (not the LayerNorm output), and both later residual connections add that
//! same input back:
//!
//! ```text
//! X  <- [CLS; x] + P
//! Y  <- LayerNorm1(X)
//! Q, K, V <- X Wq, X Wk, X Wv
//! Y  <- Y + (Attention(Q, K, V)) Wo
//! Y  <- X + LayerNorm2(Y)
//! Y  <- X + MLP(Y)
//! logits <- classifier(Y_CLS)
//! ```
//!
//! This wiring is unconventional; [`ResidualWiring::Conventional`] switches
//! to a standard pre-norm block and is off by default.

use crate::attention::{
    attend, attend_backward, AttentionOutput, AttentionVariant, ScaleGrads, VariantKind,
};
use crate::error::CoreError;
use crate::matrix::Matrix;
use crate::ops::{
    cross_entropy, gelu, gelu_prime, gelu_prime_cached, gelu_with_tanh, layer_norm,
    layer_norm_backward, LayerNormOut, EPS_LAYER_NORM,
};
use crate::rng::Rng;
use crate::toy_data::Sample;
use std::path::Path;
use thiserror::Error;

/// Embedding width; equals the toy-data token dimension.
pub const MODEL_DIM: usize = 20;
/// MLP hidden width; the study uses the embedding width here too.
pub const MLP_DIM: usize = 20;
pub const NUM_CLASSES: usize = 10;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidualWiring {
    /// Residuals exactly as printed in the study's layer recipe.
    Printed,
    /// Standard pre-norm Transformer block.
    Conventional,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
    pub mlp_w1: Matrix,
    pub mlp_b1: Vec<f64>,
    pub mlp_w2: Matrix,
    pub mlp_b2: Vec<f64>,
    /// `(N + 1) x D`: row 0 belongs to the CLS position.
    pub pos_emb: Matrix,
    pub cls_token: Vec<f64>,
    pub classifier_w: Matrix,
    pub classifier_b: Vec<f64>,
    /// Attention formulation; owns its learnable scales when it has any.
    pub variant: AttentionVariant,
    pub wiring: ResidualWiring,
}

/// Everything the backward pass needs from one forward evaluation.
pub struct ForwardCache {
    pub x0: Matrix,
    ln1: LayerNormOut,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    pub attn: AttentionOutput,
    ln2: LayerNormOut,
    mlp_in: Matrix,
    h1: Matrix,
    act: Matrix,
    y4: Matrix,
    pub logits: Vec<f64>,
}

/// Gradients for every learnable field of [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
    pub mlp_w1: Matrix,
    pub mlp_b1: Vec<f64>,
    pub mlp_w2: Matrix,
    pub mlp_b2: Vec<f64>,
    pub pos_emb: Matrix,
    pub cls_token: Vec<f64>,
    pub classifier_w: Matrix,
    pub classifier_b: Vec<f64>,
    pub scales: ScaleGrads,
}

/// Initialize a model for sequences of `seq_len` tokens: weight matrices and
/// positional embeddings `N(0, 0.02^2)`, biases and the CLS token zero,
/// layer-norm gains one, variant scales at their default initialization.
pub fn init_params(kind: VariantKind, seq_len: usize, rng: &mut Rng) -> ModelParams {
    let d = MODEL_DIM;
    ModelParams {
        w_q: Matrix::randn(d, d, INIT_STD, rng),
        w_k: Matrix::randn(d, d, INIT_STD, rng),
        w_v: Matrix::randn(d, d, INIT_STD, rng),
        w_o: Matrix::randn(d, d, INIT_STD, rng),
        ln1: LayerNormParams {
            gain: vec![1.0; d],
            bias: vec![0.0; d],
        },
        ln2: LayerNormParams {
            gain: vec![1.0; d],
            bias: vec![0.0; d],
        },
        mlp_w1: Matrix::randn(d, MLP_DIM, INIT_STD, rng),
        mlp_b1: vec![0.0; MLP_DIM],
        mlp_w2: Matrix::randn(MLP_DIM, d, INIT_STD, rng),
        mlp_b2: vec![0.0; d],
        pos_emb: Matrix::randn(seq_len + 1, d, INIT_STD, rng),
        cls_token: vec![0.0; d],
        classifier_w: Matrix::randn(d, NUM_CLASSES, INIT_STD, rng),
        classifier_b: vec![0.0; NUM_CLASSES],
        variant: kind.instantiate(d),
        wiring: ResidualWiring::Printed,
    }
}

fn add_row_broadcast(m: &Matrix, bias: &[f64]) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        for (v, &b) in out.row_mut(i).iter_mut().zip(bias) {
            *v += b;
        }
    }
    out
}

fn col_sums(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (o, &v) in out.iter_mut().zip(m.row(i)) {
            *o += v;
        }
    }
    out
}

/// Forward pass on one sequence `x` (`N x D`). Returns the class logits
/// read from the CLS position and the cache for [`backward`].
pub fn forward(params: &ModelParams, x: &Matrix) -> Result<(Vec<f64>, ForwardCache), CoreError> {
    let d = MODEL_DIM;
    if x.cols() != d {
        return Err(CoreError::shape(
            "toy_model::forward",
            format!("input cols {} vs model dim {d}", x.cols()),
        ));
    }
    if x.rows() + 1 != params.pos_emb.rows() {
        return Err(CoreError::shape(
            "toy_model::forward",
            format!(
                "sequence length {} vs positional table for {}",
                x.rows(),
                params.pos_emb.rows() - 1
            ),
        ));
    }

    // Prepend CLS, add positional embeddings.
    let mut x0 = Matrix::zeros(x.rows() + 1, d);
    x0.row_mut(0).copy_from_slice(&params.cls_token);
    for i in 0..x.rows() {
        x0.row_mut(i + 1).copy_from_slice(x.row(i));
    }
    x0.add_assign(&params.pos_emb)?;

    let ln1 = layer_norm(&x0, &params.ln1.gain, &params.ln1.bias, EPS_LAYER_NORM)?;
    let qkv_src = match params.wiring {
        ResidualWiring::Printed => &x0,
        ResidualWiring::Conventional => &ln1.y,
    };
    let q = qkv_src.matmul(&params.w_q)?;
    let k = qkv_src.matmul(&params.w_k)?;
    let v = qkv_src.matmul(&params.w_v)?;
    let attn = attend(&params.variant, &q, &k, &v)?;
    let o = attn.z.matmul(&params.w_o)?;

    let y2 = match params.wiring {
        ResidualWiring::Printed => ln1.y.add(&o)?,
        ResidualWiring::Conventional => x0.add(&o)?,
    };
    let ln2 = layer_norm(&y2, &params.ln2.gain, &params.ln2.bias, EPS_LAYER_NORM)?;
    let mlp_in = match params.wiring {
        ResidualWiring::Printed => x0.add(&ln2.y)?,
        ResidualWiring::Conventional => ln2.y.clone(),
    };
    let h1 = add_row_broadcast(&mlp_in.matmul(&params.mlp_w1)?, &params.mlp_b1);
    let act = h1.map(gelu);
    let m_out = add_row_broadcast(&act.matmul(&params.mlp_w2)?, &params.mlp_b2);
    let y4 = match params.wiring {
        ResidualWiring::Printed => x0.add(&m_out)?,
        ResidualWiring::Conventional => y2.add(&m_out)?,
    };

    let cls_row = y4.row(0);
    let mut logits = params.classifier_b.clone();
    for (j, &h) in cls_row.iter().enumerate() {
        for (l, &w) in logits.iter_mut().zip(params.classifier_w.row(j)) {
            *l += h * w;
        }
    }

    let cache = ForwardCache {
        x0,
        ln1,
        q,
        k,
        v,
        attn,
        ln2,
        mlp_in,
        h1,
        act,
        y4,
        logits: logits.clone(),
    };
    Ok((logits, cache))
}

/// Exact analytic gradients for every parameter given the gradient of a
/// scalar loss with respect to the class logits.
pub fn backward(
    params: &ModelParams,
    cache: &ForwardCache,
    grad_logits: &[f64],
) -> Result<ParamGrads, CoreError> {
    if grad_logits.len() != NUM_CLASSES {
        return Err(CoreError::shape(
            "toy_model::backward",
            format!("grad_logits length {}", grad_logits.len()),
        ));
    }
    let rows = cache.x0.rows();
    if params.pos_emb.rows() != rows {
        return Err(CoreError::shape(
            "toy_model::backward",
            "cache does not match params".to_string(),
        ));
    }
    let d = MODEL_DIM;

    // Classifier head.
    let cls_row = cache.y4.row(0);
    let mut d_classifier_w = Matrix::zeros(d, NUM_CLASSES);
    for j in 0..d {
        for (g, &gl) in d_classifier_w.row_mut(j).iter_mut().zip(grad_logits) {
            *g = cls_row[j] * gl;
        }
    }
    let d_classifier_b = grad_logits.to_vec();
    let mut dy4 = Matrix::zeros(rows, d);
    for (j, slot) in dy4.row_mut(0).iter_mut().enumerate() {
        *slot = params
            .classifier_w
            .row(j)
            .iter()
            .zip(grad_logits)
            .map(|(&w, &g)| w * g)
            .sum();
    }

    // MLP, from y4 = residual + MLP(mlp_in).
    let dm_out = dy4.clone();
    let d_mlp_b2 = col_sums(&dm_out);
    let d_mlp_w2 = cache.act.matmul_tn(&dm_out)?;
    let dact = dm_out.matmul_nt(&params.mlp_w2)?;
    let mut dh1 = dact;
    for (g, &h) in dh1.data_mut().iter_mut().zip(cache.h1.data()) {
        *g *= gelu_prime(h);
    }
    let d_mlp_b1 = col_sums(&dh1);
    let d_mlp_w1 = cache.mlp_in.matmul_tn(&dh1)?;
    let d_mlp_in = dh1.matmul_nt(&params.mlp_w1)?;

    let mut dx0 = Matrix::zeros(rows, d);
    let dy2;
    let mut dy1 = Matrix::zeros(rows, d);
    let (d_ln2_gain, d_ln2_bias);

    match params.wiring {
        ResidualWiring::Printed => {
            // y4 = x0 + m_out; mlp_in = x0 + ln2(y2); y2 = ln1(x0) + o.
            dx0.add_assign(&dy4)?;
            dx0.add_assign(&d_mlp_in)?;
            let (dy2_ln, g2, b2) = layer_norm_backward(&cache.ln2, &params.ln2.gain, &d_mlp_in);
            d_ln2_gain = g2;
            d_ln2_bias = b2;
            dy2 = dy2_ln;
            dy1.add_assign(&dy2)?;
        }
        ResidualWiring::Conventional => {
            // y4 = y2 + m_out; mlp_in = ln2(y2); y2 = x0 + o.
            let (dy2_ln, g2, b2) = layer_norm_backward(&cache.ln2, &params.ln2.gain, &d_mlp_in);
            d_ln2_gain = g2;
            d_ln2_bias = b2;
            let mut acc = dy4.clone();
            acc.add_assign(&dy2_ln)?;
            dy2 = acc;
            dx0.add_assign(&dy2)?;
        }
    }

    // Attention block: y2's non-residual term is o = z * w_o.
    let d_o = &dy2;
    let d_w_o = cache.attn.z.matmul_tn(d_o)?;
    let dz = d_o.matmul_nt(&params.w_o)?;
    let attn_grads = attend_backward(
        &params.variant,
        &cache.q,
        &cache.k,
        &cache.v,
        &cache.attn,
        &dz,
    )?;

    let qkv_src = match params.wiring {
        ResidualWiring::Printed => &cache.x0,
        ResidualWiring::Conventional => &cache.ln1.y,
    };
    let d_w_q = qkv_src.matmul_tn(&attn_grads.dq)?;
    let d_w_k = qkv_src.matmul_tn(&attn_grads.dk)?;
    let d_w_v = qkv_src.matmul_tn(&attn_grads.dv)?;
    let mut d_qkv_src = attn_grads.dq.matmul_nt(&params.w_q)?;
    d_qkv_src.add_assign(&attn_grads.dk.matmul_nt(&params.w_k)?)?;
    d_qkv_src.add_assign(&attn_grads.dv.matmul_nt(&params.w_v)?)?;

    match params.wiring {
        ResidualWiring::Printed => {
            dx0.add_assign(&d_qkv_src)?;
        }
        ResidualWiring::Conventional => {
            dy1.add_assign(&d_qkv_src)?;
        }
    }

    let (dx0_ln, d_ln1_gain, d_ln1_bias) = layer_norm_backward(&cache.ln1, &params.ln1.gain, &dy1);
    dx0.add_assign(&dx0_ln)?;

    let d_pos_emb = dx0.clone();
    let d_cls = dx0.row(0).to_vec();

    Ok(ParamGrads {
        w_q: d_w_q,
        w_k: d_w_k,
        w_v: d_w_v,
        w_o: d_w_o,
        ln1_gain: d_ln1_gain,
        ln1_bias: d_ln1_bias,
        ln2_gain: d_ln2_gain,
        ln2_bias: d_ln2_bias,
        mlp_w1: d_mlp_w1,
        mlp_b1: d_mlp_b1,
        mlp_w2: d_mlp_w2,
        mlp_b2: d_mlp_b2,
        pos_emb: d_pos_emb,
        cls_token: d_cls,
        classifier_w: d_classifier_w,
        classifier_b: d_classifier_b,
        scales: attn_grads.dscales,
    })
}

impl ModelParams {
    /// Flatten every learnable value into one vector. Order: w_q, w_k, w_v,
    /// w_o, ln1 gain/bias, ln2 gain/bias, mlp_w1, mlp_b1, mlp_w2, mlp_b2,
    /// pos_emb, cls_token, classifier_w, classifier_b, variant scales.
    /// The elliptical metric is supplied externally and is not included.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        out.extend_from_slice(self.w_q.data());
        out.extend_from_slice(self.w_k.data());
        out.extend_from_slice(self.w_v.data());
        out.extend_from_slice(self.w_o.data());
        out.extend_from_slice(&self.ln1.gain);
        out.extend_from_slice(&self.ln1.bias);
        out.extend_from_slice(&self.ln2.gain);
        out.extend_from_slice(&self.ln2.bias);
        out.extend_from_slice(self.mlp_w1.data());
        out.extend_from_slice(&self.mlp_b1);
        out.extend_from_slice(self.mlp_w2.data());
        out.extend_from_slice(&self.mlp_b2);
        out.extend_from_slice(self.pos_emb.data());
        out.extend_from_slice(&self.cls_token);
        out.extend_from_slice(self.classifier_w.data());
        out.extend_from_slice(&self.classifier_b);
        out.extend(self.variant.learnable_scales());
        out
    }

    /// Overwrite all learnable values from a flat vector produced by
    /// [`flatten`](Self::flatten).
    pub fn set_from_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "flat parameter length");
        let mut off = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&flat[off..off + dst.len()]);
            off += dst.len();
        };
        take(self.w_q.data_mut());
        take(self.w_k.data_mut());
        take(self.w_v.data_mut());
        take(self.w_o.data_mut());
        take(&mut self.ln1.gain);
        take(&mut self.ln1.bias);
        take(&mut self.ln2.gain);
        take(&mut self.ln2.bias);
        take(self.mlp_w1.data_mut());
        take(&mut self.mlp_b1);
        take(self.mlp_w2.data_mut());
        take(&mut self.mlp_b2);
        take(self.pos_emb.data_mut());
        take(&mut self.cls_token);
        take(self.classifier_w.data_mut());
        take(&mut self.classifier_b);
        let n_scales = self.variant.num_learnable_scales();
        self.variant.set_learnable_scales(&flat[off..off + n_scales]);
        off += n_scales;
        assert_eq!(off, flat.len());
    }

    pub fn num_params(&self) -> usize {
        let d = MODEL_DIM;
        4 * d * d
            + 4 * d
            + d * MLP_DIM
            + MLP_DIM
            + MLP_DIM * d
            + d
            + self.pos_emb.rows() * d
            + d
            + d * NUM_CLASSES
            + NUM_CLASSES
            + self.variant.num_learnable_scales()
    }
}

impl ParamGrads {
    /// Flatten in the same order as [`ModelParams::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(self.w_q.data());
        out.extend_from_slice(self.w_k.data());
        out.extend_from_slice(self.w_v.data());
        out.extend_from_slice(self.w_o.data());
        out.extend_from_slice(&self.ln1_gain);
        out.extend_from_slice(&self.ln1_bias);
        out.extend_from_slice(&self.ln2_gain);
        out.extend_from_slice(&self.ln2_bias);
        out.extend_from_slice(self.mlp_w1.data());
        out.extend_from_slice(&self.mlp_b1);
        out.extend_from_slice(self.mlp_w2.data());
        out.extend_from_slice(&self.mlp_b2);
        out.extend_from_slice(self.pos_emb.data());
        out.extend_from_slice(&self.cls_token);
        out.extend_from_slice(self.classifier_w.data());
        out.extend_from_slice(&self.classifier_b);
        out.extend(self.scales.flatten());
        out
    }
}

/// Per-token-category norm telemetry accumulated over forward passes.
/// Categories partition the non-CLS tokens: the answer token of a biased
/// sample, the answer token of an unbiased sample, and everything else.
#[derive(Debug, Clone)]
pub struct DiagnosticsAccum {
    pub sum_knorm_biased_ans: f64,
    pub n_biased_ans: usize,
    pub sum_knorm_unbiased_ans: f64,
    pub n_unbiased_ans: usize,
    pub sum_knorm_non_ans: f64,
    pub n_non_ans: usize,
    pub sum_cls_qnorm: f64,
    pub sum_cls_entropy: f64,
    pub max_logit: f64,
    pub n_samples: usize,
}

impl Default for DiagnosticsAccum {
    fn default() -> Self {
        DiagnosticsAccum {
            sum_knorm_biased_ans: 0.0,
            n_biased_ans: 0,
            sum_knorm_unbiased_ans: 0.0,
            n_unbiased_ans: 0,
            sum_knorm_non_ans: 0.0,
            n_non_ans: 0,
            sum_cls_qnorm: 0.0,
            sum_cls_entropy: 0.0,
            max_logit: f64::NEG_INFINITY,
            n_samples: 0,
        }
    }
}

impl DiagnosticsAccum {
    pub fn absorb(&mut self, sample: &Sample, attn: &AttentionOutput) {
        let diag = &attn.diagnostics;
        // Token 0 is CLS; sample row i sits at position i + 1.
        for (i, &kn) in diag.key_norms.iter().enumerate().skip(1) {
            if i - 1 == sample.answer_pos {
                if sample.biased {
                    self.sum_knorm_biased_ans += kn;
                    self.n_biased_ans += 1;
                } else {
                    self.sum_knorm_unbiased_ans += kn;
                    self.n_unbiased_ans += 1;
                }
            } else {
                self.sum_knorm_non_ans += kn;
                self.n_non_ans += 1;
            }
        }
        self.sum_cls_qnorm += diag.query_norms[0];
        self.sum_cls_entropy += diag.row_entropy[0];
        if diag.max_logit > self.max_logit {
            self.max_logit = diag.max_logit;
        }
        self.n_samples += 1;
    }

    pub fn merge(&mut self, other: &DiagnosticsAccum) {
        self.sum_knorm_biased_ans += other.sum_knorm_biased_ans;
        self.n_biased_ans += other.n_biased_ans;
        self.sum_knorm_unbiased_ans += other.sum_knorm_unbiased_ans;
        self.n_unbiased_ans += other.n_unbiased_ans;
        self.sum_knorm_non_ans += other.sum_knorm_non_ans;
        self.n_non_ans += other.n_non_ans;
        self.sum_cls_qnorm += other.sum_cls_qnorm;
        self.sum_cls_entropy += other.sum_cls_entropy;
        if other.max_logit > self.max_logit {
            self.max_logit = other.max_logit;
        }
        self.n_samples += other.n_samples;
    }

    fn mean(sum: f64, n: usize) -> f64 {
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    pub fn mean_knorm_biased_ans(&self) -> f64 {
        Self::mean(self.sum_knorm_biased_ans, self.n_biased_ans)
    }

    pub fn mean_knorm_unbiased_ans(&self) -> f64 {
        Self::mean(self.sum_knorm_unbiased_ans, self.n_unbiased_ans)
    }

    pub fn mean_knorm_non_ans(&self) -> f64 {
        Self::mean(self.sum_knorm_non_ans, self.n_non_ans)
    }

    pub fn mean_cls_qnorm(&self) -> f64 {
        Self::mean(self.sum_cls_qnorm, self.n_samples)
    }

    pub fn mean_cls_entropy(&self) -> f64 {
        Self::mean(self.sum_cls_entropy, self.n_samples)
    }
}

/// Result of one batch evaluation: mean loss, mean gradients, accuracy,
/// and aggregated attention diagnostics.
pub struct BatchResult {
    pub loss: f64,
    pub grads: ParamGrads,
    pub accuracy: f64,
    pub diagnostics: DiagnosticsAccum,
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy loss and gradients over a batch of samples.
///
/// Samples are processed with their rows stacked into one tall matrix, so
/// the row-parallel operations (projections, layer norms, MLP) run as
/// single products while attention runs per sample. Row-wise operations
/// are row-independent and the weight-gradient sums visit rows in the same
/// sample-major order, so the results equal the per-sample reference path
/// ([`loss_and_grad_unbatched`]) exactly for a batch of one and up to
/// summation rounding otherwise.
pub fn loss_and_grad(params: &ModelParams, batch: &[Sample]) -> Result<BatchResult, CoreError> {
    if batch.is_empty() {
        return Err(CoreError::invalid("loss_and_grad", "empty batch"));
    }
    match params.wiring {
        ResidualWiring::Printed => loss_and_grad_batched(params, batch),
        // The conventional-wiring switch is exercised rarely; it takes the
        // reference path.
        ResidualWiring::Conventional => loss_and_grad_unbatched(params, batch),
    }
}

/// Per-sample reference implementation of [`loss_and_grad`].
pub fn loss_and_grad_unbatched(
    params: &ModelParams,
    batch: &[Sample],
) -> Result<BatchResult, CoreError> {
    if batch.is_empty() {
        return Err(CoreError::invalid("loss_and_grad", "empty batch"));
    }
    let mut total_loss = 0.0;
    let mut correct = 0usize;
    let mut diagnostics = DiagnosticsAccum::default();
    let mut grads: Option<ParamGrads> = None;
    let mut grad_acc: Vec<f64> = Vec::new();

    for sample in batch {
        let (logits, cache) = forward(params, &sample.x)?;
        let (loss, grad_logits) = cross_entropy(&logits, sample.label)?;
        total_loss += loss;
        if argmax(&logits) == sample.label {
            correct += 1;
        }
        diagnostics.absorb(sample, &cache.attn);
        let g = backward(params, &cache, &grad_logits)?;
        match &mut grads {
            None => {
                grad_acc = g.flatten();
                grads = Some(g);
            }
            Some(_) => {
                for (acc, v) in grad_acc.iter_mut().zip(g.flatten()) {
                    *acc += v;
                }
            }
        }
    }

    let scale = 1.0 / batch.len() as f64;
    for v in grad_acc.iter_mut() {
        *v *= scale;
    }
    // Rebuild the structured gradients from the averaged flat vector.
    let mut grads = grads.expect("non-empty batch");
    unflatten_grads_into(&mut grads, &grad_acc);

    Ok(BatchResult {
        loss: total_loss * scale,
        grads,
        accuracy: correct as f64 / batch.len() as f64,
        diagnostics,
    })
}

/// Per-sample attention state kept from the batched forward pass.
struct SampleAttn {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    out: AttentionOutput,
}

struct BatchForward {
    x0_all: Matrix,
    ln1_all: LayerNormOut,
    attn: Vec<SampleAttn>,
    z_all: Matrix,
    ln2_all: LayerNormOut,
    mlp_in_all: Matrix,
    h1_all: Matrix,
    tanh_all: Matrix,
    act_all: Matrix,
    y4_all: Matrix,
    logits: Vec<Vec<f64>>,
}

fn copy_block(src: &Matrix, start_row: usize, rows: usize) -> Matrix {
    let cols = src.cols();
    Matrix::from_vec(
        rows,
        cols,
        src.data()[start_row * cols..(start_row + rows) * cols].to_vec(),
    )
    .expect("contiguous block")
}

fn batched_forward(params: &ModelParams, batch: &[Sample]) -> Result<BatchForward, CoreError> {
    let d = MODEL_DIM;
    let m = params.pos_emb.rows(); // rows per sample including CLS
    for sample in batch {
        if sample.x.cols() != d || sample.x.rows() + 1 != m {
            return Err(CoreError::shape(
                "loss_and_grad",
                format!(
                    "sample {}x{} vs model for {} tokens",
                    sample.x.rows(),
                    sample.x.cols(),
                    m - 1
                ),
            ));
        }
    }
    let b = batch.len();
    let x0_all = stack_inputs(params, batch);
    let ln1_all = layer_norm(&x0_all, &params.ln1.gain, &params.ln1.bias, EPS_LAYER_NORM)?;
    let q_all = x0_all.matmul(&params.w_q)?;
    let k_all = x0_all.matmul(&params.w_k)?;
    let v_all = x0_all.matmul(&params.w_v)?;

    let mut z_all = Matrix::zeros(b * m, d);
    let mut attn = Vec::with_capacity(b);
    for s in 0..b {
        let q = copy_block(&q_all, s * m, m);
        let k = copy_block(&k_all, s * m, m);
        let v = copy_block(&v_all, s * m, m);
        let out = attend(&params.variant, &q, &k, &v)?;
        for r in 0..m {
            z_all.row_mut(s * m + r).copy_from_slice(out.z.row(r));
        }
        attn.push(SampleAttn { q, k, v, out });
    }

    let o_all = z_all.matmul(&params.w_o)?;
    let y2_all = ln1_all.y.add(&o_all)?;
    let ln2_all = layer_norm(&y2_all, &params.ln2.gain, &params.ln2.bias, EPS_LAYER_NORM)?;
    let mlp_in_all = x0_all.add(&ln2_all.y)?;
    let h1_all = add_row_broadcast(&mlp_in_all.matmul(&params.mlp_w1)?, &params.mlp_b1);
    let mut act_all = Matrix::zeros(h1_all.rows(), h1_all.cols());
    let mut tanh_all = Matrix::zeros(h1_all.rows(), h1_all.cols());
    for ((a, t), &h) in act_all
        .data_mut()
        .iter_mut()
        .zip(tanh_all.data_mut())
        .zip(h1_all.data())
    {
        let (g, th) = gelu_with_tanh(h);
        *a = g;
        *t = th;
    }
    let m_out_all = add_row_broadcast(&act_all.matmul(&params.mlp_w2)?, &params.mlp_b2);
    let y4_all = x0_all.add(&m_out_all)?;

    let logits = (0..b)
        .map(|s| classifier_logits(params, y4_all.row(s * m)))
        .collect();

    Ok(BatchForward {
        x0_all,
        ln1_all,
        attn,
        z_all,
        ln2_all,
        mlp_in_all,
        h1_all,
        tanh_all,
        act_all,
        y4_all,
        logits,
    })
}

/// Class logits for every sample of a batch, using the stacked forward
/// pass without retaining caches or diagnostics; used for evaluation.
pub fn batch_logits(params: &ModelParams, batch: &[Sample]) -> Result<Vec<Vec<f64>>, CoreError> {
    if batch.is_empty() {
        return Err(CoreError::invalid("batch_logits", "empty batch"));
    }
    if params.wiring == ResidualWiring::Conventional {
        return batch
            .iter()
            .map(|s| forward(params, &s.x).map(|(l, _)| l))
            .collect();
    }
    let d = MODEL_DIM;
    let m = params.pos_emb.rows();
    for sample in batch {
        if sample.x.cols() != d || sample.x.rows() + 1 != m {
            return Err(CoreError::shape(
                "batch_logits",
                format!(
                    "sample {}x{} vs model for {} tokens",
                    sample.x.rows(),
                    sample.x.cols(),
                    m - 1
                ),
            ));
        }
    }
    let b = batch.len();
    let x0_all = stack_inputs(params, batch);
    let ln1_all = layer_norm(&x0_all, &params.ln1.gain, &params.ln1.bias, EPS_LAYER_NORM)?;
    let q_all = x0_all.matmul(&params.w_q)?;
    let k_all = x0_all.matmul(&params.w_k)?;
    let v_all = x0_all.matmul(&params.w_v)?;
    let mut z_all = Matrix::zeros(b * m, d);
    for s in 0..b {
        let q = copy_block(&q_all, s * m, m);
        let k = copy_block(&k_all, s * m, m);
        let v = copy_block(&v_all, s * m, m);
        let logits = crate::attention::logits_for(&params.variant, &q, &k)?;
        let attn = crate::ops::row_softmax(&logits)?;
        let z = attn.matmul(&v)?;
        for r in 0..m {
            z_all.row_mut(s * m + r).copy_from_slice(z.row(r));
        }
    }
    let o_all = z_all.matmul(&params.w_o)?;
    let y2_all = ln1_all.y.add(&o_all)?;
    let ln2_all = layer_norm(&y2_all, &params.ln2.gain, &params.ln2.bias, EPS_LAYER_NORM)?;
    let mlp_in_all = x0_all.add(&ln2_all.y)?;
    let h1_all = add_row_broadcast(&mlp_in_all.matmul(&params.mlp_w1)?, &params.mlp_b1);
    let act_all = h1_all.map(gelu);
    let m_out_all = add_row_broadcast(&act_all.matmul(&params.mlp_w2)?, &params.mlp_b2);
    let y4_all = x0_all.add(&m_out_all)?;
    Ok((0..b).map(|s| classifier_logits(params, y4_all.row(s * m))).collect())
}

fn stack_inputs(params: &ModelParams, batch: &[Sample]) -> Matrix {
    let d = MODEL_DIM;
    let m = params.pos_emb.rows();
    let mut x0_all = Matrix::zeros(batch.len() * m, d);
    for (s, sample) in batch.iter().enumerate() {
        let base = s * m;
        let row = x0_all.row_mut(base);
        for (j, val) in row.iter_mut().enumerate() {
            *val = params.cls_token[j] + params.pos_emb.get(0, j);
        }
        for r in 0..m - 1 {
            let src = sample.x.row(r);
            let pos = params.pos_emb.row(r + 1);
            for (dst, (&xv, &pv)) in x0_all
                .row_mut(base + r + 1)
                .iter_mut()
                .zip(src.iter().zip(pos))
            {
                *dst = xv + pv;
            }
        }
    }
    x0_all
}

fn classifier_logits(params: &ModelParams, cls_row: &[f64]) -> Vec<f64> {
    let mut logits = params.classifier_b.clone();
    for (j, &h) in cls_row.iter().enumerate() {
        for (slot, &w) in logits.iter_mut().zip(params.classifier_w.row(j)) {
            *slot += h * w;
        }
    }
    logits
}

fn loss_and_grad_batched(params: &ModelParams, batch: &[Sample]) -> Result<BatchResult, CoreError> {
    let d = MODEL_DIM;
    let m = params.pos_emb.rows();
    let b = batch.len();
    let fwd = batched_forward(params, batch)?;

    let mut total_loss = 0.0;
    let mut correct = 0usize;
    let mut diagnostics = DiagnosticsAccum::default();

    // Classifier head per sample; dy4 rows for the CLS positions.
    let mut dy4_all = Matrix::zeros(b * m, d);
    let mut d_classifier_w = Matrix::zeros(d, NUM_CLASSES);
    let mut d_classifier_b = vec![0.0; NUM_CLASSES];
    for (s, sample) in batch.iter().enumerate() {
        let logits = &fwd.logits[s];
        let (loss, grad_logits) = cross_entropy(logits, sample.label)?;
        total_loss += loss;
        if argmax(logits) == sample.label {
            correct += 1;
        }
        let cls_row = fwd.y4_all.row(s * m);
        for j in 0..d {
            for (slot, &gl) in d_classifier_w.row_mut(j).iter_mut().zip(&grad_logits) {
                *slot += cls_row[j] * gl;
            }
        }
        for (slot, &gl) in d_classifier_b.iter_mut().zip(&grad_logits) {
            *slot += gl;
        }
        for (j, slot) in dy4_all.row_mut(s * m).iter_mut().enumerate() {
            *slot = params
                .classifier_w
                .row(j)
                .iter()
                .zip(&grad_logits)
                .map(|(&w, &gl)| w * gl)
                .sum();
        }
    }

    // MLP backward over the stacked rows.
    let d_mlp_b2 = col_sums(&dy4_all);
    let d_mlp_w2 = fwd.act_all.matmul_tn(&dy4_all)?;
    let mut dh1_all = dy4_all.matmul_nt(&params.mlp_w2)?;
    for ((g, &h), &t) in dh1_all
        .data_mut()
        .iter_mut()
        .zip(fwd.h1_all.data())
        .zip(fwd.tanh_all.data())
    {
        *g *= gelu_prime_cached(h, t);
    }
    let d_mlp_b1 = col_sums(&dh1_all);
    let d_mlp_w1 = fwd.mlp_in_all.matmul_tn(&dh1_all)?;
    let d_mlp_in_all = dh1_all.matmul_nt(&params.mlp_w1)?;

    // Printed wiring residuals: y4 = x0 + mlp(x0 + ln2(y2)); y2 = ln1 + o.
    let mut dx0_all = dy4_all.clone();
    dx0_all.add_assign(&d_mlp_in_all)?;
    let (dy2_all, d_ln2_gain, d_ln2_bias) =
        layer_norm_backward(&fwd.ln2_all, &params.ln2.gain, &d_mlp_in_all);
    let dy1_all = dy2_all.clone();

    let d_w_o = fwd.z_all.matmul_tn(&dy2_all)?;
    let dz_all = dy2_all.matmul_nt(&params.w_o)?;

    // Attention backward per sample.
    let mut dq_all = Matrix::zeros(b * m, d);
    let mut dk_all = Matrix::zeros(b * m, d);
    let mut dv_all = Matrix::zeros(b * m, d);
    let mut scale_acc: Option<Vec<f64>> = None;
    for (s, sample) in batch.iter().enumerate() {
        let sa = &fwd.attn[s];
        diagnostics.absorb(sample, &sa.out);
        let dz = copy_block(&dz_all, s * m, m);
        let grads = attend_backward(&params.variant, &sa.q, &sa.k, &sa.v, &sa.out, &dz)?;
        for r in 0..m {
            dq_all.row_mut(s * m + r).copy_from_slice(grads.dq.row(r));
            dk_all.row_mut(s * m + r).copy_from_slice(grads.dk.row(r));
            dv_all.row_mut(s * m + r).copy_from_slice(grads.dv.row(r));
        }
        let flat = grads.dscales.flatten();
        match &mut scale_acc {
            None => scale_acc = Some(flat),
            Some(acc) => {
                for (a, v) in acc.iter_mut().zip(flat) {
                    *a += v;
                }
            }
        }
    }

    let d_w_q = fwd.x0_all.matmul_tn(&dq_all)?;
    let d_w_k = fwd.x0_all.matmul_tn(&dk_all)?;
    let d_w_v = fwd.x0_all.matmul_tn(&dv_all)?;
    // Accumulate the projection-input gradient separately before folding it
    // into dx0, mirroring the reference path's summation order exactly.
    let mut d_src_all = dq_all.matmul_nt(&params.w_q)?;
    d_src_all.add_assign(&dk_all.matmul_nt(&params.w_k)?)?;
    d_src_all.add_assign(&dv_all.matmul_nt(&params.w_v)?)?;
    dx0_all.add_assign(&d_src_all)?;

    let (dx0_ln, d_ln1_gain, d_ln1_bias) =
        layer_norm_backward(&fwd.ln1_all, &params.ln1.gain, &dy1_all);
    dx0_all.add_assign(&dx0_ln)?;

    // Positional and CLS gradients: sum the per-sample blocks.
    let mut d_pos_emb = Matrix::zeros(m, d);
    let mut d_cls = vec![0.0; d];
    for s in 0..b {
        for r in 0..m {
            let src = dx0_all.row(s * m + r);
            for (slot, &v) in d_pos_emb.row_mut(r).iter_mut().zip(src) {
                *slot += v;
            }
        }
        for (slot, &v) in d_cls.iter_mut().zip(dx0_all.row(s * m)) {
            *slot += v;
        }
    }

    let scales = match (&scale_acc, &params.variant) {
        (Some(acc), AttentionVariant::QKNormHS { .. }) => ScaleGrads::PerHead(acc[0]),
        (
            Some(acc),
            AttentionVariant::QKNormDS { scale_q, .. }
            | AttentionVariant::QKNormFull { scale_q, .. },
        ) => {
            let (q, k) = acc.split_at(scale_q.len());
            ScaleGrads::PerDim {
                scale_q: q.to_vec(),
                scale_k: k.to_vec(),
            }
        }
        _ => ScaleGrads::None,
    };

    let mut grads = ParamGrads {
        w_q: d_w_q,
        w_k: d_w_k,
        w_v: d_w_v,
        w_o: d_w_o,
        ln1_gain: d_ln1_gain,
        ln1_bias: d_ln1_bias,
        ln2_gain: d_ln2_gain,
        ln2_bias: d_ln2_bias,
        mlp_w1: d_mlp_w1,
        mlp_b1: d_mlp_b1,
        mlp_w2: d_mlp_w2,
        mlp_b2: d_mlp_b2,
        pos_emb: d_pos_emb,
        cls_token: d_cls,
        classifier_w: d_classifier_w,
        classifier_b: d_classifier_b,
        scales,
    };
    let inv_b = 1.0 / b as f64;
    let mut flat = grads.flatten();
    for v in flat.iter_mut() {
        *v *= inv_b;
    }
    unflatten_grads_into(&mut grads, &flat);

    Ok(BatchResult {
        loss: total_loss * inv_b,
        grads,
        accuracy: correct as f64 / b as f64,
        diagnostics,
    })
}

fn unflatten_grads_into(grads: &mut ParamGrads, flat: &[f64]) {
    let mut off = 0;
    let mut take = |dst: &mut [f64]| {
        dst.copy_from_slice(&flat[off..off + dst.len()]);
        off += dst.len();
    };
    take(grads.w_q.data_mut());
    take(grads.w_k.data_mut());
    take(grads.w_v.data_mut());
    take(grads.w_o.data_mut());
    take(&mut grads.ln1_gain);
    take(&mut grads.ln1_bias);
    take(&mut grads.ln2_gain);
    take(&mut grads.ln2_bias);
    take(grads.mlp_w1.data_mut());
    take(&mut grads.mlp_b1);
    take(grads.mlp_w2.data_mut());
    take(&mut grads.mlp_b2);
    take(grads.pos_emb.data_mut());
    take(&mut grads.cls_token);
    take(grads.classifier_w.data_mut());
    take(&mut grads.classifier_b);
    match &mut grads.scales {
        ScaleGrads::None => {}
        ScaleGrads::PerHead(g) => {
            *g = flat[off];
            off += 1;
        }
        ScaleGrads::PerDim { scale_q, scale_k } => {
            take(scale_q);
            take(scale_k);
        }
    }
    assert_eq!(off, flat.len());
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

fn matrix_to_json(m: &Matrix) -> serde_json::Value {
    let rows: Vec<serde_json::Value> = (0..m.rows())
        .map(|i| {
            serde_json::Value::from(
                m.row(i)
                    .iter()
                    .map(|v| serde_json::Value::from(v.to_string()))
                    .collect::<Vec<_>>(),
            )
        })
        .collect();
    serde_json::Value::from(rows)
}

fn vec_to_json(v: &[f64]) -> serde_json::Value {
    serde_json::Value::from(
        v.iter()
            .map(|x| serde_json::Value::from(x.to_string()))
            .collect::<Vec<_>>(),
    )
}

fn matrix_from_json(value: &serde_json::Value, what: &str) -> Result<Matrix, CheckpointError> {
    let rows = value
        .as_array()
        .ok_or_else(|| CheckpointError::Malformed(format!("{what}: expected array")))?;
    let parsed: Result<Vec<Vec<f64>>, CheckpointError> = rows
        .iter()
        .map(|row| vec_from_json(row, what))
        .collect();
    Matrix::from_rows(&parsed?)
        .map_err(|e| CheckpointError::Malformed(format!("{what}: {e}")))
}

fn vec_from_json(value: &serde_json::Value, what: &str) -> Result<Vec<f64>, CheckpointError> {
    let arr = value
        .as_array()
        .ok_or_else(|| CheckpointError::Malformed(format!("{what}: expected array")))?;
    arr.iter()
        .map(|v| {
            v.as_str()
                .ok_or_else(|| CheckpointError::Malformed(format!("{what}: expected string")))?
                .parse::<f64>()
                .map_err(|e| CheckpointError::Malformed(format!("{what}: {e}")))
        })
        .collect()
}

/// Save parameters as a single JSON file. Values are encoded as decimal
/// strings (shortest round-trip form), so loading restores them bit-exactly.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<(), CheckpointError> {
    let variant = match &params.variant {
        AttentionVariant::Standard
        | AttentionVariant::Quest
        | AttentionVariant::QNorm => {
            serde_json::json!({ "kind": params.variant.kind().name() })
        }
        AttentionVariant::QKNormHS { scale } => serde_json::json!({
            "kind": params.variant.kind().name(),
            "scale": scale.to_string(),
        }),
        AttentionVariant::QKNormDS { scale_q, scale_k }
        | AttentionVariant::QKNormFull { scale_q, scale_k } => serde_json::json!({
            "kind": params.variant.kind().name(),
            "scale_q": vec_to_json(scale_q),
            "scale_k": vec_to_json(scale_k),
        }),
        AttentionVariant::EllipticalQuest { metric_diag } => serde_json::json!({
            "kind": params.variant.kind().name(),
            "metric_diag": vec_to_json(metric_diag),
        }),
    };
    let obj = serde_json::json!({
        "w_q": matrix_to_json(&params.w_q),
        "w_k": matrix_to_json(&params.w_k),
        "w_v": matrix_to_json(&params.w_v),
        "w_o": matrix_to_json(&params.w_o),
        "ln1_gain": vec_to_json(&params.ln1.gain),
        "ln1_bias": vec_to_json(&params.ln1.bias),
        "ln2_gain": vec_to_json(&params.ln2.gain),
        "ln2_bias": vec_to_json(&params.ln2.bias),
        "mlp_w1": matrix_to_json(&params.mlp_w1),
        "mlp_b1": vec_to_json(&params.mlp_b1),
        "mlp_w2": matrix_to_json(&params.mlp_w2),
        "mlp_b2": vec_to_json(&params.mlp_b2),
        "pos_emb": matrix_to_json(&params.pos_emb),
        "cls_token": vec_to_json(&params.cls_token),
        "classifier_w": matrix_to_json(&params.classifier_w),
        "classifier_b": vec_to_json(&params.classifier_b),
        "variant": variant,
        "wiring": match params.wiring {
            ResidualWiring::Printed => "printed",
            ResidualWiring::Conventional => "conventional",
        },
    });
    std::fs::write(path, serde_json::to_string_pretty(&obj).expect("serializable"))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, CheckpointError> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let field = |name: &str| -> Result<&serde_json::Value, CheckpointError> {
        value
            .get(name)
            .ok_or_else(|| CheckpointError::Malformed(format!("missing field {name}")))
    };
    let variant_obj = field("variant")?;
    let kind_name = variant_obj
        .get("kind")
        .and_then(|v| v.as_str())
        .ok_or_else(|| CheckpointError::Malformed("variant.kind missing".into()))?;
    let kind = VariantKind::parse(kind_name)
        .ok_or_else(|| CheckpointError::Malformed(format!("unknown variant {kind_name}")))?;
    let variant = match kind {
        VariantKind::Standard => AttentionVariant::Standard,
        VariantKind::Quest => AttentionVariant::Quest,
        VariantKind::QNorm => AttentionVariant::QNorm,
        VariantKind::QkNormHs => AttentionVariant::QKNormHS {
            scale: variant_obj
                .get("scale")
                .and_then(|v| v.as_str())
                .ok_or_else(|| CheckpointError::Malformed("variant.scale missing".into()))?
                .parse()
                .map_err(|e| CheckpointError::Malformed(format!("variant.scale: {e}")))?,
        },
        VariantKind::QkNormDs => AttentionVariant::QKNormDS {
            scale_q: vec_from_json(
                variant_obj
                    .get("scale_q")
                    .ok_or_else(|| CheckpointError::Malformed("variant.scale_q missing".into()))?,
                "variant.scale_q",
            )?,
            scale_k: vec_from_json(
                variant_obj
                    .get("scale_k")
                    .ok_or_else(|| CheckpointError::Malformed("variant.scale_k missing".into()))?,
                "variant.scale_k",
            )?,
        },
        VariantKind::QkNormFull => AttentionVariant::QKNormFull {
            scale_q: vec_from_json(
                variant_obj
                    .get("scale_q")
                    .ok_or_else(|| CheckpointError::Malformed("variant.scale_q missing".into()))?,
                "variant.scale_q",
            )?,
            scale_k: vec_from_json(
                variant_obj
                    .get("scale_k")
                    .ok_or_else(|| CheckpointError::Malformed("variant.scale_k missing".into()))?,
                "variant.scale_k",
            )?,
        },
        VariantKind::EllipticalQuest => AttentionVariant::EllipticalQuest {
            metric_diag: vec_from_json(
                variant_obj.get("metric_diag").ok_or_else(|| {
                    CheckpointError::Malformed("variant.metric_diag missing".into())
                })?,
                "variant.metric_diag",
            )?,
        },
    };
    let wiring = match field("wiring")?.as_str() {
        Some("printed") => ResidualWiring::Printed,
        Some("conventional") => ResidualWiring::Conventional,
        other => {
            return Err(CheckpointError::Malformed(format!(
                "unknown wiring {other:?}"
            )))
        }
    };
    Ok(ModelParams {
        w_q: matrix_from_json(field("w_q")?, "w_q")?,
        w_k: matrix_from_json(field("w_k")?, "w_k")?,
        w_v: matrix_from_json(field("w_v")?, "w_v")?,
        w_o: matrix_from_json(field("w_o")?, "w_o")?,
        ln1: LayerNormParams {
            gain: vec_from_json(field("ln1_gain")?, "ln1_gain")?,
            bias: vec_from_json(field("ln1_bias")?, "ln1_bias")?,
        },
        ln2: LayerNormParams {
            gain: vec_from_json(field("ln2_gain")?, "ln2_gain")?,
            bias: vec_from_json(field("ln2_bias")?, "ln2_bias")?,
        },
        mlp_w1: matrix_from_json(field("mlp_w1")?, "mlp_w1")?,
        mlp_b1: vec_from_json(field("mlp_b1")?, "mlp_b1")?,
        mlp_w2: matrix_from_json(field("mlp_w2")?, "mlp_w2")?,
        mlp_b2: vec_from_json(field("mlp_b2")?, "mlp_b2")?,
        pos_emb: matrix_from_json(field("pos_emb")?, "pos_emb")?,
        cls_token: vec_from_json(field("cls_token")?, "cls_token")?,
        classifier_w: matrix_from_json(field("classifier_w")?, "classifier_w")?,
        classifier_b: vec_from_json(field("classifier_b")?, "classifier_b")?,
        variant,
        wiring,
    })
}
