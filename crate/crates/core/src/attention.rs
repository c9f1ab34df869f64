//! Attention formulations with exact analytic gradients.
//!
//! All variants share the same skeleton: logits from queries and keys,
//! row-wise softmax, probability-weighted sum of values. They differ only
//! in how the logits are formed:
//!
//! * `Standard`      — `(1/sqrt(D_H)) Q K^T`
//! * `Quest`         — `Q Kbar^T`, keys on the unit sphere, no scale
//! * `QNorm`         — `Qbar K^T`, queries on the unit sphere
//! * `QKNormHS`      — `c Qbar Kbar^T`, one learnable scalar per head
//! * `QKNormDS`      — `(Qbar . sq)(Kbar . sk)^T`, learnable per-dimension scales
//! * `QKNormFull`    — same form as DS but with per-head ownership of the scales
//! * `EllipticalQuest` — `diag(||q_i||) Qbar diag(m) Kbar^T` for a fixed
//!   positive diagonal metric `m`
//!
//! `Kbar`/`Qbar` denote rows normalized as `v / (||v|| + eps)`. Key-normalized
//! variants are invariant to positive per-row rescaling of the keys: no token
//! can raise its attention from every query by inflating its key norm. The
//! query norm survives in `Quest` and acts as a per-token inverse temperature.

use crate::error::CoreError;
use crate::matrix::Matrix;
use crate::ops::{
    l2_normalize_rows, l2_normalize_rows_backward, row_softmax, row_softmax_backward, EPS_L2,
};

/// Attention formulation plus its learnable scale parameters, if any.
#[derive(Debug, Clone, PartialEq)]
pub enum AttentionVariant {
    Standard,
    Quest,
    QNorm,
    QKNormHS { scale: f64 },
    QKNormDS { scale_q: Vec<f64>, scale_k: Vec<f64> },
    QKNormFull { scale_q: Vec<f64>, scale_k: Vec<f64> },
    EllipticalQuest { metric_diag: Vec<f64> },
}

/// Bare variant tag, used for configuration and CLI parsing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VariantKind {
    Standard,
    Quest,
    QNorm,
    QkNormHs,
    QkNormDs,
    QkNormFull,
    EllipticalQuest,
}

impl VariantKind {
    pub const ALL: [VariantKind; 7] = [
        VariantKind::Standard,
        VariantKind::Quest,
        VariantKind::QNorm,
        VariantKind::QkNormHs,
        VariantKind::QkNormDs,
        VariantKind::QkNormFull,
        VariantKind::EllipticalQuest,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariantKind::Standard => "standard",
            VariantKind::Quest => "quest",
            VariantKind::QNorm => "qnorm",
            VariantKind::QkNormHs => "qknorm-hs",
            VariantKind::QkNormDs => "qknorm-ds",
            VariantKind::QkNormFull => "qknorm-full",
            VariantKind::EllipticalQuest => "elliptical-quest",
        }
    }

    pub fn parse(name: &str) -> Option<VariantKind> {
        VariantKind::ALL.into_iter().find(|k| k.name() == name)
    }

    /// Build the variant with default initialization for head dimension
    /// `d_h`: learnable scales start at `sqrt(D_H)`, which restores the
    /// O(1) logit spread that standard attention has at initialization;
    /// the elliptical metric defaults to all ones.
    pub fn instantiate(self, d_h: usize) -> AttentionVariant {
        let s = (d_h as f64).sqrt();
        match self {
            VariantKind::Standard => AttentionVariant::Standard,
            VariantKind::Quest => AttentionVariant::Quest,
            VariantKind::QNorm => AttentionVariant::QNorm,
            VariantKind::QkNormHs => AttentionVariant::QKNormHS { scale: s },
            VariantKind::QkNormDs => AttentionVariant::QKNormDS {
                scale_q: vec![s; d_h],
                scale_k: vec![s; d_h],
            },
            VariantKind::QkNormFull => AttentionVariant::QKNormFull {
                scale_q: vec![s; d_h],
                scale_k: vec![s; d_h],
            },
            VariantKind::EllipticalQuest => AttentionVariant::EllipticalQuest {
                metric_diag: vec![1.0; d_h],
            },
        }
    }
}

impl AttentionVariant {
    pub fn kind(&self) -> VariantKind {
        match self {
            AttentionVariant::Standard => VariantKind::Standard,
            AttentionVariant::Quest => VariantKind::Quest,
            AttentionVariant::QNorm => VariantKind::QNorm,
            AttentionVariant::QKNormHS { .. } => VariantKind::QkNormHs,
            AttentionVariant::QKNormDS { .. } => VariantKind::QkNormDs,
            AttentionVariant::QKNormFull { .. } => VariantKind::QkNormFull,
            AttentionVariant::EllipticalQuest { .. } => VariantKind::EllipticalQuest,
        }
    }

    fn validate(&self, d_h: usize) -> Result<(), CoreError> {
        match self {
            AttentionVariant::QKNormDS { scale_q, scale_k }
            | AttentionVariant::QKNormFull { scale_q, scale_k } => {
                if scale_q.len() != d_h || scale_k.len() != d_h {
                    return Err(CoreError::shape(
                        "attend",
                        format!(
                            "scale lengths {}/{} vs head dim {d_h}",
                            scale_q.len(),
                            scale_k.len()
                        ),
                    ));
                }
            }
            AttentionVariant::EllipticalQuest { metric_diag } => {
                if metric_diag.len() != d_h {
                    return Err(CoreError::shape(
                        "attend",
                        format!("metric length {} vs head dim {d_h}", metric_diag.len()),
                    ));
                }
                if metric_diag.iter().any(|&m| !(m > 0.0)) {
                    return Err(CoreError::invalid(
                        "attend",
                        "elliptical metric entries must be positive",
                    ));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Learnable scale values in a fixed flattening order (q scales before
    /// k scales for the per-dimension variants). Empty for variants without
    /// learnable scales; the elliptical metric is supplied, not learned.
    pub fn learnable_scales(&self) -> Vec<f64> {
        match self {
            AttentionVariant::QKNormHS { scale } => vec![*scale],
            AttentionVariant::QKNormDS { scale_q, scale_k }
            | AttentionVariant::QKNormFull { scale_q, scale_k } => {
                let mut out = scale_q.clone();
                out.extend_from_slice(scale_k);
                out
            }
            _ => Vec::new(),
        }
    }

    pub fn num_learnable_scales(&self) -> usize {
        match self {
            AttentionVariant::QKNormHS { .. } => 1,
            AttentionVariant::QKNormDS { scale_q, scale_k }
            | AttentionVariant::QKNormFull { scale_q, scale_k } => scale_q.len() + scale_k.len(),
            _ => 0,
        }
    }

    /// Overwrite the learnable scales from a flat slice in the order
    /// produced by [`learnable_scales`](Self::learnable_scales).
    pub fn set_learnable_scales(&mut self, vals: &[f64]) {
        match self {
            AttentionVariant::QKNormHS { scale } => {
                assert_eq!(vals.len(), 1);
                *scale = vals[0];
            }
            AttentionVariant::QKNormDS { scale_q, scale_k }
            | AttentionVariant::QKNormFull { scale_q, scale_k } => {
                assert_eq!(vals.len(), scale_q.len() + scale_k.len());
                let (q, k) = vals.split_at(scale_q.len());
                scale_q.copy_from_slice(q);
                scale_k.copy_from_slice(k);
            }
            _ => assert!(vals.is_empty()),
        }
    }
}

/// Per-call measurements taken during the forward pass. Norms are always
/// the raw pre-normalization values, so they stay meaningful for the
/// normalized variants where they no longer influence the logits.
#[derive(Debug, Clone)]
pub struct AttentionDiagnostics {
    pub max_logit: f64,
    /// Entropy (nats) of each query's attention row; bounded by `ln N`.
    pub row_entropy: Vec<f64>,
    pub query_norms: Vec<f64>,
    pub key_norms: Vec<f64>,
}

/// Forward-pass result: context output before the out-projection, the
/// attention probabilities and logits, and diagnostics.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub z: Matrix,
    pub attn: Matrix,
    pub logits: Matrix,
    pub diagnostics: AttentionDiagnostics,
}

/// Gradients for the learnable scales, mirroring the variant's layout.
#[derive(Debug, Clone, PartialEq)]
pub enum ScaleGrads {
    None,
    PerHead(f64),
    PerDim { scale_q: Vec<f64>, scale_k: Vec<f64> },
}

impl ScaleGrads {
    pub fn flatten(&self) -> Vec<f64> {
        match self {
            ScaleGrads::None => Vec::new(),
            ScaleGrads::PerHead(g) => vec![*g],
            ScaleGrads::PerDim { scale_q, scale_k } => {
                let mut out = scale_q.clone();
                out.extend_from_slice(scale_k);
                out
            }
        }
    }
}

/// Gradients of a scalar loss with respect to the attention inputs.
#[derive(Debug, Clone)]
pub struct AttentionGrads {
    pub dq: Matrix,
    pub dk: Matrix,
    pub dv: Matrix,
    pub dscales: ScaleGrads,
}

/// Attention-shaped factor of the backward pass. Each row sums to zero.
#[derive(Debug, Clone)]
pub struct ReverseAttention {
    pub r: Matrix,
}

fn check_qkv(op: &'static str, q: &Matrix, k: &Matrix, v: &Matrix) -> Result<(), CoreError> {
    if q.cols() != k.cols() || k.rows() != v.rows() {
        return Err(CoreError::shape(
            op,
            format!(
                "q {}x{}, k {}x{}, v {}x{}",
                q.rows(),
                q.cols(),
                k.rows(),
                k.cols(),
                v.rows(),
                v.cols()
            ),
        ));
    }
    Ok(())
}

/// Row entropies and the global max logit in one pass. Uses the identity
/// `H = M + ln Z - sum_j p_j l_j` with `ln Z = -ln p_argmax`, which equals
/// `-sum p ln p` with a single logarithm per row.
fn entropies_and_max(logits: &Matrix, probs: &Matrix) -> (Vec<f64>, f64) {
    let mut max_logit = f64::NEG_INFINITY;
    let entropies = (0..logits.rows())
        .map(|i| {
            let l = logits.row(i);
            let p = probs.row(i);
            let mut arg = 0;
            for (j, &v) in l.iter().enumerate() {
                if v > l[arg] {
                    arg = j;
                }
            }
            if l[arg] > max_logit {
                max_logit = l[arg];
            }
            let dot: f64 = p.iter().zip(l).map(|(&pj, &lj)| pj * lj).sum();
            (l[arg] - p[arg].ln() - dot).max(0.0)
        })
        .collect();
    (entropies, max_logit)
}

/// Scale each row of `m` elementwise by `scales` (length = cols).
fn scale_cols(m: &Matrix, scales: &[f64]) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        for (v, &s) in out.row_mut(i).iter_mut().zip(scales) {
            *v *= s;
        }
    }
    out
}

pub(crate) fn logits_for(
    variant: &AttentionVariant,
    q: &Matrix,
    k: &Matrix,
) -> Result<Matrix, CoreError> {
    let d_h = q.cols();
    match variant {
        AttentionVariant::Standard => {
            let c = 1.0 / (d_h as f64).sqrt();
            Ok(q.matmul_nt(k)?.scale(c))
        }
        AttentionVariant::Quest => {
            let (k_bar, _) = l2_normalize_rows(k, EPS_L2);
            q.matmul_nt(&k_bar)
        }
        AttentionVariant::QNorm => {
            let (q_bar, _) = l2_normalize_rows(q, EPS_L2);
            q_bar.matmul_nt(k)
        }
        AttentionVariant::QKNormHS { scale } => {
            let (q_bar, _) = l2_normalize_rows(q, EPS_L2);
            let (k_bar, _) = l2_normalize_rows(k, EPS_L2);
            Ok(q_bar.matmul_nt(&k_bar)?.scale(*scale))
        }
        AttentionVariant::QKNormDS { scale_q, scale_k }
        | AttentionVariant::QKNormFull { scale_q, scale_k } => {
            let (q_bar, _) = l2_normalize_rows(q, EPS_L2);
            let (k_bar, _) = l2_normalize_rows(k, EPS_L2);
            scale_cols(&q_bar, scale_q).matmul_nt(&scale_cols(&k_bar, scale_k))
        }
        AttentionVariant::EllipticalQuest { metric_diag } => {
            let (q_bar, q_norms) = l2_normalize_rows(q, EPS_L2);
            let (k_bar, _) = l2_normalize_rows(k, EPS_L2);
            let mut logits = q_bar.matmul_nt(&scale_cols(&k_bar, metric_diag))?;
            for i in 0..logits.rows() {
                let n = q_norms[i];
                for v in logits.row_mut(i) {
                    *v *= n;
                }
            }
            Ok(logits)
        }
    }
}

/// Forward pass for any variant. `q` and `k` must share the head dimension
/// and `k`/`v` the token count; `q` may have a different number of rows.
pub fn attend(
    variant: &AttentionVariant,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
) -> Result<AttentionOutput, CoreError> {
    check_qkv("attend", q, k, v)?;
    variant.validate(q.cols())?;
    if !q.is_finite() || !k.is_finite() || !v.is_finite() {
        return Err(CoreError::NonFinite { op: "attend" });
    }
    let logits = logits_for(variant, q, k)?;
    let attn = row_softmax(&logits)?;
    let z = attn.matmul(v)?;
    let (row_entropy, max_logit) = entropies_and_max(&logits, &attn);
    let diagnostics = AttentionDiagnostics {
        max_logit,
        row_entropy,
        query_norms: q.row_norms(),
        key_norms: k.row_norms(),
    };
    Ok(AttentionOutput {
        z,
        attn,
        logits,
        diagnostics,
    })
}

/// Analytic VJP of [`attend`] given the upstream gradient on `z`.
///
/// For `Quest` the key gradient of each token is orthogonal to the key
/// itself up to an `eps`-sized residual: the normalization projects out the
/// radial direction, which is what blocks the norm growth feedback loop.
/// `QNorm` has the mirrored property for queries.
pub fn attend_backward(
    variant: &AttentionVariant,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    cache: &AttentionOutput,
    upstream_dz: &Matrix,
) -> Result<AttentionGrads, CoreError> {
    check_qkv("attend_backward", q, k, v)?;
    variant.validate(q.cols())?;
    if cache.attn.rows() != q.rows()
        || cache.attn.cols() != k.rows()
        || upstream_dz.rows() != q.rows()
        || upstream_dz.cols() != v.cols()
    {
        return Err(CoreError::shape(
            "attend_backward",
            format!(
                "cache attn {}x{}, upstream {}x{} vs q {}x{}, k {}x{}, v {}x{}",
                cache.attn.rows(),
                cache.attn.cols(),
                upstream_dz.rows(),
                upstream_dz.cols(),
                q.rows(),
                q.cols(),
                k.rows(),
                k.cols(),
                v.rows(),
                v.cols()
            ),
        ));
    }

    let dv = cache.attn.matmul_tn(upstream_dz)?;
    let dattn = upstream_dz.matmul_nt(v)?;
    let dlogits = row_softmax_backward(&cache.attn, &dattn)?;

    let d_h = q.cols();
    let (dq, dk, dscales) = match variant {
        AttentionVariant::Standard => {
            let c = 1.0 / (d_h as f64).sqrt();
            let dq = dlogits.matmul(k)?.scale(c);
            let dk = dlogits.matmul_tn(q)?.scale(c);
            (dq, dk, ScaleGrads::None)
        }
        AttentionVariant::Quest => {
            let (k_bar, k_norms) = l2_normalize_rows(k, EPS_L2);
            let dq = dlogits.matmul(&k_bar)?;
            let dk_bar = dlogits.matmul_tn(q)?;
            let dk = l2_normalize_rows_backward(k, &k_norms, EPS_L2, &dk_bar);
            (dq, dk, ScaleGrads::None)
        }
        AttentionVariant::QNorm => {
            let (q_bar, q_norms) = l2_normalize_rows(q, EPS_L2);
            let dq_bar = dlogits.matmul(k)?;
            let dq = l2_normalize_rows_backward(q, &q_norms, EPS_L2, &dq_bar);
            let dk = dlogits.matmul_tn(&q_bar)?;
            (dq, dk, ScaleGrads::None)
        }
        AttentionVariant::QKNormHS { scale } => {
            let (q_bar, q_norms) = l2_normalize_rows(q, EPS_L2);
            let (k_bar, k_norms) = l2_normalize_rows(k, EPS_L2);
            let cos = q_bar.matmul_nt(&k_bar)?;
            let dscale = dlogits
                .data()
                .iter()
                .zip(cos.data())
                .map(|(&g, &c)| g * c)
                .sum();
            let dq_bar = dlogits.matmul(&k_bar)?.scale(*scale);
            let dk_bar = dlogits.matmul_tn(&q_bar)?.scale(*scale);
            let dq = l2_normalize_rows_backward(q, &q_norms, EPS_L2, &dq_bar);
            let dk = l2_normalize_rows_backward(k, &k_norms, EPS_L2, &dk_bar);
            (dq, dk, ScaleGrads::PerHead(dscale))
        }
        AttentionVariant::QKNormDS { scale_q, scale_k }
        | AttentionVariant::QKNormFull { scale_q, scale_k } => {
            let (q_bar, q_norms) = l2_normalize_rows(q, EPS_L2);
            let (k_bar, k_norms) = l2_normalize_rows(k, EPS_L2);
            let q_scaled = scale_cols(&q_bar, scale_q);
            let k_scaled = scale_cols(&k_bar, scale_k);
            let dq_scaled = dlogits.matmul(&k_scaled)?;
            let dk_scaled = dlogits.matmul_tn(&q_scaled)?;
            let mut dsq = vec![0.0; d_h];
            let mut dsk = vec![0.0; d_h];
            for i in 0..q_bar.rows() {
                for (slot, (&g, &qb)) in dsq
                    .iter_mut()
                    .zip(dq_scaled.row(i).iter().zip(q_bar.row(i)))
                {
                    *slot += g * qb;
                }
            }
            for j in 0..k_bar.rows() {
                for (slot, (&g, &kb)) in dsk
                    .iter_mut()
                    .zip(dk_scaled.row(j).iter().zip(k_bar.row(j)))
                {
                    *slot += g * kb;
                }
            }
            let dq_bar = scale_cols(&dq_scaled, scale_q);
            let dk_bar = scale_cols(&dk_scaled, scale_k);
            let dq = l2_normalize_rows_backward(q, &q_norms, EPS_L2, &dq_bar);
            let dk = l2_normalize_rows_backward(k, &k_norms, EPS_L2, &dk_bar);
            (
                dq,
                dk,
                ScaleGrads::PerDim {
                    scale_q: dsq,
                    scale_k: dsk,
                },
            )
        }
        AttentionVariant::EllipticalQuest { metric_diag } => {
            let (q_bar, q_norms) = l2_normalize_rows(q, EPS_L2);
            let (k_bar, k_norms) = l2_normalize_rows(k, EPS_L2);
            let k_weighted = scale_cols(&k_bar, metric_diag);
            // cos[i][j] = qbar_i . (m . kbar_j); logits = diag(||q||) cos
            let cos = q_bar.matmul_nt(&k_weighted)?;
            // Rows of dlogits scaled by the query norm feed the cosine path.
            let mut dcos = dlogits.clone();
            for i in 0..dcos.rows() {
                let n = q_norms[i];
                for g in dcos.row_mut(i) {
                    *g *= n;
                }
            }
            let dq_bar = dcos.matmul(&k_weighted)?;
            let dk_bar = scale_cols(&dcos.matmul_tn(&q_bar)?, metric_diag);
            let mut dq = l2_normalize_rows_backward(q, &q_norms, EPS_L2, &dq_bar);
            // Radial path through the norm factor: d||q_i|| = sum_j g_ij cos_ij.
            for i in 0..q.rows() {
                let n = q_norms[i];
                if n == 0.0 {
                    continue;
                }
                let dn: f64 = dlogits
                    .row(i)
                    .iter()
                    .zip(cos.row(i))
                    .map(|(&g, &c)| g * c)
                    .sum();
                let qi = q.row(i);
                for (g, &qv) in dq.row_mut(i).iter_mut().zip(qi) {
                    *g += dn * qv / n;
                }
            }
            let dk = l2_normalize_rows_backward(k, &k_norms, EPS_L2, &dk_bar);
            (dq, dk, ScaleGrads::None)
        }
    };

    Ok(AttentionGrads { dq, dk, dv, dscales })
}

/// Reverse attention `R`: the attention-probability-weighted factor of the
/// backward pass, `R = A (.) (E - rowdot(A, E)) * sqrt(1/D_H)` where
/// `E = delta W_o^T V^T` is the upstream gradient arriving on `A` through
/// the out-projection `z W_o`.
pub fn reverse_attention(
    attn: &Matrix,
    delta: &Matrix,
    w_o: &Matrix,
    v: &Matrix,
    d_h: usize,
) -> Result<ReverseAttention, CoreError> {
    let n = attn.rows();
    if attn.cols() != n
        || v.rows() != n
        || delta.rows() != n
        || w_o.rows() != v.cols()
        || w_o.cols() != delta.cols()
        || v.cols() != d_h
    {
        return Err(CoreError::shape(
            "reverse_attention",
            format!(
                "attn {}x{}, delta {}x{}, w_o {}x{}, v {}x{}, d_h {d_h}",
                attn.rows(),
                attn.cols(),
                delta.rows(),
                delta.cols(),
                w_o.rows(),
                w_o.cols(),
                v.rows(),
                v.cols()
            ),
        ));
    }
    let e_tilde = delta.matmul_nt(w_o)?.matmul_nt(v)?;
    let scale = (1.0 / d_h as f64).sqrt();
    let mut r = Matrix::zeros(n, n);
    for i in 0..n {
        let a = attn.row(i);
        let e = e_tilde.row(i);
        let diag: f64 = a.iter().zip(e).map(|(&ai, &ei)| ai * ei).sum();
        for (out, (&ai, &ei)) in r.row_mut(i).iter_mut().zip(a.iter().zip(e)) {
            *out = ai * (ei - diag) * scale;
        }
    }
    Ok(ReverseAttention { r })
}

/// Query/key VJPs from reverse attention: `delta_q = R K`, `delta_k = R^T Q`.
pub fn qk_vjp(
    r: &ReverseAttention,
    q: &Matrix,
    k: &Matrix,
) -> Result<(Matrix, Matrix), CoreError> {
    let n = r.r.rows();
    if r.r.cols() != n || q.rows() != n || k.rows() != n || q.cols() != k.cols() {
        return Err(CoreError::shape(
            "qk_vjp",
            format!(
                "r {}x{}, q {}x{}, k {}x{}",
                r.r.rows(),
                r.r.cols(),
                q.rows(),
                q.cols(),
                k.rows(),
                k.cols()
            ),
        ));
    }
    let delta_q = r.r.matmul(k)?;
    let delta_k = r.r.matmul_tn(q)?;
    Ok((delta_q, delta_k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn unit_rows(m: &Matrix) -> Matrix {
        l2_normalize_rows(m, 0.0).0
    }

    #[test]
    fn quest_analytic_two_token_case() {
        let q = Matrix::from_vec(1, 2, vec![3.0f64.ln(), 0.0]).unwrap();
        let k = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let v = Matrix::identity(2);
        let out = attend(&AttentionVariant::Quest, &q, &k, &v).unwrap();
        assert!((out.attn.get(0, 0) - 0.75).abs() < 1e-12);
        assert!((out.attn.get(0, 1) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn quest_ignores_key_rescaling() {
        let mut rng = Rng::new(21);
        let q = Matrix::randn(3, 4, 1.0, &mut rng);
        let k = Matrix::randn(5, 4, 1.0, &mut rng);
        let v = Matrix::randn(5, 4, 1.0, &mut rng);
        let base = attend(&AttentionVariant::Quest, &q, &k, &v).unwrap();
        let mut scaled = k.clone();
        for x in scaled.row_mut(2) {
            *x *= 7.0;
        }
        let out = attend(&AttentionVariant::Quest, &q, &scaled, &v).unwrap();
        assert!(base.attn.max_abs_diff(&out.attn) < 1e-12);
    }

    #[test]
    fn standard_matches_hand_computation() {
        // N = 2, D_H = 4 integers; scale C = 1/2. Expected values computed
        // with scalar arithmetic on a separate route.
        let q = Matrix::from_vec(2, 4, vec![1.0, 2.0, 0.0, -1.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let k = Matrix::from_vec(2, 4, vec![1.0, 0.0, 2.0, 0.0, -1.0, 1.0, 0.0, 2.0]).unwrap();
        let v = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = attend(&AttentionVariant::Standard, &q, &k, &v).unwrap();

        // Row 0: q0.k0 = 1, q0.k1 = -1; logits = (0.5, -0.5).
        let e0 = (0.5f64).exp();
        let e1 = (-0.5f64).exp();
        let p00 = e0 / (e0 + e1);
        // Row 1: q1.k0 = 2, q1.k1 = 3; logits = (1.0, 1.5).
        let f0 = (1.0f64).exp();
        let f1 = (1.5f64).exp();
        let p10 = f0 / (f0 + f1);
        assert!((out.logits.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((out.logits.get(1, 1) - 1.5).abs() < 1e-15);
        assert!((out.attn.get(0, 0) - p00).abs() < 1e-15);
        assert!((out.attn.get(1, 0) - p10).abs() < 1e-15);
        // z = attn * I reproduces attn.
        assert!(out.z.max_abs_diff(&out.attn) < 1e-15);
    }

    #[test]
    fn rows_are_stochastic_and_entropy_bounded() {
        let mut rng = Rng::new(22);
        for kind in VariantKind::ALL {
            let variant = kind.instantiate(5);
            let q = Matrix::randn(4, 5, 1.0, &mut rng);
            let k = Matrix::randn(6, 5, 1.0, &mut rng);
            let v = Matrix::randn(6, 3, 1.0, &mut rng);
            let out = attend(&variant, &q, &k, &v).unwrap();
            for i in 0..4 {
                let sum: f64 = out.attn.row(i).iter().sum();
                assert!((sum - 1.0).abs() < 1e-12, "{kind:?} row sum {sum}");
                let h = out.diagnostics.row_entropy[i];
                assert!(h >= 0.0 && h <= (6.0f64).ln() + 1e-12, "{kind:?} entropy {h}");
            }
        }
    }

    #[test]
    fn shape_and_finiteness_rejected() {
        let q = Matrix::zeros(2, 3);
        let k = Matrix::zeros(2, 4);
        let v = Matrix::zeros(2, 3);
        assert!(attend(&AttentionVariant::Quest, &q, &k, &v).is_err());
        let k = Matrix::zeros(3, 3);
        assert!(attend(&AttentionVariant::Quest, &q, &k, &v).is_err());
        let mut q_bad = Matrix::zeros(2, 3);
        q_bad.set(0, 0, f64::NAN);
        let k = Matrix::zeros(2, 3);
        assert!(attend(&AttentionVariant::Quest, &q_bad, &k, &v).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = Rng::new(23);
        let q = Matrix::randn(3, 4, 1.0, &mut rng);
        let k = Matrix::randn(3, 4, 1.0, &mut rng);
        let v = Matrix::randn(3, 4, 1.0, &mut rng);
        for kind in VariantKind::ALL {
            let variant = kind.instantiate(4);
            let cache = attend(&variant, &q, &k, &v).unwrap();
            let grads =
                attend_backward(&variant, &q, &k, &v, &cache, &Matrix::zeros(3, 4)).unwrap();
            assert_eq!(grads.dq, Matrix::zeros(3, 4));
            assert_eq!(grads.dk, Matrix::zeros(3, 4));
            assert_eq!(grads.dv, Matrix::zeros(3, 4));
        }
    }

    #[test]
    fn quest_key_gradients_orthogonal_to_keys() {
        let mut rng = Rng::new(24);
        for _ in 0..10 {
            let q = Matrix::randn(4, 5, 1.0, &mut rng);
            let k = Matrix::randn(4, 5, 1.0, &mut rng);
            let v = Matrix::randn(4, 5, 1.0, &mut rng);
            let upstream = Matrix::randn(4, 5, 1.0, &mut rng);
            let cache = attend(&AttentionVariant::Quest, &q, &k, &v).unwrap();
            let grads =
                attend_backward(&AttentionVariant::Quest, &q, &k, &v, &cache, &upstream).unwrap();
            for j in 0..4 {
                let dot: f64 = grads
                    .dk
                    .row(j)
                    .iter()
                    .zip(k.row(j))
                    .map(|(&a, &b)| a * b)
                    .sum();
                assert!(dot.abs() < 1e-10, "radial leak {dot}");
            }
        }
    }

    #[test]
    fn qnorm_query_gradients_orthogonal_to_queries() {
        let mut rng = Rng::new(25);
        let q = Matrix::randn(4, 5, 1.0, &mut rng);
        let k = Matrix::randn(4, 5, 1.0, &mut rng);
        let v = Matrix::randn(4, 5, 1.0, &mut rng);
        let upstream = Matrix::randn(4, 5, 1.0, &mut rng);
        let cache = attend(&AttentionVariant::QNorm, &q, &k, &v).unwrap();
        let grads =
            attend_backward(&AttentionVariant::QNorm, &q, &k, &v, &cache, &upstream).unwrap();
        for i in 0..4 {
            let dot: f64 = grads
                .dq
                .row(i)
                .iter()
                .zip(q.row(i))
                .map(|(&a, &b)| a * b)
                .sum();
            assert!(dot.abs() < 1e-10, "radial leak {dot}");
        }
    }

    #[test]
    fn reverse_attention_zero_delta() {
        let mut rng = Rng::new(26);
        let attn = row_softmax(&Matrix::randn(3, 3, 1.0, &mut rng)).unwrap();
        let v = Matrix::randn(3, 4, 1.0, &mut rng);
        let w_o = Matrix::randn(4, 5, 1.0, &mut rng);
        let delta = Matrix::zeros(3, 5);
        let rev = reverse_attention(&attn, &delta, &w_o, &v, 4).unwrap();
        assert_eq!(rev.r, Matrix::zeros(3, 3));
    }

    #[test]
    fn reverse_attention_single_token_is_zero() {
        let attn = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let v = Matrix::from_vec(1, 2, vec![0.3, -0.4]).unwrap();
        let w_o = Matrix::from_vec(2, 2, vec![1.0, 0.5, -0.5, 2.0]).unwrap();
        let delta = Matrix::from_vec(1, 2, vec![1.0, 1.0]).unwrap();
        let rev = reverse_attention(&attn, &delta, &w_o, &v, 2).unwrap();
        assert!(rev.r.get(0, 0).abs() < 1e-15);
    }

    #[test]
    fn reverse_attention_matches_softmax_backward_composition() {
        let mut rng = Rng::new(27);
        let n = 5;
        let d_h = 4;
        let attn = row_softmax(&Matrix::randn(n, n, 1.0, &mut rng)).unwrap();
        let v = Matrix::randn(n, d_h, 1.0, &mut rng);
        let w_o = Matrix::randn(d_h, 6, 1.0, &mut rng);
        let delta = Matrix::randn(n, 6, 1.0, &mut rng);
        let rev = reverse_attention(&attn, &delta, &w_o, &v, d_h).unwrap();
        let e_tilde = delta.matmul_nt(&w_o).unwrap().matmul_nt(&v).unwrap();
        let reference = row_softmax_backward(&attn, &e_tilde)
            .unwrap()
            .scale((1.0 / d_h as f64).sqrt());
        assert!(rev.r.max_abs_diff(&reference) < 1e-14);
        for i in 0..n {
            let sum: f64 = rev.r.row(i).iter().sum();
            assert!(sum.abs() < 1e-10);
        }
    }

    #[test]
    fn qk_vjp_zero_r_and_shapes() {
        let r = ReverseAttention {
            r: Matrix::zeros(3, 3),
        };
        let q = Matrix::zeros(3, 4);
        let k = Matrix::zeros(3, 4);
        let (dq, dk) = qk_vjp(&r, &q, &k).unwrap();
        assert_eq!(dq, Matrix::zeros(3, 4));
        assert_eq!(dk, Matrix::zeros(3, 4));
        let bad_q = Matrix::zeros(2, 4);
        assert!(qk_vjp(&r, &bad_q, &k).is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for kind in VariantKind::ALL {
            assert_eq!(VariantKind::parse(kind.name()), Some(kind));
        }
        assert_eq!(VariantKind::parse("nope"), None);
    }

    #[test]
    fn scale_flattening_round_trips() {
        let mut variant = VariantKind::QkNormDs.instantiate(3);
        let vals = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        variant.set_learnable_scales(&vals);
        assert_eq!(variant.learnable_scales(), vals);
        assert_eq!(variant.num_learnable_scales(), 6);

        let quest = VariantKind::Quest.instantiate(3);
        assert!(quest.learnable_scales().is_empty());
    }

    #[test]
    fn fused_entropy_matches_direct_formula() {
        use crate::ops::row_entropies;
        let mut rng = Rng::new(29);
        for _ in 0..20 {
            let n = 1 + rng.gen_range(6);
            let q = Matrix::randn(n, 4, 2.0, &mut rng);
            let k = Matrix::randn(n, 4, 2.0, &mut rng);
            let v = Matrix::randn(n, 4, 1.0, &mut rng);
            let out = attend(&AttentionVariant::Standard, &q, &k, &v).unwrap();
            let direct = row_entropies(&out.attn);
            for (a, b) in out.diagnostics.row_entropy.iter().zip(&direct) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn normalized_keys_have_unit_rows() {
        let mut rng = Rng::new(28);
        let k = Matrix::randn(4, 6, 2.0, &mut rng);
        let u = unit_rows(&k);
        for n in u.row_norms() {
            assert!((n - 1.0).abs() < 1e-12);
        }
    }
}
