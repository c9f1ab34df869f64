//! Gradient and invariance checks against independent oracles.
//!
//! Every backward pass in this crate is validated here against central
//! finite differences, and the structural properties of the attention
//! variants (rescaling invariance, entropy monotonicity, argmax stability,
//! reverse-attention identities) are exercised on randomized instances.
//! The same checks back the `gradcheck` CLI command, the integration tests,
//! and the acceptance suite, so tolerances are pinned once, here.

use crate::attention::{attend, attend_backward, qk_vjp, reverse_attention, AttentionVariant, VariantKind};
use crate::matrix::Matrix;
use crate::ops::{cross_entropy, finite_diff_grad_flat, max_rel_err, row_softmax};
use crate::rng::Rng;
use crate::toy_model::{backward, forward, init_params, ModelParams, MODEL_DIM, NUM_CLASSES};

/// Tolerances and steps for the finite-difference comparisons.
pub const ATTN_REL_TOL: f64 = 1e-5;
pub const ATTN_FD_STEP: f64 = 1e-6;
pub const MODEL_REL_TOL: f64 = 1e-4;
pub const MODEL_FD_STEP: f64 = 1e-5;
/// Entries smaller than this are compared absolutely (relative to the floor),
/// keeping finite-difference round-off from dominating near-zero gradients.
pub const REL_ERR_FLOOR: f64 = 1e-3;
pub const INVARIANCE_TOL: f64 = 1e-12;
pub const REVERSE_ROWSUM_TOL: f64 = 1e-10;

/// One named check with its worst observed error.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn from_err(name: impl Into<String>, worst: f64, tol: f64) -> CheckOutcome {
        CheckOutcome {
            name: name.into(),
            passed: worst < tol,
            detail: format!("worst {worst:.3e}, tolerance {tol:.1e}"),
        }
    }
}

/// Build a variant for head dimension `d_h` with mildly randomized learnable
/// scales / metric, so the scale gradients are checked away from their
/// symmetric initialization point.
fn randomized_variant(kind: VariantKind, d_h: usize, rng: &mut Rng) -> AttentionVariant {
    let mut variant = kind.instantiate(d_h);
    let n = variant.num_learnable_scales();
    if n > 0 {
        let scales: Vec<f64> = variant
            .learnable_scales()
            .iter()
            .map(|&s| s * (1.0 + 0.2 * rng.normal()))
            .collect();
        variant.set_learnable_scales(&scales);
    }
    if kind == VariantKind::EllipticalQuest {
        variant = AttentionVariant::EllipticalQuest {
            metric_diag: (0..d_h).map(|_| (0.3 * rng.normal()).exp()).collect(),
        };
    }
    variant
}

fn dot_all(a: &Matrix, b: &Matrix) -> f64 {
    a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).sum()
}

/// Finite-difference validation of [`attend_backward`] for one variant:
/// gradients with respect to queries, keys, values, and learnable scales.
pub fn check_attention_gradients(kind: VariantKind, instances: usize, seed: u64) -> CheckOutcome {
    let mut rng = Rng::new(seed).split(kind.name());
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let n = 1 + rng.gen_range(6);
        let d_h = 2 + rng.gen_range(7);
        let variant = randomized_variant(kind, d_h, &mut rng);
        let q = Matrix::randn(n, d_h, 1.0, &mut rng);
        let k = Matrix::randn(n, d_h, 1.0, &mut rng);
        let v = Matrix::randn(n, d_h, 1.0, &mut rng);
        let upstream = Matrix::randn(n, d_h, 1.0, &mut rng);

        let cache = attend(&variant, &q, &k, &v).expect("valid instance");
        let grads = attend_backward(&variant, &q, &k, &v, &cache, &upstream).expect("backward");

        let loss_at = |qm: &Matrix, km: &Matrix, vm: &Matrix, var: &AttentionVariant| -> f64 {
            dot_all(&attend(var, qm, km, vm).expect("fd eval").z, &upstream)
        };

        let fd = |target: usize| -> Vec<f64> {
            let base = match target {
                0 => q.data().to_vec(),
                1 => k.data().to_vec(),
                _ => v.data().to_vec(),
            };
            finite_diff_grad_flat(
                |flat| {
                    let m = Matrix::from_vec(n, d_h, flat.to_vec()).expect("shape");
                    match target {
                        0 => loss_at(&m, &k, &v, &variant),
                        1 => loss_at(&q, &m, &v, &variant),
                        _ => loss_at(&q, &k, &m, &variant),
                    }
                },
                &base,
                ATTN_FD_STEP,
            )
            .expect("finite differences")
        };

        worst = worst.max(max_rel_err(grads.dq.data(), &fd(0), REL_ERR_FLOOR));
        worst = worst.max(max_rel_err(grads.dk.data(), &fd(1), REL_ERR_FLOOR));
        worst = worst.max(max_rel_err(grads.dv.data(), &fd(2), REL_ERR_FLOOR));

        let scales = variant.learnable_scales();
        if !scales.is_empty() {
            let numeric = finite_diff_grad_flat(
                |flat| {
                    let mut var = variant.clone();
                    var.set_learnable_scales(flat);
                    loss_at(&q, &k, &v, &var)
                },
                &scales,
                ATTN_FD_STEP,
            )
            .expect("finite differences");
            worst = worst.max(max_rel_err(&grads.dscales.flatten(), &numeric, REL_ERR_FLOOR));
        }
    }
    CheckOutcome::from_err(
        format!("attention-grad/{}", kind.name()),
        worst,
        ATTN_REL_TOL,
    )
}

/// Randomize model parameters to O(0.3) weights so the gradient check runs
/// away from the near-zero initialization.
fn randomized_params(kind: VariantKind, seq_len: usize, rng: &mut Rng) -> ModelParams {
    let mut params = init_params(kind, seq_len, rng);
    let n = params.num_params();
    let flat: Vec<f64> = (0..n).map(|_| 0.3 * rng.normal()).collect();
    params.set_from_flat(&flat);
    params.ln1.gain = (0..MODEL_DIM).map(|_| 1.0 + 0.2 * rng.normal()).collect();
    params.ln2.gain = (0..MODEL_DIM).map(|_| 1.0 + 0.2 * rng.normal()).collect();
    let variant = randomized_variant(kind, MODEL_DIM, rng);
    params.variant = variant;
    params
}

/// Finite-difference validation of the full model backward pass through
/// every parameter, including the variant's learnable scales.
pub fn check_model_gradients(kind: VariantKind, instances: usize, seed: u64) -> CheckOutcome {
    let mut rng = Rng::new(seed).split(kind.name());
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let seq_len = 3 + rng.gen_range(3);
        let params = randomized_params(kind, seq_len, &mut rng);
        let x = Matrix::randn(seq_len, MODEL_DIM, 1.0, &mut rng);
        let label = rng.gen_range(NUM_CLASSES);

        let (logits, cache) = forward(&params, &x).expect("forward");
        let (_, grad_logits) = cross_entropy(&logits, label).expect("loss");
        let analytic = backward(&params, &cache, &grad_logits)
            .expect("backward")
            .flatten();

        let flat = params.flatten();
        let numeric = finite_diff_grad_flat(
            |p| {
                let mut trial = params.clone();
                trial.set_from_flat(p);
                let (l, _) = forward(&trial, &x).expect("fd forward");
                cross_entropy(&l, label).expect("fd loss").0
            },
            &flat,
            MODEL_FD_STEP,
        )
        .expect("finite differences");
        worst = worst.max(max_rel_err(&analytic, &numeric, REL_ERR_FLOOR));
    }
    CheckOutcome::from_err(format!("model-grad/{}", kind.name()), worst, MODEL_REL_TOL)
}

/// Gaussian directions with row norms drawn uniformly from `[lo, hi]`.
fn rows_with_norms(n: usize, d: usize, lo: f64, hi: f64, rng: &mut Rng) -> Matrix {
    let mut m = Matrix::randn(n, d, 1.0, rng);
    for i in 0..n {
        let row = m.row_mut(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let target = lo + (hi - lo) * rng.uniform();
        let factor = target / norm;
        for v in row {
            *v *= factor;
        }
    }
    m
}

/// Key-rescaling invariance for the key-normalized variants and query
/// rescaling for the query-normalized ones: positive per-row scales must
/// leave the attention map unchanged.
///
/// The `eps`-offset denominator makes the normalized row of `s k` differ
/// from that of `k` by about `eps (1 - 1/s) / ||k||`, so the check generates
/// rows with O(1)-plus norms and up-scalings (the norm-growth direction the
/// invariance is about); that keeps the deviation below the tolerance.
pub fn check_rescaling_invariance(instances: usize, seed: u64) -> CheckOutcome {
    let mut rng = Rng::new(seed).split("rescaling");
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let n = 2 + rng.gen_range(5);
        let d_h = 2 + rng.gen_range(5);
        let q = rows_with_norms(n, d_h, 3.0, 4.0, &mut rng);
        let k = rows_with_norms(n, d_h, 3.0, 6.0, &mut rng);
        let v = Matrix::randn(n, d_h, 1.0, &mut rng);
        let row_scales: Vec<f64> = (0..n).map(|_| 1.0 + 3.0 * rng.uniform()).collect();
        let scale_rows = |m: &Matrix| -> Matrix {
            let mut out = m.clone();
            for (i, &s) in row_scales.iter().enumerate() {
                for val in out.row_mut(i) {
                    *val *= s;
                }
            }
            out
        };
        let k_scaled = scale_rows(&k);
        let q_scaled = scale_rows(&q);

        for kind in VariantKind::ALL {
            let variant = match kind {
                VariantKind::EllipticalQuest => AttentionVariant::EllipticalQuest {
                    metric_diag: (0..d_h).map(|_| 0.8 + 0.45 * rng.uniform()).collect(),
                },
                _ => kind.instantiate(d_h),
            };
            let base = attend(&variant, &q, &k, &v).expect("base");
            let key_invariant = matches!(
                kind,
                VariantKind::Quest
                    | VariantKind::QkNormHs
                    | VariantKind::QkNormDs
                    | VariantKind::QkNormFull
                    | VariantKind::EllipticalQuest
            );
            if key_invariant {
                let scaled = attend(&variant, &q, &k_scaled, &v).expect("scaled keys");
                worst = worst.max(base.attn.max_abs_diff(&scaled.attn));
            }
            let query_invariant = matches!(
                kind,
                VariantKind::QNorm
                    | VariantKind::QkNormHs
                    | VariantKind::QkNormDs
                    | VariantKind::QkNormFull
            );
            if query_invariant {
                let scaled = attend(&variant, &q_scaled, &k, &v).expect("scaled queries");
                worst = worst.max(base.attn.max_abs_diff(&scaled.attn));
            }
        }
    }
    CheckOutcome::from_err("rescaling-invariance", worst, INVARIANCE_TOL)
}

/// For Quest, growing a query's norm sharpens its attention row: entropy
/// strictly decreases along the scaling chain 1 -> 2 -> 5 -> 10 whenever the
/// logit row is non-constant.
pub fn check_entropy_monotonicity(instances: usize, seed: u64) -> CheckOutcome {
    let mut rng = Rng::new(seed).split("entropy");
    let mut failures = 0usize;
    let mut attempts = 0usize;
    for _ in 0..instances {
        let n = 2 + rng.gen_range(5);
        let d_h = 2 + rng.gen_range(7);
        let (q, k, v) = loop {
            let q = Matrix::randn(n, d_h, 1.0, &mut rng);
            let k = Matrix::randn(n, d_h, 1.0, &mut rng);
            let v = Matrix::randn(n, d_h, 1.0, &mut rng);
            let out = attend(&AttentionVariant::Quest, &q, &k, &v).expect("probe");
            let row = out.logits.row(0);
            let spread = row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                - row.iter().copied().fold(f64::INFINITY, f64::min);
            if spread > 1e-2 {
                break (q, k, v);
            }
        };
        let entropy_at = |c: f64| -> f64 {
            let mut qs = q.clone();
            for val in qs.row_mut(0) {
                *val *= c;
            }
            attend(&AttentionVariant::Quest, &qs, &k, &v)
                .expect("scaled")
                .diagnostics
                .row_entropy[0]
        };
        let h: Vec<f64> = [1.0, 2.0, 5.0, 10.0].iter().map(|&c| entropy_at(c)).collect();
        attempts += 1;
        if !(h[1] < h[0] && h[2] < h[1] && h[3] < h[2]) {
            failures += 1;
        }
    }
    CheckOutcome {
        name: "entropy-monotonicity".into(),
        passed: failures == 0,
        detail: format!("{failures} of {attempts} instances violated strict decrease"),
    }
}

/// Positive rescaling of a query row must preserve the argmax of its
/// attention row for every variant.
pub fn check_argmax_stability(instances: usize, seed: u64) -> CheckOutcome {
    let mut rng = Rng::new(seed).split("argmax");
    let mut failures = 0usize;
    for _ in 0..instances {
        let n = 2 + rng.gen_range(5);
        let d_h = 2 + rng.gen_range(7);
        let q = Matrix::randn(n, d_h, 1.0, &mut rng);
        let k = Matrix::randn(n, d_h, 1.0, &mut rng);
        let v = Matrix::randn(n, d_h, 1.0, &mut rng);
        let row = rng.gen_range(n);
        let c = [0.5, 2.0, 17.0][rng.gen_range(3)];
        for kind in VariantKind::ALL {
            let variant = randomized_variant(kind, d_h, &mut rng);
            let base = attend(&variant, &q, &k, &v).expect("base");
            let mut qs = q.clone();
            for val in qs.row_mut(row) {
                *val *= c;
            }
            let scaled = attend(&variant, &qs, &k, &v).expect("scaled");
            let argmax = |m: &Matrix, i: usize| -> usize {
                let r = m.row(i);
                let mut best = 0;
                for (j, &val) in r.iter().enumerate() {
                    if val > r[best] {
                        best = j;
                    }
                }
                best
            };
            if argmax(&base.attn, row) != argmax(&scaled.attn, row) {
                failures += 1;
            }
        }
    }
    CheckOutcome {
        name: "argmax-stability".into(),
        passed: failures == 0,
        detail: format!("{failures} argmax changes across {instances} instances x 7 variants"),
    }
}

/// Reverse attention: rows sum to zero, and the query/key VJPs derived from
/// it match finite differences of the scalar surrogate loss
/// `<delta, softmax(C Q K^T) V W_o>` through standard attention.
pub fn check_reverse_attention(instances: usize, seed: u64) -> CheckOutcome {
    let mut rng = Rng::new(seed).split("reverse");
    let mut worst_rowsum: f64 = 0.0;
    let mut worst_grad: f64 = 0.0;
    for _ in 0..instances {
        let n = 2 + rng.gen_range(5);
        let d_h = 2 + rng.gen_range(5);
        let d_out = 2 + rng.gen_range(5);
        let q = Matrix::randn(n, d_h, 1.0, &mut rng);
        let k = Matrix::randn(n, d_h, 1.0, &mut rng);
        let v = Matrix::randn(n, d_h, 1.0, &mut rng);
        let w_o = Matrix::randn(d_h, d_out, 1.0, &mut rng);
        let delta = Matrix::randn(n, d_out, 1.0, &mut rng);

        let scale = 1.0 / (d_h as f64).sqrt();
        let attn = row_softmax(&q.matmul_nt(&k).expect("qk").scale(scale)).expect("softmax");
        let rev = reverse_attention(&attn, &delta, &w_o, &v, d_h).expect("reverse");
        for i in 0..n {
            let sum: f64 = rev.r.row(i).iter().sum();
            worst_rowsum = worst_rowsum.max(sum.abs());
        }
        let (delta_q, delta_k) = qk_vjp(&rev, &q, &k).expect("vjp");

        let surrogate = |qm: &Matrix, km: &Matrix| -> f64 {
            let a = row_softmax(&qm.matmul_nt(km).expect("qk").scale(scale)).expect("softmax");
            let out = a.matmul(&v).expect("av").matmul(&w_o).expect("proj");
            dot_all(&out, &delta)
        };
        let fd_q = finite_diff_grad_flat(
            |flat| {
                let m = Matrix::from_vec(n, d_h, flat.to_vec()).expect("shape");
                surrogate(&m, &k)
            },
            q.data(),
            ATTN_FD_STEP,
        )
        .expect("fd q");
        let fd_k = finite_diff_grad_flat(
            |flat| {
                let m = Matrix::from_vec(n, d_h, flat.to_vec()).expect("shape");
                surrogate(&q, &m)
            },
            k.data(),
            ATTN_FD_STEP,
        )
        .expect("fd k");
        worst_grad = worst_grad.max(max_rel_err(delta_q.data(), &fd_q, REL_ERR_FLOOR));
        worst_grad = worst_grad.max(max_rel_err(delta_k.data(), &fd_k, REL_ERR_FLOOR));
    }
    let passed = worst_rowsum < REVERSE_ROWSUM_TOL && worst_grad < ATTN_REL_TOL;
    CheckOutcome {
        name: "reverse-attention".into(),
        passed,
        detail: format!(
            "worst row sum {worst_rowsum:.3e} (tol {REVERSE_ROWSUM_TOL:.0e}), worst grad err {worst_grad:.3e} (tol {ATTN_REL_TOL:.0e})"
        ),
    }
}

/// The full suite at default instance counts, as run by the CLI.
pub fn run_all(seed: u64) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    for kind in VariantKind::ALL {
        out.push(check_attention_gradients(kind, 20, seed));
    }
    for kind in VariantKind::ALL {
        out.push(check_model_gradients(kind, 5, seed));
    }
    out.push(check_rescaling_invariance(100, seed));
    out.push(check_entropy_monotonicity(100, seed));
    out.push(check_argmax_stability(100, seed));
    out.push(check_reverse_attention(50, seed));
    out
}
