//! Numerically stable elementary operations with analytic backward passes,
//! plus the central finite-difference oracle used to validate them.
//!
//! Conventions: all row-wise operations treat each matrix row independently;
//! backward functions take the upstream gradient in the output's shape and
//! return gradients in the input's shape.

use crate::error::CoreError;
use crate::matrix::Matrix;

/// Denominator offset for row normalization: `v / (||v|| + EPS_L2)`.
/// Keeps unit rows essentially unchanged and zero rows at zero.
pub const EPS_L2: f64 = 1e-12;

/// Variance offset used inside the layer-norm square root.
pub const EPS_LAYER_NORM: f64 = 1e-5;

/// Row-wise softmax with per-row max subtraction.
pub fn row_softmax(logits: &Matrix) -> Result<Matrix, CoreError> {
    if !logits.is_finite() {
        return Err(CoreError::NonFinite { op: "row_softmax" });
    }
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    Ok(out)
}

/// VJP of [`row_softmax`]: `out[i][j] = p[i][j] * (u[i][j] - sum_k p[i][k] u[i][k])`.
///
/// Every output row sums to zero: softmax outputs live on the simplex, so
/// gradients are tangent to it.
pub fn row_softmax_backward(probs: &Matrix, upstream: &Matrix) -> Result<Matrix, CoreError> {
    if probs.rows() != upstream.rows() || probs.cols() != upstream.cols() {
        return Err(CoreError::shape(
            "row_softmax_backward",
            format!(
                "probs {}x{} vs upstream {}x{}",
                probs.rows(),
                probs.cols(),
                upstream.rows(),
                upstream.cols()
            ),
        ));
    }
    let mut out = Matrix::zeros(probs.rows(), probs.cols());
    for i in 0..probs.rows() {
        let p = probs.row(i);
        let u = upstream.row(i);
        let dot: f64 = p.iter().zip(u).map(|(&pj, &uj)| pj * uj).sum();
        for (o, (&pj, &uj)) in out.row_mut(i).iter_mut().zip(p.iter().zip(u)) {
            *o = pj * (uj - dot);
        }
    }
    Ok(out)
}

/// Shannon entropy (nats) of each row of a row-stochastic matrix.
pub fn row_entropies(probs: &Matrix) -> Vec<f64> {
    (0..probs.rows())
        .map(|i| {
            probs.row(i).iter().fold(0.0, |acc, &p| {
                if p > 0.0 {
                    acc - p * p.ln()
                } else {
                    acc
                }
            })
        })
        .collect()
}

/// Normalize each row to (near) unit length: `row / (||row|| + epsilon)`.
/// Returns the normalized matrix and the raw (pre-normalization) row norms.
pub fn l2_normalize_rows(m: &Matrix, epsilon: f64) -> (Matrix, Vec<f64>) {
    let norms = m.row_norms();
    let mut out = m.clone();
    for (i, &n) in norms.iter().enumerate() {
        let inv = 1.0 / (n + epsilon);
        for v in out.row_mut(i) {
            *v *= inv;
        }
    }
    (out, norms)
}

/// VJP of [`l2_normalize_rows`] with respect to the raw input rows.
///
/// For a row `v` with norm `n` and upstream `u` on the normalized row:
/// `dv = u/(n+eps) - v (v.u) / (n (n+eps)^2)`; zero rows fall back to the
/// exact Jacobian at the origin, `u/eps`. The result removes (up to an
/// `eps`-sized residual) the component of the gradient along `v` itself.
pub fn l2_normalize_rows_backward(
    m: &Matrix,
    norms: &[f64],
    epsilon: f64,
    upstream: &Matrix,
) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        let v = m.row(i);
        let u = upstream.row(i);
        let n = norms[i];
        let denom = n + epsilon;
        if n == 0.0 {
            for (o, &uj) in out.row_mut(i).iter_mut().zip(u) {
                *o = uj / epsilon;
            }
            continue;
        }
        let vu: f64 = v.iter().zip(u).map(|(&a, &b)| a * b).sum();
        let radial = vu / (n * denom * denom);
        for (o, (&vj, &uj)) in out.row_mut(i).iter_mut().zip(v.iter().zip(u)) {
            *o = uj / denom - vj * radial;
        }
    }
    out
}

/// Output of [`layer_norm`]; keeps what the backward pass needs.
pub struct LayerNormOut {
    pub y: Matrix,
    x_hat: Matrix,
    inv_std: Vec<f64>,
}

/// Lane-split reductions: four independent accumulators let the compiler
/// vectorize instead of serializing on one addition chain.
fn lane_sum(row: &[f64]) -> f64 {
    let mut lanes = [0.0f64; 4];
    let mut chunks = row.chunks_exact(4);
    for c in chunks.by_ref() {
        lanes[0] += c[0];
        lanes[1] += c[1];
        lanes[2] += c[2];
        lanes[3] += c[3];
    }
    let mut total = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
    for &v in chunks.remainder() {
        total += v;
    }
    total
}

fn lane_sum_sq_centered(row: &[f64], mean: f64) -> f64 {
    let mut lanes = [0.0f64; 4];
    let mut chunks = row.chunks_exact(4);
    for c in chunks.by_ref() {
        let (a, b, x, y) = (c[0] - mean, c[1] - mean, c[2] - mean, c[3] - mean);
        lanes[0] += a * a;
        lanes[1] += b * b;
        lanes[2] += x * x;
        lanes[3] += y * y;
    }
    let mut total = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
    for &v in chunks.remainder() {
        let c = v - mean;
        total += c * c;
    }
    total
}

/// Per-row standardization followed by an affine map `gain (.) x_hat + bias`.
pub fn layer_norm(
    x: &Matrix,
    gain: &[f64],
    bias: &[f64],
    epsilon: f64,
) -> Result<LayerNormOut, CoreError> {
    if gain.len() != x.cols() || bias.len() != x.cols() {
        return Err(CoreError::shape(
            "layer_norm",
            format!(
                "gain/bias lengths {}/{} vs {} cols",
                gain.len(),
                bias.len(),
                x.cols()
            ),
        ));
    }
    let d = x.cols() as f64;
    let mut y = Matrix::zeros(x.rows(), x.cols());
    let mut x_hat = Matrix::zeros(x.rows(), x.cols());
    let mut inv_std = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = lane_sum(row) / d;
        let var = lane_sum_sq_centered(row, mean) / d;
        let istd = 1.0 / (var + epsilon).sqrt();
        inv_std.push(istd);
        let xh = x_hat.row_mut(i);
        for (h_slot, &xv) in xh.iter_mut().zip(row) {
            *h_slot = (xv - mean) * istd;
        }
        for ((y_slot, &h), (&g, &b)) in y
            .row_mut(i)
            .iter_mut()
            .zip(xh.iter())
            .zip(gain.iter().zip(bias))
        {
            *y_slot = g * h + b;
        }
    }
    Ok(LayerNormOut { y, x_hat, inv_std })
}

/// VJP of [`layer_norm`]: gradients with respect to the input, gain, and bias.
pub fn layer_norm_backward(
    cache: &LayerNormOut,
    gain: &[f64],
    upstream: &Matrix,
) -> (Matrix, Vec<f64>, Vec<f64>) {
    let rows = cache.x_hat.rows();
    let cols = cache.x_hat.cols();
    let d = cols as f64;
    let mut dx = Matrix::zeros(rows, cols);
    let mut dgain = vec![0.0; cols];
    let mut dbias = vec![0.0; cols];
    for i in 0..rows {
        let xh = cache.x_hat.row(i);
        let u = upstream.row(i);
        let istd = cache.inv_std[i];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for ((&uj, &xhj), ((&gj, dg), db)) in u
            .iter()
            .zip(xh)
            .zip(gain.iter().zip(dgain.iter_mut()).zip(dbias.iter_mut()))
        {
            let dxh = uj * gj;
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xhj;
            *dg += uj * xhj;
            *db += uj;
        }
        mean_dxhat /= d;
        mean_dxhat_xhat /= d;
        for ((dst, (&uj, &gj)), &xhj) in dx
            .row_mut(i)
            .iter_mut()
            .zip(u.iter().zip(gain))
            .zip(xh)
        {
            let dxh = uj * gj;
            *dst = istd * (dxh - mean_dxhat - xhj * mean_dxhat_xhat);
        }
    }
    (dx, dgain, dbias)
}

/// Cross-entropy of a logit vector against a class index.
/// Returns the loss and the gradient `softmax(logits) - onehot(label)`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>), CoreError> {
    if label >= logits.len() {
        return Err(CoreError::invalid(
            "cross_entropy",
            format!("label {label} out of range for {} classes", logits.len()),
        ));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut grad: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = grad.iter().sum();
    let loss = sum.ln() - (logits[label] - max);
    let inv = 1.0 / sum;
    for g in grad.iter_mut() {
        *g *= inv;
    }
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// GELU (tanh approximation) and its exact derivative.
pub fn gelu(x: f64) -> f64 {
    gelu_with_tanh(x).0
}

/// GELU value together with the inner tanh, which the backward pass reuses.
pub fn gelu_with_tanh(x: f64) -> (f64, f64) {
    const A: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const B: f64 = 0.044715;
    // tanh(a) = 1 - 2 / (exp(2a) + 1); saturates cleanly when exp overflows.
    let a = A * (x + B * x * x * x);
    let t = 1.0 - 2.0 / ((2.0 * a).exp() + 1.0);
    (0.5 * x * (1.0 + t), t)
}

pub fn gelu_prime(x: f64) -> f64 {
    gelu_prime_cached(x, gelu_with_tanh(x).1)
}

/// Derivative of [`gelu`] given the cached inner tanh value.
pub fn gelu_prime_cached(x: f64, t: f64) -> f64 {
    const A: f64 = 0.797_884_560_802_865_4;
    const B: f64 = 0.044715;
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * A * (1.0 + 3.0 * B * x * x)
}

/// Central finite differences of a scalar function over a flat slice:
/// `(f(x + h e_i) - f(x - h e_i)) / 2h` per coordinate.
pub fn finite_diff_grad_flat(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    h: f64,
) -> Result<Vec<f64>, CoreError> {
    if h <= 0.0 {
        return Err(CoreError::invalid("finite_diff_grad", "h must be positive"));
    }
    let mut point = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = point[i];
        point[i] = orig + h;
        let plus = f(&point);
        point[i] = orig - h;
        let minus = f(&point);
        point[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(CoreError::NonFinite {
                op: "finite_diff_grad",
            });
        }
        grad[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Central finite differences of a scalar function of a matrix.
pub fn finite_diff_grad(
    mut f: impl FnMut(&Matrix) -> f64,
    x: &Matrix,
    h: f64,
) -> Result<Matrix, CoreError> {
    let (rows, cols) = (x.rows(), x.cols());
    let grad = finite_diff_grad_flat(
        |flat| {
            let m = Matrix::from_vec(rows, cols, flat.to_vec()).expect("shape fixed");
            f(&m)
        },
        x.data(),
        h,
    )?;
    Matrix::from_vec(rows, cols, grad)
}

/// Worst relative error between two gradients, with a floor on the
/// denominator so that near-zero entries are compared absolutely.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn softmax_equal_logits_uniform() {
        let m = Matrix::from_vec(1, 3, vec![4.2, 4.2, 4.2]).unwrap();
        let p = row_softmax(&m).unwrap();
        for j in 0..3 {
            assert!((p.get(0, j) - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_analytic_two_way() {
        let m = Matrix::from_vec(1, 2, vec![3.0f64.ln(), 0.0]).unwrap();
        let p = row_softmax(&m).unwrap();
        assert!((p.get(0, 0) - 0.75).abs() < 1e-15);
        assert!((p.get(0, 1) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn softmax_no_overflow_on_huge_logits() {
        let m = Matrix::from_vec(1, 2, vec![1000.0, 0.0]).unwrap();
        let p = row_softmax(&m).unwrap();
        assert!(p.is_finite());
        assert_eq!(p.get(0, 0), 1.0);
        assert_eq!(p.get(0, 1), 0.0);
    }

    #[test]
    fn softmax_rejects_nan() {
        let m = Matrix::from_vec(1, 2, vec![f64::NAN, 0.0]).unwrap();
        assert!(row_softmax(&m).is_err());
    }

    #[test]
    fn softmax_backward_zero_upstream() {
        let p = Matrix::from_vec(2, 2, vec![0.5, 0.5, 0.9, 0.1]).unwrap();
        let u = Matrix::zeros(2, 2);
        let g = row_softmax_backward(&p, &u).unwrap();
        assert_eq!(g, Matrix::zeros(2, 2));
    }

    #[test]
    fn softmax_backward_uniform_two_way() {
        let p = Matrix::from_vec(1, 2, vec![0.5, 0.5]).unwrap();
        let u = Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        let g = row_softmax_backward(&p, &u).unwrap();
        assert!((g.get(0, 0) - 0.25).abs() < 1e-15);
        assert!((g.get(0, 1) + 0.25).abs() < 1e-15);
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let mut rng = Rng::new(5);
        let x = Matrix::randn(3, 4, 1.0, &mut rng);
        let upstream = Matrix::randn(3, 4, 1.0, &mut rng);
        let probs = row_softmax(&x).unwrap();
        let analytic = row_softmax_backward(&probs, &upstream).unwrap();
        let numeric = finite_diff_grad(
            |m| {
                let p = row_softmax(m).unwrap();
                p.data()
                    .iter()
                    .zip(upstream.data())
                    .map(|(&a, &b)| a * b)
                    .sum()
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(max_rel_err(analytic.data(), numeric.data(), 1e-3) < 1e-6);
    }

    #[test]
    fn l2_normalize_three_four_row() {
        let m = Matrix::from_vec(1, 2, vec![3.0, 4.0]).unwrap();
        let (norm, norms) = l2_normalize_rows(&m, EPS_L2);
        assert!((norm.get(0, 0) - 0.6).abs() < 1e-12);
        assert!((norm.get(0, 1) - 0.8).abs() < 1e-12);
        assert_eq!(norms[0], 5.0);
    }

    #[test]
    fn l2_normalize_unit_row_nearly_unchanged() {
        let m = Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        let (norm, _) = l2_normalize_rows(&m, EPS_L2);
        assert!((norm.get(0, 0) - 1.0).abs() < 1e-11);
    }

    #[test]
    fn l2_normalize_zero_row_stays_zero() {
        let m = Matrix::zeros(1, 3);
        let (norm, norms) = l2_normalize_rows(&m, EPS_L2);
        assert!(norm.is_finite());
        assert_eq!(norm, Matrix::zeros(1, 3));
        assert_eq!(norms[0], 0.0);
    }

    #[test]
    fn l2_normalize_backward_matches_finite_differences() {
        let mut rng = Rng::new(6);
        let m = Matrix::randn(3, 5, 1.0, &mut rng);
        let upstream = Matrix::randn(3, 5, 1.0, &mut rng);
        let (_, norms) = l2_normalize_rows(&m, EPS_L2);
        let analytic = l2_normalize_rows_backward(&m, &norms, EPS_L2, &upstream);
        let numeric = finite_diff_grad(
            |x| {
                let (n, _) = l2_normalize_rows(x, EPS_L2);
                n.data()
                    .iter()
                    .zip(upstream.data())
                    .map(|(&a, &b)| a * b)
                    .sum()
            },
            &m,
            1e-6,
        )
        .unwrap();
        assert!(max_rel_err(analytic.data(), numeric.data(), 1e-3) < 1e-6);
    }

    #[test]
    fn layer_norm_constant_row_maps_to_bias() {
        let x = Matrix::from_vec(1, 4, vec![7.0; 4]).unwrap();
        let out = layer_norm(&x, &[1.0; 4], &[0.0; 4], EPS_LAYER_NORM).unwrap();
        for j in 0..4 {
            assert!(out.y.get(0, j).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardized_row_fixed_point() {
        let x = Matrix::from_vec(1, 2, vec![-1.0, 1.0]).unwrap();
        let out = layer_norm(&x, &[1.0; 2], &[0.0; 2], EPS_LAYER_NORM).unwrap();
        assert!((out.y.get(0, 0) + 1.0).abs() < 1e-4);
        assert!((out.y.get(0, 1) - 1.0).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let mut rng = Rng::new(7);
        let x = Matrix::randn(3, 6, 1.0, &mut rng);
        let gain: Vec<f64> = (0..6).map(|_| 1.0 + 0.3 * rng.normal()).collect();
        let bias: Vec<f64> = (0..6).map(|_| 0.2 * rng.normal()).collect();
        let upstream = Matrix::randn(3, 6, 1.0, &mut rng);
        let loss = |g: &[f64], b: &[f64], xm: &Matrix| -> f64 {
            let out = layer_norm(xm, g, b, EPS_LAYER_NORM).unwrap();
            out.y
                .data()
                .iter()
                .zip(upstream.data())
                .map(|(&a, &u)| a * u)
                .sum()
        };
        let cache = layer_norm(&x, &gain, &bias, EPS_LAYER_NORM).unwrap();
        let (dx, dgain, dbias) = layer_norm_backward(&cache, &gain, &upstream);

        let ndx = finite_diff_grad(|m| loss(&gain, &bias, m), &x, 1e-5).unwrap();
        assert!(max_rel_err(dx.data(), ndx.data(), 1e-3) < 1e-5);
        let ndgain = finite_diff_grad_flat(|g| loss(g, &bias, &x), &gain, 1e-5).unwrap();
        assert!(max_rel_err(&dgain, &ndgain, 1e-3) < 1e-5);
        let ndbias = finite_diff_grad_flat(|b| loss(&gain, b, &x), &bias, 1e-5).unwrap();
        assert!(max_rel_err(&dbias, &ndbias, 1e-3) < 1e-5);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        let logits = vec![0.37; 10];
        let (loss, grad) = cross_entropy(&logits, 0).unwrap();
        assert!((loss - 10.0f64.ln()).abs() < 1e-12);
        assert!((grad[0] - (0.1 - 1.0)).abs() < 1e-12);
        for &g in &grad[1..] {
            assert!((g - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        assert!(cross_entropy(&[0.0, 0.0], 2).is_err());
    }

    #[test]
    fn cross_entropy_grad_matches_finite_differences() {
        let mut rng = Rng::new(8);
        let logits: Vec<f64> = (0..7).map(|_| rng.normal()).collect();
        let (_, grad) = cross_entropy(&logits, 3).unwrap();
        let numeric =
            finite_diff_grad_flat(|l| cross_entropy(l, 3).unwrap().0, &logits, 1e-6).unwrap();
        assert!(max_rel_err(&grad, &numeric, 1e-3) < 1e-6);
    }

    #[test]
    fn finite_diff_square_at_three() {
        let x = Matrix::from_vec(1, 1, vec![3.0]).unwrap();
        let g = finite_diff_grad(|m| m.get(0, 0) * m.get(0, 0), &x, 1e-6).unwrap();
        assert!((g.get(0, 0) - 6.0).abs() < 1e-6);
    }

    #[test]
    fn finite_diff_sine_at_zero() {
        let x = Matrix::from_vec(1, 1, vec![0.0]).unwrap();
        let g = finite_diff_grad(|m| m.get(0, 0).sin(), &x, 1e-6).unwrap();
        assert!((g.get(0, 0) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn finite_diff_matches_quadratic_gradient() {
        // f(x) = 0.5 x^T A x with symmetric A has gradient A x.
        let mut rng = Rng::new(9);
        let raw = Matrix::randn(4, 4, 1.0, &mut rng);
        let a = raw.add(&raw.transpose()).unwrap().scale(0.5);
        let x = Matrix::randn(4, 1, 1.0, &mut rng);
        let numeric = finite_diff_grad(
            |v| {
                let av = a.matmul(v).unwrap();
                0.5 * v
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(&p, &q)| p * q)
                    .sum::<f64>()
            },
            &x,
            1e-6,
        )
        .unwrap();
        let analytic = a.matmul(&x).unwrap();
        assert!(max_rel_err(analytic.data(), numeric.data(), 1e-3) < 1e-8);
    }

    #[test]
    fn finite_diff_rejects_bad_step_and_nonfinite() {
        let x = Matrix::zeros(1, 1);
        assert!(finite_diff_grad(|_| 0.0, &x, 0.0).is_err());
        assert!(finite_diff_grad(|m| 1.0 / m.get(0, 0), &x, 1e-6).is_ok());
        assert!(finite_diff_grad(|_| f64::NAN, &x, 1e-6).is_err());
    }

    #[test]
    fn gelu_derivative_matches_finite_differences() {
        for &x in &[-2.5, -0.7, 0.0, 0.3, 1.9] {
            let h = 1e-6;
            let numeric = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_prime(x) - numeric).abs() < 1e-8, "x = {x}");
        }
    }
}
