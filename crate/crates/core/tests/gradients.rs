//! Finite-difference validation of every backward pass: all seven attention
//! variants across small shapes, the full model for each variant, and the
//! reverse-attention identities.

use quest_core::attention::{attend, attend_backward, qk_vjp, reverse_attention, AttentionVariant, VariantKind};
use quest_core::matrix::Matrix;
use quest_core::ops::{max_rel_err, row_softmax};
use quest_core::rng::Rng;
use quest_core::toy_model::ResidualWiring;
use quest_core::verify;

#[test]
fn attention_backward_matches_finite_differences_all_variants() {
    for kind in VariantKind::ALL {
        let outcome = verify::check_attention_gradients(kind, 20, 0xA11CE);
        assert!(outcome.passed, "{}: {}", outcome.name, outcome.detail);
    }
}

#[test]
fn model_backward_matches_finite_differences_all_variants() {
    for kind in VariantKind::ALL {
        let outcome = verify::check_model_gradients(kind, 5, 0xB0B);
        assert!(outcome.passed, "{}: {}", outcome.name, outcome.detail);
    }
}

#[test]
fn conventional_wiring_backward_matches_finite_differences() {
    use quest_core::ops::{cross_entropy, finite_diff_grad_flat};
    use quest_core::toy_model::{backward, forward, init_params, MODEL_DIM};

    let mut rng = Rng::new(0xC0FFEE);
    let mut params = init_params(VariantKind::Quest, 4, &mut rng);
    params.wiring = ResidualWiring::Conventional;
    let flat: Vec<f64> = (0..params.num_params()).map(|_| 0.3 * rng.normal()).collect();
    params.set_from_flat(&flat);
    params.ln1.gain = vec![1.0; MODEL_DIM];
    params.ln2.gain = vec![1.0; MODEL_DIM];
    let x = Matrix::randn(4, MODEL_DIM, 1.0, &mut rng);

    let (logits, cache) = forward(&params, &x).unwrap();
    let (_, grad_logits) = cross_entropy(&logits, 2).unwrap();
    let analytic = backward(&params, &cache, &grad_logits).unwrap().flatten();
    let numeric = finite_diff_grad_flat(
        |p| {
            let mut trial = params.clone();
            trial.set_from_flat(p);
            let (l, _) = forward(&trial, &x).unwrap();
            cross_entropy(&l, 2).unwrap().0
        },
        &params.flatten(),
        1e-5,
    )
    .unwrap();
    let err = max_rel_err(&analytic, &numeric, 1e-3);
    assert!(err < 1e-4, "worst relative error {err}");
}

#[test]
fn reverse_attention_vjps_match_finite_differences() {
    let outcome = verify::check_reverse_attention(50, 0xD00D);
    assert!(outcome.passed, "{}: {}", outcome.name, outcome.detail);
}

#[test]
fn qk_vjps_match_attend_backward_for_standard_attention() {
    let mut rng = Rng::new(314);
    for _ in 0..20 {
        let n = 2 + rng.gen_range(5);
        let d_h = 2 + rng.gen_range(5);
        let d_out = 2 + rng.gen_range(5);
        let q = Matrix::randn(n, d_h, 1.0, &mut rng);
        let k = Matrix::randn(n, d_h, 1.0, &mut rng);
        let v = Matrix::randn(n, d_h, 1.0, &mut rng);
        let w_o = Matrix::randn(d_h, d_out, 1.0, &mut rng);
        let delta = Matrix::randn(n, d_out, 1.0, &mut rng);

        let cache = attend(&AttentionVariant::Standard, &q, &k, &v).unwrap();
        let rev = reverse_attention(&cache.attn, &delta, &w_o, &v, d_h).unwrap();
        let (delta_q, delta_k) = qk_vjp(&rev, &q, &k).unwrap();

        // Same upstream routed through the attention backward instead.
        let dz = delta.matmul_nt(&w_o).unwrap();
        let grads =
            attend_backward(&AttentionVariant::Standard, &q, &k, &v, &cache, &dz).unwrap();
        assert!(max_rel_err(delta_q.data(), grads.dq.data(), 1e-6) < 1e-10);
        assert!(max_rel_err(delta_k.data(), grads.dk.data(), 1e-6) < 1e-10);
    }
}

#[test]
fn quest_key_gradient_orthogonality_holds_at_scale() {
    let mut rng = Rng::new(2718);
    for _ in 0..50 {
        let n = 2 + rng.gen_range(5);
        let d_h = 2 + rng.gen_range(7);
        let q = Matrix::randn(n, d_h, 1.0, &mut rng);
        let k = Matrix::randn(n, d_h, 1.0, &mut rng);
        let v = Matrix::randn(n, d_h, 1.0, &mut rng);
        let upstream = Matrix::randn(n, d_h, 1.0, &mut rng);
        let cache = attend(&AttentionVariant::Quest, &q, &k, &v).unwrap();
        let grads =
            attend_backward(&AttentionVariant::Quest, &q, &k, &v, &cache, &upstream).unwrap();
        for j in 0..n {
            let dot: f64 = grads
                .dk
                .row(j)
                .iter()
                .zip(k.row(j))
                .map(|(&a, &b)| a * b)
                .sum();
            assert!(dot.abs() < 1e-10, "n={n} d_h={d_h} token {j}: {dot}");
        }
    }
}

#[test]
fn reverse_attention_rows_sum_to_zero_on_trained_shapes() {
    let mut rng = Rng::new(999);
    let n = 21;
    let d_h = 20;
    let q = Matrix::randn(n, d_h, 1.0, &mut rng);
    let k = Matrix::randn(n, d_h, 1.0, &mut rng);
    let v = Matrix::randn(n, d_h, 1.0, &mut rng);
    let w_o = Matrix::randn(d_h, d_h, 1.0, &mut rng);
    let delta = Matrix::randn(n, d_h, 1.0, &mut rng);
    let attn = row_softmax(&q.matmul_nt(&k).unwrap().scale(1.0 / (d_h as f64).sqrt())).unwrap();
    let rev = reverse_attention(&attn, &delta, &w_o, &v, d_h).unwrap();
    for i in 0..n {
        let s: f64 = rev.r.row(i).iter().sum();
        assert!(s.abs() < 1e-10);
    }
}
