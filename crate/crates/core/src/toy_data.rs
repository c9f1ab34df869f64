//! Synthetic retrieval task with a planted spurious correlation.
//!
//! Each sample is a sequence of `N` tokens; every token is a 10-d
//! real-valued part concatenated with a 10-d one-hot part. One position `L`
//! (drawn from a rounded normal, so position itself is a weak shortcut)
//! carries the answer: its one-hot class is the label. The answer token's
//! real part is distributed atypically — `N(0, Sigma)` with a non-identity
//! covariance for unbiased samples, or tightly clustered around a shared
//! bias vector `b` for biased samples. The bias is an easy-to-learn shortcut
//! that only resolves half the training data and is absent from test sets.

use crate::error::CoreError;
use crate::matrix::Matrix;
use crate::rng::Rng;
use std::io::Write;
use std::path::Path;

/// Generation parameters. Defaults follow the study setup: sequences of 20
/// tokens, 10-d real part plus 10-d one-hot part, answer positions from
/// `round(N(10, 2))`, half of the training samples biased.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub seq_len: usize,
    pub d_key: usize,
    pub d_val: usize,
    pub mu_l: f64,
    pub sigma_l: f64,
    pub p_bias: f64,
    pub biased_cov_scale: f64,
    pub train_size: usize,
    pub test_size: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            seq_len: 20,
            d_key: 10,
            d_val: 10,
            mu_l: 10.0,
            sigma_l: 2.0,
            p_bias: 0.5,
            biased_cov_scale: 0.1,
            train_size: 1600,
            test_size: 1000,
        }
    }
}

impl ToyConfig {
    /// Total token dimension (real part + one-hot part).
    pub fn dim(&self) -> usize {
        self.d_key + self.d_val
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        if !(0.0..=1.0).contains(&self.p_bias) {
            return Err(CoreError::invalid(
                "ToyConfig",
                format!("p_bias {} outside [0, 1]", self.p_bias),
            ));
        }
        if (self.seq_len as f64) <= self.mu_l {
            return Err(CoreError::invalid(
                "ToyConfig",
                format!("seq_len {} must exceed mu_l {}", self.seq_len, self.mu_l),
            ));
        }
        if self.train_size == 0 || self.test_size == 0 || self.d_key == 0 || self.d_val == 0 {
            return Err(CoreError::invalid("ToyConfig", "sizes must be positive"));
        }
        Ok(())
    }
}

/// One sampled world: the answer-token covariance `Sigma = S S^T`, its
/// factor `S`, and the bias vector `b ~ N(0, Sigma)` shared by all biased
/// samples drawn from this realization.
#[derive(Debug, Clone)]
pub struct DataRealization {
    pub sigma: Matrix,
    pub s_factor: Matrix,
    pub bias_vec: Vec<f64>,
    pub seed: u64,
}

/// One sequence plus its annotations.
#[derive(Debug, Clone)]
pub struct Sample {
    /// `seq_len x (d_key + d_val)`; columns `0..d_key` are the real part,
    /// the rest the one-hot part.
    pub x: Matrix,
    pub answer_pos: usize,
    pub biased: bool,
    pub label: usize,
}

/// Draw the covariance factor and bias vector for one data world.
pub fn make_realization(cfg: &ToyConfig, seed: u64) -> DataRealization {
    let root = Rng::new(seed);
    let mut s_rng = root.split("s_factor");
    let s_factor = Matrix::randn(cfg.d_key, cfg.d_key, 1.0, &mut s_rng);
    let sigma = s_factor
        .matmul_nt(&s_factor)
        .expect("square factor");
    let mut b_rng = root.split("bias");
    let bias_vec = sample_correlated(&s_factor, &mut b_rng);
    DataRealization {
        sigma,
        s_factor,
        bias_vec,
        seed,
    }
}

/// Draw `S z` with `z ~ N(0, I)`, i.e. one `N(0, Sigma)` vector.
fn sample_correlated(s_factor: &Matrix, rng: &mut Rng) -> Vec<f64> {
    let d = s_factor.rows();
    let z: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    (0..d)
        .map(|i| {
            s_factor
                .row(i)
                .iter()
                .zip(&z)
                .map(|(&s, &zj)| s * zj)
                .sum()
        })
        .collect()
}

/// Answer position: round-to-nearest of a `N(mu_l, sigma_l)` draw, clamped
/// to the valid index range. At the default (10, 2) the modal position 10
/// occurs on roughly 20% of draws.
pub fn sample_position(cfg: &ToyConfig, rng: &mut Rng) -> usize {
    let draw = cfg.mu_l + cfg.sigma_l * rng.normal();
    let idx = draw.round();
    if idx < 0.0 {
        0
    } else if idx as usize >= cfg.seq_len {
        cfg.seq_len - 1
    } else {
        idx as usize
    }
}

/// Sample `n` sequences from a realization. With `allow_bias` false every
/// sample is unbiased (`u = 0`), which is how test sets are generated.
pub fn sample_dataset(
    real: &DataRealization,
    cfg: &ToyConfig,
    n: usize,
    allow_bias: bool,
    rng: &mut Rng,
) -> Result<Vec<Sample>, CoreError> {
    cfg.validate()?;
    if n == 0 {
        return Err(CoreError::invalid("sample_dataset", "n must be positive"));
    }
    let d = cfg.dim();
    let sqrt_scale = cfg.biased_cov_scale.sqrt();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let answer_pos = sample_position(cfg, rng);
        let biased = allow_bias && rng.bernoulli(cfg.p_bias);
        let mut x = Matrix::zeros(cfg.seq_len, d);
        let mut label = 0;
        for i in 0..cfg.seq_len {
            let row = x.row_mut(i);
            if i == answer_pos {
                if biased {
                    for (j, v) in row[..cfg.d_key].iter_mut().enumerate() {
                        *v = real.bias_vec[j] + sqrt_scale * rng.normal();
                    }
                } else {
                    let corr = sample_correlated(&real.s_factor, rng);
                    row[..cfg.d_key].copy_from_slice(&corr);
                }
            } else {
                for v in row[..cfg.d_key].iter_mut() {
                    *v = rng.normal();
                }
            }
            let class = rng.gen_range(cfg.d_val);
            row[cfg.d_key + class] = 1.0;
            if i == answer_pos {
                label = class;
            }
        }
        out.push(Sample {
            x,
            answer_pos,
            biased,
            label,
        });
    }
    Ok(out)
}

/// Write a dataset as JSON lines, one object per sample.
pub fn dump_dataset_jsonl(samples: &[Sample], path: &Path) -> std::io::Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        let rows: Vec<serde_json::Value> = (0..s.x.rows())
            .map(|i| serde_json::Value::from(s.x.row(i).to_vec()))
            .collect();
        let obj = serde_json::json!({
            "x": rows,
            "answer_pos": s.answer_pos,
            "biased": s.biased,
            "label": s.label,
        });
        writeln!(file, "{obj}")?;
    }
    Ok(())
}

/// Write the realization sidecar (`Sigma`, `b`, seed) as a JSON object.
pub fn dump_realization_json(real: &DataRealization, path: &Path) -> std::io::Result<()> {
    let sigma_rows: Vec<serde_json::Value> = (0..real.sigma.rows())
        .map(|i| serde_json::Value::from(real.sigma.row(i).to_vec()))
        .collect();
    let obj = serde_json::json!({
        "sigma": sigma_rows,
        "b": real.bias_vec,
        "seed": real.seed,
    });
    std::fs::write(path, format!("{obj}\n"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn realization_is_deterministic() {
        let cfg = ToyConfig::default();
        let a = make_realization(&cfg, 9);
        let b = make_realization(&cfg, 9);
        assert_eq!(a.sigma, b.sigma);
        assert_eq!(a.bias_vec, b.bias_vec);
        let c = make_realization(&cfg, 10);
        assert_ne!(a.sigma, c.sigma);
    }

    #[test]
    fn sigma_is_symmetric_and_psd() {
        let cfg = ToyConfig::default();
        let real = make_realization(&cfg, 3);
        assert!(real.sigma.max_abs_diff(&real.sigma.transpose()) < 1e-12);
        // Rayleigh quotients of random directions stay non-negative.
        let mut rng = Rng::new(77);
        for _ in 0..200 {
            let x: Vec<f64> = (0..cfg.d_key).map(|_| rng.normal()).collect();
            let mut quad = 0.0;
            for i in 0..cfg.d_key {
                for j in 0..cfg.d_key {
                    quad += x[i] * real.sigma.get(i, j) * x[j];
                }
            }
            assert!(quad >= -1e-10, "negative quadratic form {quad}");
        }
    }

    #[test]
    fn bias_vector_covariance_matches_sigma() {
        // Monte-Carlo: empirical covariance of 100k draws of b-style
        // vectors approaches Sigma in relative Frobenius norm.
        let cfg = ToyConfig::default();
        let real = make_realization(&cfg, 4);
        let d = cfg.d_key;
        let n = 100_000;
        let mut rng = Rng::new(123);
        let mut acc = vec![0.0; d * d];
        for _ in 0..n {
            let v = sample_correlated(&real.s_factor, &mut rng);
            for i in 0..d {
                for j in 0..d {
                    acc[i * d + j] += v[i] * v[j];
                }
            }
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..d {
            for j in 0..d {
                let emp = acc[i * d + j] / n as f64;
                let diff = emp - real.sigma.get(i, j);
                num += diff * diff;
                den += real.sigma.get(i, j) * real.sigma.get(i, j);
            }
        }
        let rel = (num / den).sqrt();
        assert!(rel < 0.05, "relative Frobenius error {rel}");
    }

    #[test]
    fn position_mode_frequency_near_20_percent() {
        let cfg = ToyConfig::default();
        let mut rng = Rng::new(5);
        let n = 10_000;
        let mut counts = vec![0usize; cfg.seq_len];
        for _ in 0..n {
            counts[sample_position(&cfg, &mut rng)] += 1;
        }
        let modal = counts.iter().copied().max().unwrap() as f64 / n as f64;
        assert!((modal - 0.20).abs() < 0.04, "modal frequency {modal}");
        assert_eq!(counts.iter().sum::<usize>(), n);
    }

    #[test]
    fn position_degenerate_sigma_always_mode() {
        let cfg = ToyConfig {
            sigma_l: 0.0,
            ..ToyConfig::default()
        };
        let mut rng = Rng::new(6);
        for _ in 0..100 {
            assert_eq!(sample_position(&cfg, &mut rng), 10);
        }
    }

    #[test]
    fn biased_fraction_matches_bernoulli() {
        let cfg = ToyConfig::default();
        let real = make_realization(&cfg, 1);
        let mut rng = Rng::new(2);
        let n = 10_000;
        let data = sample_dataset(&real, &cfg, n, true, &mut rng).unwrap();
        let frac = data.iter().filter(|s| s.biased).count() as f64 / n as f64;
        // 3-sigma binomial band around 0.5.
        assert!((frac - 0.5).abs() < 0.015, "biased fraction {frac}");
    }

    #[test]
    fn unbiased_dataset_has_no_biased_samples() {
        let cfg = ToyConfig::default();
        let real = make_realization(&cfg, 1);
        let mut rng = Rng::new(3);
        let data = sample_dataset(&real, &cfg, 500, false, &mut rng).unwrap();
        assert!(data.iter().all(|s| !s.biased));
    }

    #[test]
    fn labels_match_answer_row_onehot() {
        let cfg = ToyConfig::default();
        let real = make_realization(&cfg, 8);
        let mut rng = Rng::new(9);
        let data = sample_dataset(&real, &cfg, 200, true, &mut rng).unwrap();
        for s in &data {
            for i in 0..cfg.seq_len {
                let onehot = &s.x.row(i)[cfg.d_key..];
                assert_eq!(onehot.iter().filter(|&&v| v == 1.0).count(), 1);
                assert_eq!(onehot.iter().filter(|&&v| v == 0.0).count(), cfg.d_val - 1);
            }
            let hot = s.x.row(s.answer_pos)[cfg.d_key..]
                .iter()
                .position(|&v| v == 1.0)
                .unwrap();
            assert_eq!(hot, s.label);
        }
    }

    #[test]
    fn label_marginal_is_uniform() {
        let cfg = ToyConfig::default();
        let real = make_realization(&cfg, 8);
        let mut rng = Rng::new(10);
        let n = 10_000;
        let data = sample_dataset(&real, &cfg, n, true, &mut rng).unwrap();
        let mut counts = vec![0usize; cfg.d_val];
        for s in &data {
            counts[s.label] += 1;
        }
        // 3-sigma multinomial band around n/10.
        let expected = n as f64 / cfg.d_val as f64;
        let sd = (n as f64 * 0.1 * 0.9).sqrt();
        for (c, &count) in counts.iter().enumerate() {
            assert!(
                (count as f64 - expected).abs() < 3.0 * sd,
                "class {c}: {count}"
            );
        }
    }

    #[test]
    fn biased_answer_rows_concentrate_near_bias() {
        let cfg = ToyConfig::default();
        let real = make_realization(&cfg, 8);
        let mut rng = Rng::new(11);
        let data = sample_dataset(&real, &cfg, 10_000, true, &mut rng).unwrap();
        let mut sum = 0.0;
        let mut count = 0usize;
        for s in data.iter().filter(|s| s.biased) {
            let row = &s.x.row(s.answer_pos)[..cfg.d_key];
            sum += row
                .iter()
                .zip(&real.bias_vec)
                .map(|(&x, &b)| (x - b) * (x - b))
                .sum::<f64>();
            count += 1;
        }
        let mean = sum / count as f64;
        let expected = cfg.biased_cov_scale * cfg.d_key as f64; // chi-square mean
        assert!(
            (mean - expected).abs() / expected < 0.10,
            "squared distance mean {mean}"
        );
    }

    #[test]
    fn unbiased_answer_covariance_matches_sigma() {
        let cfg = ToyConfig {
            seq_len: 20,
            ..ToyConfig::default()
        };
        let real = make_realization(&cfg, 12);
        let mut rng = Rng::new(13);
        let n = 50_000;
        let data = sample_dataset(&real, &cfg, n, false, &mut rng).unwrap();
        let d = cfg.d_key;
        let mut acc = vec![0.0; d * d];
        for s in &data {
            let row = &s.x.row(s.answer_pos)[..d];
            for i in 0..d {
                for j in 0..d {
                    acc[i * d + j] += row[i] * row[j];
                }
            }
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..d {
            for j in 0..d {
                let emp = acc[i * d + j] / n as f64;
                let diff = emp - real.sigma.get(i, j);
                num += diff * diff;
                den += real.sigma.get(i, j) * real.sigma.get(i, j);
            }
        }
        let rel = (num / den).sqrt();
        assert!(rel < 0.10, "relative Frobenius error {rel}");
    }

    #[test]
    fn dataset_generation_is_deterministic() {
        let cfg = ToyConfig::default();
        let real = make_realization(&cfg, 8);
        let a = sample_dataset(&real, &cfg, 50, true, &mut Rng::new(14)).unwrap();
        let b = sample_dataset(&real, &cfg, 50, true, &mut Rng::new(14)).unwrap();
        for (sa, sb) in a.iter().zip(&b) {
            assert_eq!(sa.x, sb.x);
            assert_eq!(sa.answer_pos, sb.answer_pos);
            assert_eq!(sa.biased, sb.biased);
            assert_eq!(sa.label, sb.label);
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let cfg = ToyConfig {
            p_bias: 1.5,
            ..ToyConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ToyConfig {
            seq_len: 10,
            mu_l: 10.0,
            ..ToyConfig::default()
        };
        assert!(cfg.validate().is_err());
        let real = make_realization(&ToyConfig::default(), 1);
        assert!(sample_dataset(&real, &ToyConfig::default(), 0, true, &mut Rng::new(1)).is_err());
    }
}
