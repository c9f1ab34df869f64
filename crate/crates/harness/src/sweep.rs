//! Grid sweeps over (variant, learning rate, weight decay, seeds).
//!
//! Runs execute in parallel but every run's stream of randomness is derived
//! from its own grid cell, so the sweep output is a pure function of the
//! configuration: summary JSON and telemetry CSVs are byte-identical
//! regardless of parallelism width.

use crate::report::write_telemetry_csv;
use crate::run::{train_run, OutcomeTag, RunConfig, RunResult};
use crate::HarnessError;
use quest_core::attention::VariantKind;
use quest_core::toy_data::ToyConfig;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

/// Toy-data fields exposed in the sweep configuration file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ToyOverrides {
    #[serde(rename = "N")]
    pub n: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub mu_l: f64,
    pub sigma_l: f64,
    pub p_bias: f64,
}

impl Default for ToyOverrides {
    fn default() -> Self {
        let cfg = ToyConfig::default();
        ToyOverrides {
            n: cfg.seq_len,
            train_size: cfg.train_size,
            test_size: cfg.test_size,
            mu_l: cfg.mu_l,
            sigma_l: cfg.sigma_l,
            p_bias: cfg.p_bias,
        }
    }
}

impl ToyOverrides {
    pub fn to_toy_config(&self) -> ToyConfig {
        ToyConfig {
            seq_len: self.n,
            train_size: self.train_size,
            test_size: self.test_size,
            mu_l: self.mu_l,
            sigma_l: self.sigma_l,
            p_bias: self.p_bias,
            ..ToyConfig::default()
        }
    }
}

/// Sweep configuration (JSON-serializable).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SweepConfig {
    pub variants: Vec<String>,
    pub lrs: Vec<f64>,
    pub wds: Vec<f64>,
    pub weight_seeds: u64,
    pub data_seeds: u64,
    pub toy: ToyOverrides,
    pub epochs: usize,
    pub batch_size: usize,
}

/// The six variants of the success-rate study; the elliptical variant is
/// not part of the sweep figures.
const SWEEP_VARIANTS: [VariantKind; 6] = [
    VariantKind::Standard,
    VariantKind::Quest,
    VariantKind::QNorm,
    VariantKind::QkNormHs,
    VariantKind::QkNormDs,
    VariantKind::QkNormFull,
];

impl SweepConfig {
    /// Reduced grid: 3 learning rates x 3 weight decays x 3 x 3 seeds,
    /// 81 runs per variant.
    pub fn reduced() -> SweepConfig {
        SweepConfig {
            variants: SWEEP_VARIANTS.iter().map(|v| v.name().to_string()).collect(),
            lrs: vec![0.001, 0.0025, 0.005],
            wds: vec![0.0, 0.02, 0.05],
            weight_seeds: 3,
            data_seeds: 3,
            toy: ToyOverrides::default(),
            epochs: 50,
            batch_size: 32,
        }
    }

    /// The full study grid: 6 learning rates x 5 weight decays x 5 x 5
    /// seeds, 750 runs per variant.
    pub fn full() -> SweepConfig {
        SweepConfig {
            variants: SWEEP_VARIANTS.iter().map(|v| v.name().to_string()).collect(),
            lrs: vec![0.0005, 0.001, 0.0025, 0.005, 0.0075, 0.01],
            wds: vec![0.0, 0.01, 0.02, 0.05, 0.1],
            weight_seeds: 5,
            data_seeds: 5,
            toy: ToyOverrides::default(),
            epochs: 50,
            batch_size: 32,
        }
    }

    pub fn parse_variants(&self) -> Result<Vec<VariantKind>, HarnessError> {
        self.variants
            .iter()
            .map(|name| {
                VariantKind::parse(name)
                    .ok_or_else(|| HarnessError::InvalidConfig(format!("unknown variant {name}")))
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.variants.is_empty() || self.lrs.is_empty() || self.wds.is_empty() {
            return Err(HarnessError::InvalidConfig("empty sweep grid".into()));
        }
        if self.weight_seeds == 0 || self.data_seeds == 0 {
            return Err(HarnessError::InvalidConfig("need at least one seed".into()));
        }
        self.parse_variants()?;
        self.toy.to_toy_config().validate()?;
        Ok(())
    }

    pub fn runs_per_variant(&self) -> usize {
        self.lrs.len() * self.wds.len() * (self.weight_seeds * self.data_seeds) as usize
    }

    /// All run configurations in deterministic grid order:
    /// variant-major, then lr, wd, weight seed, data seed.
    pub fn expand(&self) -> Result<Vec<RunConfig>, HarnessError> {
        let variants = self.parse_variants()?;
        let toy = self.toy.to_toy_config();
        let mut out = Vec::with_capacity(variants.len() * self.runs_per_variant());
        for &variant in &variants {
            for &lr in &self.lrs {
                for &wd in &self.wds {
                    for ws in 0..self.weight_seeds {
                        for ds in 0..self.data_seeds {
                            out.push(RunConfig {
                                variant,
                                lr,
                                weight_decay: wd,
                                seed_weights: ws,
                                seed_data: ds,
                                epochs: self.epochs,
                                batch_size: self.batch_size,
                                toy: toy.clone(),
                            });
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Aggregate counts for one (lr, wd) cell of one variant.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CellSummary {
    pub lr: f64,
    pub wd: f64,
    pub runs: u32,
    pub correct: u32,
    pub biased: u32,
    pub degenerate: u32,
    pub other: u32,
}

impl CellSummary {
    pub fn success_rate(&self) -> f64 {
        if self.runs == 0 {
            0.0
        } else {
            f64::from(self.correct) / f64::from(self.runs)
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VariantSummary {
    pub overall_success_rate: f64,
    pub cells: Vec<CellSummary>,
}

/// Success-rate summary keyed by variant name (sorted for stable output).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(transparent)]
pub struct SweepSummary {
    pub variants: BTreeMap<String, VariantSummary>,
}

impl SweepSummary {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serializable");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<SweepSummary, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Malformed(e.to_string()))
    }
}

/// Per-run line of the sweep index (`runs.csv`).
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub variant: String,
    pub lr: f64,
    pub wd: f64,
    pub weight_seed: u64,
    pub data_seed: u64,
    pub outcome: OutcomeTag,
    pub crashed: bool,
    pub train_acc: f64,
    pub test_acc: f64,
    pub file: String,
}

pub fn telemetry_file_name(cfg: &RunConfig) -> String {
    format!(
        "{}_lr{}_wd{}_w{}_d{}.csv",
        cfg.variant.name(),
        cfg.lr,
        cfg.weight_decay,
        cfg.seed_weights,
        cfg.seed_data
    )
}

/// Execute every run of the grid, up to `parallelism` at a time (0 = one
/// per core). Telemetry CSVs land in `<out_dir>/runs/`, the per-run index
/// in `runs.csv`, and the aggregated summary in `summary.json`.
pub fn run_sweep(
    cfg: &SweepConfig,
    parallelism: usize,
    out_dir: &Path,
) -> Result<SweepSummary, HarnessError> {
    cfg.validate()?;
    let runs_dir = out_dir.join("runs");
    std::fs::create_dir_all(&runs_dir)?;

    let configs = cfg.expand()?;
    let threads = if parallelism == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        parallelism
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| HarnessError::InvalidConfig(e.to_string()))?;

    let results: Vec<Result<RunResult, HarnessError>> = pool.install(|| {
        configs
            .par_iter()
            .map(|run_cfg| {
                let result = train_run(run_cfg)?;
                write_telemetry_csv(&result.telemetry, &runs_dir.join(telemetry_file_name(run_cfg)))?;
                eprintln!(
                    "run {} lr={} wd={} w={} d={} -> {}{}",
                    run_cfg.variant.name(),
                    run_cfg.lr,
                    run_cfg.weight_decay,
                    run_cfg.seed_weights,
                    run_cfg.seed_data,
                    result.outcome.tag.name(),
                    if result.crashed { " (crashed)" } else { "" }
                );
                Ok(result)
            })
            .collect()
    });
    let mut outcomes = Vec::with_capacity(results.len());
    for r in results {
        outcomes.push(r?);
    }

    // Aggregate in grid order; runs of one cell occupy a contiguous block.
    let seeds_per_cell = (cfg.weight_seeds * cfg.data_seeds) as usize;
    let mut summary = SweepSummary::default();
    let mut records = Vec::with_capacity(configs.len());
    let mut idx = 0usize;
    for variant_name in &cfg.variants {
        let mut cells = Vec::with_capacity(cfg.lrs.len() * cfg.wds.len());
        let mut total_correct = 0u32;
        let mut total_runs = 0u32;
        for &lr in &cfg.lrs {
            for &wd in &cfg.wds {
                let mut cell = CellSummary {
                    lr,
                    wd,
                    runs: 0,
                    correct: 0,
                    biased: 0,
                    degenerate: 0,
                    other: 0,
                };
                for _ in 0..seeds_per_cell {
                    let run_cfg = &configs[idx];
                    let result = &outcomes[idx];
                    cell.runs += 1;
                    match result.outcome.tag {
                        OutcomeTag::Correct => cell.correct += 1,
                        OutcomeTag::Biased => cell.biased += 1,
                        OutcomeTag::Degenerate => cell.degenerate += 1,
                        OutcomeTag::Other => cell.other += 1,
                    }
                    records.push(RunRecord {
                        variant: variant_name.clone(),
                        lr,
                        wd,
                        weight_seed: run_cfg.seed_weights,
                        data_seed: run_cfg.seed_data,
                        outcome: result.outcome.tag,
                        crashed: result.crashed,
                        train_acc: result.outcome.train_acc,
                        test_acc: result.outcome.test_acc,
                        file: telemetry_file_name(run_cfg),
                    });
                    idx += 1;
                }
                total_correct += cell.correct;
                total_runs += cell.runs;
                cells.push(cell);
            }
        }
        summary.variants.insert(
            variant_name.clone(),
            VariantSummary {
                overall_success_rate: f64::from(total_correct) / f64::from(total_runs),
                cells,
            },
        );
    }

    write_runs_csv(&records, &out_dir.join("runs.csv"))?;
    std::fs::write(out_dir.join("summary.json"), summary.to_json())?;
    Ok(summary)
}

pub fn write_runs_csv(records: &[RunRecord], path: &Path) -> Result<(), HarnessError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        out,
        "variant,lr,wd,weight_seed,data_seed,outcome,crashed,train_acc,test_acc,file"
    )?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.variant,
            r.lr,
            r.wd,
            r.weight_seed,
            r.data_seed,
            r.outcome.name(),
            r.crashed,
            r.train_acc,
            r.test_acc,
            r.file
        )?;
    }
    Ok(())
}

pub fn read_runs_csv(path: &Path) -> Result<Vec<RunRecord>, HarnessError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| HarnessError::Malformed(e.to_string()))?;
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| HarnessError::Malformed(e.to_string()))?;
        let field = |i: usize| -> Result<&str, HarnessError> {
            row.get(i)
                .ok_or_else(|| HarnessError::Malformed(format!("runs.csv: missing column {i}")))
        };
        let parse_f = |s: &str| -> Result<f64, HarnessError> {
            s.parse()
                .map_err(|e| HarnessError::Malformed(format!("runs.csv: {e}")))
        };
        out.push(RunRecord {
            variant: field(0)?.to_string(),
            lr: parse_f(field(1)?)?,
            wd: parse_f(field(2)?)?,
            weight_seed: field(3)?
                .parse()
                .map_err(|e| HarnessError::Malformed(format!("runs.csv: {e}")))?,
            data_seed: field(4)?
                .parse()
                .map_err(|e| HarnessError::Malformed(format!("runs.csv: {e}")))?,
            outcome: {
                let name = field(5)?;
                OutcomeTag::parse(name)
                    .ok_or_else(|| HarnessError::Malformed(format!("unknown outcome {name}")))?
            },
            crashed: field(6)?
                .parse()
                .map_err(|e| HarnessError::Malformed(format!("runs.csv: {e}")))?,
            train_acc: parse_f(field(7)?)?,
            test_acc: parse_f(field(8)?)?,
            file: field(9)?.to_string(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_sizes_match_arithmetic() {
        let full = SweepConfig::full();
        assert_eq!(full.runs_per_variant(), 6 * 5 * 5 * 5);
        assert_eq!(full.expand().unwrap().len(), 750 * 6);

        let reduced = SweepConfig::reduced();
        assert_eq!(reduced.runs_per_variant(), 81);
        assert_eq!(reduced.expand().unwrap().len(), 81 * 6);
    }

    #[test]
    fn config_json_round_trips() {
        let cfg = SweepConfig::reduced();
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("\"N\":20"), "{text}");
        let parsed: SweepConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, parsed);
    }

    #[test]
    fn unknown_variant_rejected() {
        let cfg = SweepConfig {
            variants: vec!["quist".into()],
            ..SweepConfig::reduced()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn expansion_is_variant_major_and_deterministic() {
        let cfg = SweepConfig {
            variants: vec!["standard".into(), "quest".into()],
            lrs: vec![0.001, 0.005],
            wds: vec![0.0],
            weight_seeds: 2,
            data_seeds: 1,
            ..SweepConfig::reduced()
        };
        let runs = cfg.expand().unwrap();
        assert_eq!(runs.len(), 8);
        assert_eq!(runs[0].variant, VariantKind::Standard);
        assert_eq!(runs[3].variant, VariantKind::Standard);
        assert_eq!(runs[4].variant, VariantKind::Quest);
        assert_eq!(runs[1].seed_weights, 1);
        assert_eq!(runs[2].lr, 0.005);
    }
}
