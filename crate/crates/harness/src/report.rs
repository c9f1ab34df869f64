//! Report emission: telemetry CSVs, the success-rate table, and standalone
//! SVG figures (success-rate heatmaps, key-norm trajectories).

use crate::run::{OutcomeTag, TelemetryRecord};
use crate::sweep::{read_runs_csv, CellSummary, SweepSummary, VariantSummary};
use crate::HarnessError;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

pub const TELEMETRY_HEADER: &str = "epoch,train_loss,train_acc,test_acc,knorm_biased_ans,knorm_unbiased_ans,knorm_non_ans,cls_qnorm,max_logit,cls_attn_entropy";

pub fn write_telemetry_csv(records: &[TelemetryRecord], path: &Path) -> Result<(), HarnessError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{TELEMETRY_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.train_loss,
            r.train_acc,
            r.test_acc,
            r.knorm_biased_ans,
            r.knorm_unbiased_ans,
            r.knorm_non_ans,
            r.cls_qnorm,
            r.max_logit,
            r.cls_attn_entropy
        )?;
    }
    Ok(())
}

pub fn read_telemetry_csv(path: &Path) -> Result<Vec<TelemetryRecord>, HarnessError> {
    let mut reader =
        csv::Reader::from_path(path).map_err(|e| HarnessError::Malformed(e.to_string()))?;
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| HarnessError::Malformed(e.to_string()))?;
        if row.len() != 10 {
            return Err(HarnessError::Malformed(format!(
                "telemetry row has {} fields",
                row.len()
            )));
        }
        let f = |i: usize| -> Result<f64, HarnessError> {
            row[i]
                .parse()
                .map_err(|e| HarnessError::Malformed(format!("telemetry: {e}")))
        };
        out.push(TelemetryRecord {
            epoch: row[0]
                .parse()
                .map_err(|e| HarnessError::Malformed(format!("telemetry: {e}")))?,
            train_loss: f(1)?,
            train_acc: f(2)?,
            test_acc: f(3)?,
            knorm_biased_ans: f(4)?,
            knorm_unbiased_ans: f(5)?,
            knorm_non_ans: f(6)?,
            cls_qnorm: f(7)?,
            max_logit: f(8)?,
            cls_attn_entropy: f(9)?,
        });
    }
    Ok(out)
}

const SUCCESS_HEADER: &str = "variant,lr,wd,runs,correct,biased,degenerate,other,success_rate";

/// Success-rate table, one row per (variant, lr, wd) cell.
pub fn write_success_csv(summary: &SweepSummary, path: &Path) -> Result<(), HarnessError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{SUCCESS_HEADER}")?;
    for (variant, vs) in &summary.variants {
        for cell in &vs.cells {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                variant,
                cell.lr,
                cell.wd,
                cell.runs,
                cell.correct,
                cell.biased,
                cell.degenerate,
                cell.other,
                cell.success_rate()
            )?;
        }
    }
    Ok(())
}

/// Rebuild a [`SweepSummary`] from the success-rate table; inverse of
/// [`write_success_csv`].
pub fn read_success_csv(path: &Path) -> Result<SweepSummary, HarnessError> {
    let mut reader =
        csv::Reader::from_path(path).map_err(|e| HarnessError::Malformed(e.to_string()))?;
    let mut variants: BTreeMap<String, Vec<CellSummary>> = BTreeMap::new();
    for row in reader.records() {
        let row = row.map_err(|e| HarnessError::Malformed(e.to_string()))?;
        if row.len() != 9 {
            return Err(HarnessError::Malformed(format!(
                "success table row has {} fields",
                row.len()
            )));
        }
        let f = |i: usize| -> Result<f64, HarnessError> {
            row[i]
                .parse()
                .map_err(|e| HarnessError::Malformed(format!("success table: {e}")))
        };
        let u = |i: usize| -> Result<u32, HarnessError> {
            row[i]
                .parse()
                .map_err(|e| HarnessError::Malformed(format!("success table: {e}")))
        };
        variants.entry(row[0].to_string()).or_default().push(CellSummary {
            lr: f(1)?,
            wd: f(2)?,
            runs: u(3)?,
            correct: u(4)?,
            biased: u(5)?,
            degenerate: u(6)?,
            other: u(7)?,
        });
    }
    let mut summary = SweepSummary::default();
    for (variant, cells) in variants {
        let total_correct: u32 = cells.iter().map(|c| c.correct).sum();
        let total_runs: u32 = cells.iter().map(|c| c.runs).sum();
        summary.variants.insert(
            variant,
            VariantSummary {
                overall_success_rate: f64::from(total_correct) / f64::from(total_runs),
                cells,
            },
        );
    }
    Ok(summary)
}

fn success_color(rate: f64) -> String {
    // White at 0 to deep green at 1.
    let t = rate.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    format!("rgb({},{},{})", lerp(247.0, 0.0), lerp(251.0, 109.0), lerp(255.0, 44.0))
}

fn fmt2(v: f64) -> String {
    format!("{v:.2}")
}

/// Standalone lr-by-wd heatmap for one variant. Exactly one `<rect>` per
/// grid cell plus a numeric label.
pub fn write_heatmap_svg(
    variant: &str,
    vs: &VariantSummary,
    path: &Path,
) -> Result<(), HarnessError> {
    let mut lrs: Vec<f64> = Vec::new();
    let mut wds: Vec<f64> = Vec::new();
    for cell in &vs.cells {
        if !lrs.contains(&cell.lr) {
            lrs.push(cell.lr);
        }
        if !wds.contains(&cell.wd) {
            wds.push(cell.wd);
        }
    }
    let cell_w = 86.0;
    let cell_h = 52.0;
    let left = 86.0;
    let top = 54.0;
    let width = left + wds.len() as f64 * cell_w + 24.0;
    let height = top + lrs.len() as f64 * cell_h + 46.0;

    let mut svg = String::new();
    write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\">\n"
    )
    .expect("string write");
    write!(
        svg,
        "  <text x=\"{}\" y=\"24\" font-size=\"16\" text-anchor=\"middle\">{} success rate</text>\n",
        width / 2.0,
        variant
    )
    .expect("string write");

    for (col, wd) in wds.iter().enumerate() {
        write!(
            svg,
            "  <text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">wd={}</text>\n",
            left + (col as f64 + 0.5) * cell_w,
            top - 10.0,
            wd
        )
        .expect("string write");
    }
    for (row, lr) in lrs.iter().enumerate() {
        write!(
            svg,
            "  <text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"end\">lr={}</text>\n",
            left - 8.0,
            top + (row as f64 + 0.58) * cell_h,
            lr
        )
        .expect("string write");
    }

    for cell in &vs.cells {
        let row = lrs.iter().position(|&v| v == cell.lr).expect("known lr");
        let col = wds.iter().position(|&v| v == cell.wd).expect("known wd");
        let x = left + col as f64 * cell_w;
        let y = top + row as f64 * cell_h;
        let rate = cell.success_rate();
        write!(
            svg,
            "  <rect x=\"{x}\" y=\"{y}\" width=\"{cell_w}\" height=\"{cell_h}\" \
             fill=\"{}\" stroke=\"#444\" stroke-width=\"1\"/>\n",
            success_color(rate)
        )
        .expect("string write");
        let text_fill = if rate > 0.55 { "#ffffff" } else { "#111111" };
        write!(
            svg,
            "  <text x=\"{}\" y=\"{}\" font-size=\"13\" text-anchor=\"middle\" fill=\"{text_fill}\">{}</text>\n",
            x + cell_w / 2.0,
            y + cell_h / 2.0 + 4.0,
            fmt2(rate)
        )
        .expect("string write");
    }
    write!(
        svg,
        "  <text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">overall {}</text>\n",
        width / 2.0,
        height - 16.0,
        fmt2(vs.overall_success_rate)
    )
    .expect("string write");
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}

/// Key-norm trajectories (biased answer, unbiased answer, non-answer) over
/// epochs for one run.
pub fn write_trajectory_svg(
    title: &str,
    records: &[TelemetryRecord],
    path: &Path,
) -> Result<(), HarnessError> {
    if records.is_empty() {
        return Err(HarnessError::InvalidConfig(
            "no telemetry records to plot".into(),
        ));
    }
    let width = 560.0;
    let height = 360.0;
    let (left, right, top, bottom) = (62.0, 18.0, 44.0, 46.0);
    let plot_w = width - left - right;
    let plot_h = height - top - bottom;

    let series: [(&str, &str, Vec<f64>); 3] = [
        (
            "biased answer",
            "#c0392b",
            records.iter().map(|r| r.knorm_biased_ans).collect(),
        ),
        (
            "unbiased answer",
            "#2980b9",
            records.iter().map(|r| r.knorm_unbiased_ans).collect(),
        ),
        (
            "non-answer",
            "#7f8c8d",
            records.iter().map(|r| r.knorm_non_ans).collect(),
        ),
    ];
    let y_max = series
        .iter()
        .flat_map(|(_, _, v)| v.iter().copied())
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let x_max = records.last().expect("non-empty").epoch as f64;
    let x_min = records[0].epoch as f64;
    let x_span = (x_max - x_min).max(1.0);

    let mut svg = String::new();
    write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\">\n"
    )
    .expect("string write");
    write!(
        svg,
        "  <text x=\"{}\" y=\"22\" font-size=\"14\" text-anchor=\"middle\">{title}</text>\n",
        width / 2.0
    )
    .expect("string write");
    // Axes.
    write!(
        svg,
        "  <line x1=\"{left}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#333\"/>\n",
        top + plot_h,
        left + plot_w,
        top + plot_h
    )
    .expect("string write");
    write!(
        svg,
        "  <line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{}\" stroke=\"#333\"/>\n",
        top + plot_h
    )
    .expect("string write");
    write!(
        svg,
        "  <text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">epoch</text>\n",
        left + plot_w / 2.0,
        height - 12.0
    )
    .expect("string write");
    write!(
        svg,
        "  <text x=\"16\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\" \
         transform=\"rotate(-90 16 {})\">mean key norm</text>\n",
        top + plot_h / 2.0,
        top + plot_h / 2.0
    )
    .expect("string write");
    write!(
        svg,
        "  <text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"end\">{}</text>\n",
        left - 6.0,
        top + 4.0,
        fmt2(y_max)
    )
    .expect("string write");
    write!(
        svg,
        "  <text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"end\">0</text>\n",
        left - 6.0,
        top + plot_h + 4.0
    )
    .expect("string write");

    for (i, (label, color, values)) in series.iter().enumerate() {
        let mut points = String::new();
        for (r, &v) in records.iter().zip(values.iter()) {
            let x = left + (r.epoch as f64 - x_min) / x_span * plot_w;
            let y = top + plot_h - (v / y_max) * plot_h;
            write!(points, "{x:.2},{y:.2} ").expect("string write");
        }
        write!(
            svg,
            "  <polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.6\" points=\"{}\"/>\n",
            points.trim_end()
        )
        .expect("string write");
        let ly = top + 14.0 * i as f64;
        write!(
            svg,
            "  <line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            left + plot_w - 150.0,
            left + plot_w - 128.0
        )
        .expect("string write");
        write!(
            svg,
            "  <text x=\"{}\" y=\"{}\" font-size=\"10\">{label}</text>\n",
            left + plot_w - 122.0,
            ly + 3.0
        )
        .expect("string write");
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}

/// Emit all reports for a finished sweep directory: the success-rate table,
/// one heatmap per variant, and key-norm trajectory plots for the first
/// biased and first correct run of each variant (when they exist).
pub fn emit_reports(
    summary: &SweepSummary,
    sweep_dir: &Path,
    out_dir: &Path,
) -> Result<(), HarnessError> {
    std::fs::create_dir_all(out_dir)?;
    write_success_csv(summary, &out_dir.join("success_rates.csv"))?;
    for (variant, vs) in &summary.variants {
        write_heatmap_svg(variant, vs, &out_dir.join(format!("heatmap_{variant}.svg")))?;
    }

    let runs_index = sweep_dir.join("runs.csv");
    if !runs_index.exists() {
        return Ok(());
    }
    let records = read_runs_csv(&runs_index)?;
    for (variant, _) in &summary.variants {
        for wanted in [OutcomeTag::Biased, OutcomeTag::Correct] {
            if let Some(run) = records
                .iter()
                .find(|r| &r.variant == variant && r.outcome == wanted)
            {
                let telemetry = read_telemetry_csv(&sweep_dir.join("runs").join(&run.file))?;
                if telemetry.is_empty() {
                    continue;
                }
                write_trajectory_svg(
                    &format!(
                        "{variant} lr={} wd={} ({})",
                        run.lr,
                        run.wd,
                        wanted.name()
                    ),
                    &telemetry,
                    &out_dir.join(format!("trajectory_{variant}_{}.svg", wanted.name())),
                )?;
            }
        }
    }
    Ok(())
}
