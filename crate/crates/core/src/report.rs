//! Run comparison reports: a CSV of per-run mIoU statistics with effect size
//! and significance against the first (reference) run, plus an SVG overlay of
//! the loss curves.

use crate::error::{DeconError, Result};
use crate::eval::EvalResult;
use crate::stats::{cohens_d, wilcoxon_signed_rank};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug)]
pub struct LossRow {
    pub step: u64,
    pub epoch: u32,
    pub lr: f64,
    pub momentum: f64,
    pub l_enc: f64,
    pub l_dec: [Option<f64>; 4],
    pub l_dds: f64,
    pub total: f64,
}

/// Everything a run directory can contribute to a report.
#[derive(Clone, Debug, Default)]
pub struct RunArtifacts {
    pub run_id: String,
    pub loss_rows: Vec<LossRow>,
    pub eval: Option<EvalResult>,
}

/// Parses a loss-log CSV written by the trainer.
pub fn parse_loss_log(text: &str) -> Result<Vec<LossRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if !line.starts_with("step,") {
                return Err(DeconError::Data(format!("unexpected loss log header `{line}`")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 11 {
            return Err(DeconError::Data(format!(
                "loss log line {} has {} fields, expected 11",
                i + 1,
                fields.len()
            )));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| DeconError::Data(format!("loss log line {}: {e}", i + 1)))
        };
        let opt = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                num(s).map(Some)
            }
        };
        rows.push(LossRow {
            step: fields[0]
                .parse()
                .map_err(|e| DeconError::Data(format!("loss log line {}: {e}", i + 1)))?,
            epoch: fields[1]
                .parse()
                .map_err(|e| DeconError::Data(format!("loss log line {}: {e}", i + 1)))?,
            lr: num(fields[2])?,
            momentum: num(fields[3])?,
            l_enc: num(fields[4])?,
            l_dec: [opt(fields[5])?, opt(fields[6])?, opt(fields[7])?, opt(fields[8])?],
            l_dds: num(fields[9])?,
            total: num(fields[10])?,
        });
    }
    Ok(rows)
}

/// Loads `loss.csv` and/or `eval.json` from a run directory. At least one of
/// the two must be present.
pub fn load_run_dir(dir: &Path) -> Result<RunArtifacts> {
    let run_id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    let mut artifacts = RunArtifacts { run_id, ..Default::default() };
    let loss_path = dir.join("loss.csv");
    if loss_path.exists() {
        let text = std::fs::read_to_string(&loss_path)
            .map_err(|e| DeconError::io(loss_path.display().to_string(), e))?;
        artifacts.loss_rows = parse_loss_log(&text)?;
    }
    let eval_path = dir.join("eval.json");
    if eval_path.exists() {
        let text = std::fs::read_to_string(&eval_path)
            .map_err(|e| DeconError::io(eval_path.display().to_string(), e))?;
        artifacts.eval = Some(
            serde_json::from_str(&text)
                .map_err(|e| DeconError::Data(format!("eval.json: {e}")))?,
        );
    }
    if artifacts.loss_rows.is_empty() && artifacts.eval.is_none() {
        return Err(DeconError::Data(format!(
            "run directory {} has neither loss.csv nor eval.json",
            dir.display()
        )));
    }
    Ok(artifacts)
}

pub const REPORT_CSV_HEADER: &str =
    "run_id,transfer_mode,n_seeds,miou_mean,miou_std,cohens_d_vs_ref,wilcoxon_p_vs_ref";

fn comparison_columns(reference: Option<&EvalResult>, run: &EvalResult) -> (String, String) {
    let Some(reference) = reference else {
        return (String::new(), String::new());
    };
    let d = cohens_d(&run.per_seed_miou, &reference.per_seed_miou)
        .map(|v| format!("{v}"))
        .unwrap_or_default();
    let n = run.per_seed_miou.len().min(reference.per_seed_miou.len());
    let diffs: Vec<f64> =
        (0..n).map(|i| run.per_seed_miou[i] - reference.per_seed_miou[i]).collect();
    let p = wilcoxon_signed_rank(&diffs).map(|v| format!("{v}")).unwrap_or_default();
    (d, p)
}

/// Paths of the files a report produced.
#[derive(Clone, Debug)]
pub struct ReportPaths {
    pub csv: PathBuf,
    pub curves: Option<PathBuf>,
}

/// Writes `report.csv` (one row per run, with Cohen's d and Wilcoxon p
/// against the first run) and `loss_curves.svg` overlaying l_enc / l_dds /
/// total for every run that has a loss log.
pub fn emit_report(runs: &[RunArtifacts], out_dir: &Path) -> Result<ReportPaths> {
    if runs.is_empty() {
        return Err(DeconError::Data("report needs at least one run".into()));
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|e| DeconError::io(out_dir.display().to_string(), e))?;
    let csv_path = out_dir.join("report.csv");
    let mut csv = std::fs::File::create(&csv_path)
        .map_err(|e| DeconError::io(csv_path.display().to_string(), e))?;
    writeln!(csv, "{REPORT_CSV_HEADER}")
        .map_err(|e| DeconError::io(csv_path.display().to_string(), e))?;
    let reference = runs[0].eval.as_ref();
    for (i, run) in runs.iter().enumerate() {
        let (mode, n_seeds, mean, std) = match &run.eval {
            Some(e) => (
                e.transfer_mode.to_string(),
                e.seeds.len().to_string(),
                format!("{}", e.miou_mean),
                e.miou_std.map(|s| format!("{s}")).unwrap_or_default(),
            ),
            None => (String::new(), String::new(), String::new(), String::new()),
        };
        let (d, p) = match (&run.eval, i) {
            (Some(e), i) if i > 0 => comparison_columns(reference, e),
            _ => (String::new(), String::new()),
        };
        writeln!(csv, "{},{},{},{},{},{},{}", run.run_id, mode, n_seeds, mean, std, d, p)
            .map_err(|e| DeconError::io(csv_path.display().to_string(), e))?;
    }

    let curves = if runs.iter().any(|r| !r.loss_rows.is_empty()) {
        let path = out_dir.join("loss_curves.svg");
        let svg = render_loss_curves(runs);
        std::fs::write(&path, svg).map_err(|e| DeconError::io(path.display().to_string(), e))?;
        Some(path)
    } else {
        None
    };
    Ok(ReportPaths { csv: csv_path, curves })
}

const PALETTE: [&str; 8] =
    ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"];

/// Simple polyline chart: one color per run, one dash pattern per series.
pub fn render_loss_curves(runs: &[RunArtifacts]) -> String {
    let (width, height) = (860.0f64, 520.0f64);
    let (ml, mr, mt, mb) = (60.0, 20.0, 30.0, 50.0);
    let plot_w = width - ml - mr;
    let plot_h = height - mt - mb;

    let max_step = runs
        .iter()
        .flat_map(|r| r.loss_rows.last())
        .map(|row| row.step)
        .max()
        .unwrap_or(0);
    let max_loss = runs
        .iter()
        .flat_map(|r| r.loss_rows.iter())
        .map(|row| row.total.max(row.l_enc).max(row.l_dds))
        .fold(0.0f64, f64::max)
        .max(1e-9);

    let x_of = |step: u64| ml + plot_w * step as f64 / max_step.max(1) as f64;
    let y_of = |v: f64| mt + plot_h * (1.0 - (v / max_loss).clamp(0.0, 1.0));

    let mut body = String::new();
    // axes
    body.push_str(&format!(
        "<line x1='{ml}' y1='{}' x2='{}' y2='{}' stroke='black'/>\
         <line x1='{ml}' y1='{mt}' x2='{ml}' y2='{}' stroke='black'/>",
        mt + plot_h,
        ml + plot_w,
        mt + plot_h,
        mt + plot_h
    ));
    for frac in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let v = max_loss * frac;
        let y = y_of(v);
        body.push_str(&format!(
            "<text x='{}' y='{}' font-size='11' text-anchor='end'>{v:.3}</text>",
            ml - 6.0,
            y + 4.0
        ));
        let s = (max_step as f64 * frac) as u64;
        body.push_str(&format!(
            "<text x='{}' y='{}' font-size='11' text-anchor='middle'>{s}</text>",
            x_of(s),
            mt + plot_h + 16.0
        ));
    }
    body.push_str(&format!(
        "<text x='{}' y='{}' font-size='12' text-anchor='middle'>step</text>",
        ml + plot_w / 2.0,
        height - 12.0
    ));

    let series: [(&str, &str, fn(&LossRow) -> f64); 3] = [
        ("total", "", |r| r.total),
        ("l_enc", "6,3", |r| r.l_enc),
        ("l_dds", "2,3", |r| r.l_dds),
    ];
    let mut legend_y = mt + 8.0;
    for (ri, run) in runs.iter().enumerate() {
        if run.loss_rows.is_empty() {
            continue;
        }
        let color = PALETTE[ri % PALETTE.len()];
        for (name, dash, pick) in series {
            let points: String = run
                .loss_rows
                .iter()
                .map(|row| format!("{:.2},{:.2}", x_of(row.step), y_of(pick(row))))
                .collect::<Vec<_>>()
                .join(" ");
            let dash_attr =
                if dash.is_empty() { String::new() } else { format!(" stroke-dasharray='{dash}'") };
            body.push_str(&format!(
                "<polyline fill='none' stroke='{color}' stroke-width='1.3'{dash_attr} points='{points}'/>"
            ));
            body.push_str(&format!(
                "<text x='{}' y='{legend_y}' font-size='11' fill='{color}'>{} {name}</text>",
                ml + plot_w - 150.0,
                run.run_id
            ));
            legend_y += 14.0;
        }
    }

    format!(
        "<svg xmlns='http://www.w3.org/2000/svg' width='{width}' height='{height}' \
         viewBox='0 0 {width} {height}' data-steps='{max_step}' data-runs='{}'>\
         <rect width='100%' height='100%' fill='white'/>{body}</svg>",
        runs.len()
    )
}
