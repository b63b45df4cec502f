//! Static SVG plots and text tables from finished runs.
//!
//! Inputs are searched recursively for `log.jsonl` (one loss curve per key),
//! `metrics.json` (per-class metric bars) and `comparison.json` (ablation bars).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::experiment::AblationSummary;
use crate::losses::LossReport;
use crate::metrics::{EvalClass, MetricReport};
use crate::trainer::read_log;

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ReportIndex {
    pub loss_curves: Vec<String>,
    pub metric_plots: Vec<String>,
    pub comparison_plots: Vec<String>,
    pub tables: String,
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Io(std::io::Error::other(format!("plot: {e}")))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Corrupt { path: path.to_path_buf(), reason: e.to_string() })
}

/// Directories under `root` (inclusive) holding any of the known artifacts.
fn artifact_dirs(root: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    if ["log.jsonl", "metrics.json", "comparison.json"].iter().any(|f| root.join(f).is_file()) {
        found.push(root.to_path_buf());
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    for d in subdirs {
        artifact_dirs(&d, found)?;
    }
    Ok(())
}

fn slug(root: &Path, dir: &Path) -> String {
    let base = root.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "input".into());
    let rel = dir.strip_prefix(root).unwrap_or(dir);
    std::iter::once(base)
        .chain(rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()))
        .collect::<Vec<_>>()
        .join("_")
}

/// Trailing moving average with the given window.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, v) in values.iter().enumerate() {
        sum += v;
        if i >= w {
            sum -= values[i - w];
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}

fn loss_curve(path: &Path, key: &str, values: &[f64], window: usize) -> Result<()> {
    let smooth = moving_average(values, window);
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let pad = ((hi - lo) * 0.05).max(1e-6);
    let root = SVGBackend::new(path, (720, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(key, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(0f64..values.len().max(2) as f64, (lo - pad)..(hi + pad))
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("iteration").y_desc(key).draw().map_err(plot_err)?;
    let raw = values.iter().enumerate().map(|(i, &v)| ((i + 1) as f64, v));
    chart.draw_series(LineSeries::new(raw, BLUE.mix(0.25))).map_err(plot_err)?;
    let avg = smooth.iter().enumerate().map(|(i, &v)| ((i + 1) as f64, v));
    chart
        .draw_series(LineSeries::new(avg, BLUE.stroke_width(2)))
        .map_err(plot_err)?
        .label(format!("moving average ({window})"))
        .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], BLUE.stroke_width(2)));
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Grouped bars with 95% whiskers; values in [0, 1], drawn as percent.
fn bar_chart(path: &Path, title: &str, groups: &[String], series: &[(&str, Vec<(f64, f64)>)]) -> Result<()> {
    let colors = [RGBColor(66, 114, 196), RGBColor(237, 125, 49), RGBColor(112, 173, 71)];
    let n = series.len().max(1) as f64;
    let root = SVGBackend::new(path, (160 + 120 * groups.len() as u32, 440)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(48)
        .build_cartesian_2d(0f64..groups.len() as f64, 0f64..105f64)
        .map_err(plot_err)?;
    let names = groups.to_vec();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(groups.len() * 2 + 1)
        .x_label_formatter(&|x| {
            let i = x.floor() as usize;
            if (x - i as f64 - 0.5).abs() < 1e-6 && i < names.len() {
                names[i].clone()
            } else {
                String::new()
            }
        })
        .y_desc("%")
        .draw()
        .map_err(plot_err)?;
    for (k, (name, vals)) in series.iter().enumerate() {
        let color = colors[k % colors.len()];
        let width = 0.8 / n;
        let x0 = |g: usize| g as f64 + 0.1 + k as f64 * width;
        chart
            .draw_series(vals.iter().enumerate().map(|(g, &(m, _))| {
                Rectangle::new([(x0(g), 0.0), (x0(g) + width * 0.9, 100.0 * m)], color.filled())
            }))
            .map_err(plot_err)?
            .label(*name)
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 12, y + 5)], color.filled()));
        chart
            .draw_series(vals.iter().enumerate().map(|(g, &(m, h))| {
                let xc = x0(g) + width * 0.45;
                PathElement::new(vec![(xc, 100.0 * (m - h)), (xc, 100.0 * (m + h))], BLACK)
            }))
            .map_err(plot_err)?;
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

fn log_section(dir: &Path, out: &Path, window: usize, idx: &mut ReportIndex) -> Result<()> {
    let reports: Vec<LossReport> = read_log(&dir.join("log.jsonl"))?;
    let _ = writeln!(idx.tables, "iterations: {}", reports.len());
    if reports.is_empty() {
        return Ok(());
    }
    let keys: Vec<&str> = reports[0].entries().into_iter().map(|(k, _)| k).collect();
    for key in keys {
        let values: Vec<f64> =
            reports.iter().filter_map(|r| r.entries().into_iter().find(|e| e.0 == key).map(|e| e.1)).collect();
        let file = out.join(format!("loss_{key}.svg"));
        loss_curve(&file, key, &values, window)?;
        idx.loss_curves.push(file.to_string_lossy().into_owned());
        let tail = moving_average(&values, window).last().copied().unwrap_or(f64::NAN);
        let _ = writeln!(idx.tables, "  {key:<10} final moving average {tail:.5}");
    }
    Ok(())
}

fn metrics_section(dir: &Path, out: &Path, idx: &mut ReportIndex) -> Result<()> {
    let report: MetricReport = read_json(&dir.join("metrics.json"))?;
    idx.tables.push_str(&report.to_table());
    let groups: Vec<String> = report.rows.iter().map(|r| r.class.label().to_string()).collect();
    let pick = |f: &dyn Fn(&crate::metrics::ClassRow) -> (f64, f64)| report.rows.iter().map(f).collect::<Vec<_>>();
    let series = [
        ("Dice", pick(&|r| (r.dice.mean, r.dice.half_width))),
        ("Sen", pick(&|r| (r.sen.mean, r.sen.half_width))),
        ("Spe", pick(&|r| (r.spe.mean, r.spe.half_width))),
    ];
    let file = out.join("metrics.svg");
    bar_chart(&file, "per-class metrics", &groups, &series)?;
    idx.metric_plots.push(file.to_string_lossy().into_owned());
    Ok(())
}

fn comparison_section(dir: &Path, out: &Path, idx: &mut ReportIndex) -> Result<()> {
    let summary: AblationSummary = read_json(&dir.join("comparison.json"))?;
    idx.tables.push_str(&summary.to_table());
    let groups: Vec<String> = summary.rows.iter().map(|r| r.label.clone()).collect();
    let col = |c: EvalClass| -> Vec<(f64, f64)> {
        summary.rows.iter().map(|r| r.class(c).map_or((f64::NAN, 0.0), |s| (s.dice.mean, s.dice.half_width))).collect()
    };
    let series = [("Infection", col(EvalClass::Infection)), ("GGO", col(EvalClass::Ggo)), ("Lung", col(EvalClass::Lung))];
    let file = out.join("comparison.svg");
    bar_chart(&file, "Dice by variant", &groups, &series)?;
    idx.comparison_plots.push(file.to_string_lossy().into_owned());
    Ok(())
}

/// Writes plots under `out/<name>/`, plus `report.txt` and `report.json`.
pub fn write_report(inputs: &[PathBuf], out: &Path, window: usize) -> Result<ReportIndex> {
    if inputs.is_empty() {
        return Err(Error::Config("report needs at least one input directory".into()));
    }
    let mut idx = ReportIndex::default();
    for input in inputs {
        if !input.is_dir() {
            return Err(Error::MissingFile(input.clone()));
        }
        let mut dirs = Vec::new();
        artifact_dirs(input, &mut dirs)?;
        if dirs.is_empty() {
            return Err(Error::MissingFile(input.join("log.jsonl")));
        }
        for dir in dirs {
            let name = slug(input, &dir);
            let target = out.join(&name);
            fs::create_dir_all(&target)?;
            let _ = writeln!(idx.tables, "== {} ({})", name, dir.display());
            if dir.join("log.jsonl").is_file() {
                log_section(&dir, &target, window, &mut idx)?;
            }
            if dir.join("metrics.json").is_file() {
                metrics_section(&dir, &target, &mut idx)?;
            }
            if dir.join("comparison.json").is_file() {
                comparison_section(&dir, &target, &mut idx)?;
            }
            idx.tables.push('\n');
        }
    }
    fs::create_dir_all(out)?;
    fs::write(out.join("report.txt"), &idx.tables)?;
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&idx)? + "\n")?;
    Ok(idx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moving_average_warms_up() {
        assert_eq!(moving_average(&[2.0, 4.0, 6.0, 8.0], 2), vec![2.0, 3.0, 5.0, 7.0]);
        assert_eq!(moving_average(&[1.0, 3.0], 0), vec![1.0, 3.0]);
    }
}
