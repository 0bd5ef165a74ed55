//! Cross-run summaries: metric curves (SVG) and a markdown table.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::error::{Error, IoContext, Result};
use crate::experiment::{read_metrics_csv, MetricRow};

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub name: String,
    pub rows: Vec<MetricRow>,
}

#[derive(Clone, Debug, Default)]
pub struct ReportOutcome {
    pub runs: Vec<RunSummary>,
    pub warnings: Vec<String>,
    pub files: Vec<PathBuf>,
}

fn run_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

fn cell(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x:.4}"),
        _ => "no data".into(),
    }
}

fn plot(path: &Path, title: &str, runs: &[RunSummary], pick: impl Fn(&MetricRow) -> Option<f64>) -> Result<()> {
    let series: Vec<(String, Vec<(f64, f64)>)> = runs
        .iter()
        .map(|r| {
            let pts = r
                .rows
                .iter()
                .filter_map(|row| pick(row).filter(|v| v.is_finite()).map(|v| (row.images_seen as f64, v)))
                .collect();
            (r.name.clone(), pts)
        })
        .collect();
    let all: Vec<(f64, f64)> = series.iter().flat_map(|(_, p)| p.iter().copied()).collect();
    let (x_max, y_min, y_max) = all.iter().fold((1.0f64, f64::INFINITY, f64::NEG_INFINITY), |(x, lo, hi), &(px, py)| {
        (x.max(px), lo.min(py), hi.max(py))
    });
    let (y_min, y_max) = if all.is_empty() {
        (0.0, 1.0)
    } else if y_max - y_min < 1e-12 {
        (y_min - 0.5, y_max + 0.5)
    } else {
        (y_min, y_max + 0.05 * (y_max - y_min))
    };
    let draw_err = |e: &dyn std::fmt::Display| Error::InvalidArgument(format!("plot {}: {e}", path.display()));
    let root = SVGBackend::new(path, (640, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| draw_err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(35)
        .y_label_area_size(60)
        .build_cartesian_2d(0.0..x_max, y_min..y_max)
        .map_err(|e| draw_err(&e))?;
    chart
        .configure_mesh()
        .x_desc("images seen")
        .y_desc(title)
        .draw()
        .map_err(|e| draw_err(&e))?;
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(|e| draw_err(&e))?
            .label(name.clone())
            .legend(move |(x, y)| PathElement::new([(x, y), (x + 16, y)], color));
        chart
            .draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled())))
            .map_err(|e| draw_err(&e))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| draw_err(&e))?;
    root.present().map_err(|e| draw_err(&e))?;
    Ok(())
}

/// Reads `metrics.csv` from each run directory and writes curves plus
/// `summary.md` into `out`. Runs without metrics are reported and shown
/// as "no data".
pub fn emit_report(run_dirs: &[PathBuf], out: &Path) -> Result<ReportOutcome> {
    std::fs::create_dir_all(out).at(out)?;
    let mut outcome = ReportOutcome::default();
    for dir in run_dirs {
        let name = run_name(dir);
        let csv = dir.join("metrics.csv");
        let rows = match read_metrics_csv(&csv) {
            Ok(rows) => rows,
            Err(e) => {
                let msg = format!("{name}: {e}");
                log::warn!("{msg}");
                outcome.warnings.push(msg);
                Vec::new()
            }
        };
        if !dir.join("logs.jsonl").exists() {
            let msg = format!("{name}: no training log");
            log::warn!("{msg}");
            outcome.warnings.push(msg);
        }
        outcome.runs.push(RunSummary { name, rows });
    }

    let curves: [(&str, &str, fn(&MetricRow) -> Option<f64>); 4] = [
        ("fid_proxy.svg", "FID (proxy)", |r| Some(r.fid_proxy)),
        ("ppl_z.svg", "path length in Z", |r| Some(r.ppl_z)),
        ("ppl_w.svg", "path length in W", |r| Some(r.ppl_w)),
        ("separability.svg", "separability in W", |r| r.separability),
    ];
    for (file, title, pick) in curves {
        let path = out.join(file);
        plot(&path, title, &outcome.runs, pick)?;
        outcome.files.push(path);
    }

    let mut md = String::from("| run | images seen | FID (proxy) | PPL Z | PPL W | separability W |\n");
    md.push_str("|---|---|---|---|---|---|\n");
    for run in &outcome.runs {
        let last = run.rows.last();
        let seen = last.map(|r| r.images_seen.to_string()).unwrap_or_else(|| "no data".into());
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} |",
            run.name,
            seen,
            cell(last.map(|r| r.fid_proxy)),
            cell(last.map(|r| r.ppl_z)),
            cell(last.map(|r| r.ppl_w)),
            cell(last.and_then(|r| r.separability)),
        );
    }
    if !outcome.warnings.is_empty() {
        md.push_str("\nWarnings:\n\n");
        for w in &outcome.warnings {
            let _ = writeln!(md, "- {w}");
        }
    }
    let summary = out.join("summary.md");
    std::fs::write(&summary, md).at(&summary)?;
    outcome.files.push(summary);
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::METRICS_CSV_HEADER;

    #[test]
    fn missing_runs_become_no_data() {
        let tmp = tempfile::tempdir().unwrap();
        let good = tmp.path().join("good");
        std::fs::create_dir_all(&good).unwrap();
        std::fs::write(
            good.join("metrics.csv"),
            format!("{METRICS_CSV_HEADER}\n0,10.0,1.0,0.5,\n64,5.0,0.8,0.4,\n"),
        )
        .unwrap();
        std::fs::write(good.join("logs.jsonl"), "").unwrap();
        let bad = tmp.path().join("empty");
        std::fs::create_dir_all(&bad).unwrap();
        let out = tmp.path().join("report");
        let r = emit_report(&[good, bad], &out).unwrap();
        assert_eq!(r.warnings.len(), 2);
        let md = std::fs::read_to_string(out.join("summary.md")).unwrap();
        assert!(md.contains("| good | 64 | 5.0000 | 0.8000 | 0.4000 | no data |"));
        assert!(md.contains("| empty | no data | no data |"));
        let svg = std::fs::read_to_string(out.join("fid_proxy.svg")).unwrap();
        assert!(svg.contains("<svg"));
    }
}
