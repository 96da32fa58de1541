//! Report rendering: metrics logs and probe results in, text tables plus a
//! machine-readable summary plus loss-curve plots out.
//!
//! Rendering is deterministic: identical inputs produce byte-identical
//! outputs. F1 values are printed multiplied by 100 with one decimal, the
//! convention used throughout the result tables.

use std::fmt::Write as _;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ClpError, Result};
use crate::image::Image;
use crate::probe::ProbeReport;
use crate::trainer::StepMetrics;

/// A probe report labeled with where it came from, for side-by-side tables.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedProbe {
    pub name: String,
    pub report: ProbeReport,
}

/// Condensed view of one metrics log, embedded in the JSON summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub name: String,
    pub steps: usize,
    pub final_l_tcl: Option<f64>,
    pub final_l_cir: Option<f64>,
    pub final_l_tot: Option<f64>,
    pub min_l_tot: Option<f64>,
    /// File name of the rendered plot, absent for an empty log.
    pub plot: Option<String>,
}

/// Machine-readable companion to `report.txt`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportSummary {
    pub metrics: Vec<MetricsSummary>,
    pub probes: Vec<NamedProbe>,
}

/// Parse a jsonl metrics log. An empty or whitespace-only file is a valid
/// empty log, unlike the corpus loaders where emptiness means broken data.
pub fn load_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let file = std::fs::File::open(path).map_err(|e| ClpError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| ClpError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let m: StepMetrics = serde_json::from_str(&line).map_err(|e| ClpError::Format {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(m);
    }
    Ok(out)
}

pub fn load_probe_report(path: &Path) -> Result<ProbeReport> {
    let text = std::fs::read_to_string(path).map_err(|e| ClpError::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| ClpError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Reject up front with a list of every missing input, not just the first.
pub fn check_inputs_exist(paths: &[PathBuf]) -> Result<()> {
    let missing: Vec<String> = paths
        .iter()
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(ClpError::Data(format!(
            "missing input files: {}",
            missing.join(", ")
        )))
    }
}

/// Short display name for an input path: the last two components, enough to
/// tell `runA/metrics.jsonl` from `runB/metrics.jsonl`.
pub fn display_name(path: &Path) -> String {
    let comps: Vec<_> = path
        .components()
        .rev()
        .take(2)
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect();
    comps.into_iter().rev().collect::<Vec<_>>().join("/")
}

fn fmt_f1(v: f64) -> String {
    format!("{:.1}", v * 100.0)
}

/// Side-by-side table of per-label and mean F1 (x 100), one column per
/// report. Labels keep first-appearance order across reports; a label a
/// report never saw renders as "-".
pub fn render_probe_table(probes: &[NamedProbe]) -> String {
    let mut labels: Vec<String> = Vec::new();
    for p in probes {
        for l in &p.report.label_names {
            if !labels.contains(l) {
                labels.push(l.clone());
            }
        }
    }

    let mut head = vec!["label".to_string()];
    head.extend(probes.iter().map(|p| p.name.clone()));
    let mut rows: Vec<Vec<String>> = Vec::new();
    for l in &labels {
        let mut row = vec![l.clone()];
        for p in probes {
            let cell = p
                .report
                .label_names
                .iter()
                .position(|n| n == l)
                .map(|i| fmt_f1(p.report.label_f1[i]))
                .unwrap_or_else(|| "-".to_string());
            row.push(cell);
        }
        rows.push(row);
    }
    let mut mean_row = vec!["mean".to_string()];
    for p in probes {
        mean_row.push(fmt_f1(p.report.mean_f1));
    }
    rows.push(mean_row);

    let ncols = head.len();
    let mut widths: Vec<usize> = head.iter().map(|h| h.len()).collect();
    for row in &rows {
        for c in 0..ncols {
            widths[c] = widths[c].max(row[c].len());
        }
    }

    let mut out = String::new();
    let render_row = |out: &mut String, row: &[String]| {
        for (c, cell) in row.iter().enumerate() {
            if c == 0 {
                let _ = write!(out, "{:<w$}", cell, w = widths[0]);
            } else {
                let _ = write!(out, " | {:>w$}", cell, w = widths[c]);
            }
        }
        out.push('\n');
    };
    render_row(&mut out, &head);
    for (c, w) in widths.iter().enumerate() {
        if c == 0 {
            out.push_str(&"-".repeat(*w));
        } else {
            out.push_str("-+-");
            out.push_str(&"-".repeat(*w));
        }
    }
    out.push('\n');
    for row in &rows {
        render_row(&mut out, row);
    }
    out
}

const PLOT_H: usize = 480;
const PLOT_W: usize = 640;
const MARGIN_L: usize = 48;
const MARGIN_R: usize = 16;
const MARGIN_T: usize = 16;
const MARGIN_B: usize = 32;

pub const COLOR_TCL: (f64, f64, f64) = (0.12, 0.47, 0.71);
pub const COLOR_CIR: (f64, f64, f64) = (1.0, 0.5, 0.05);
pub const COLOR_TOT: (f64, f64, f64) = (0.1, 0.1, 0.1);

fn put_px(img: &mut Image, y: isize, x: isize, color: (f64, f64, f64)) {
    if y < 0 || x < 0 || y as usize >= img.height || x as usize >= img.width {
        return;
    }
    let (y, x) = (y as usize, x as usize);
    img.set(y, x, 0, color.0);
    img.set(y, x, 1, color.1);
    img.set(y, x, 2, color.2);
}

fn draw_line(img: &mut Image, p0: (f64, f64), p1: (f64, f64), color: (f64, f64, f64)) {
    let (y0, x0) = p0;
    let (y1, x1) = p1;
    let steps = (y1 - y0).abs().max((x1 - x0).abs()).ceil() as usize + 1;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let y = y0 + (y1 - y0) * t;
        let x = x0 + (x1 - x0) * t;
        put_px(img, y.round() as isize, x.round() as isize, color);
    }
}

/// Render the three loss series of one run as a line plot. Blue is the
/// temporal loss, orange the reconstruction loss, black the weighted total.
/// The y axis starts at zero; the x axis is step order.
pub fn plot_loss_curves(metrics: &[StepMetrics]) -> Image {
    let mut img = Image::from_data(PLOT_H, PLOT_W, 3, vec![1.0; PLOT_H * PLOT_W * 3])
        .expect("static plot dimensions");
    let x0 = MARGIN_L as f64;
    let x1 = (PLOT_W - MARGIN_R - 1) as f64;
    let y0 = (PLOT_H - MARGIN_B - 1) as f64; // screen y grows downward
    let y1 = MARGIN_T as f64;

    let mut y_max = 0.0f64;
    for m in metrics {
        y_max = y_max.max(m.l_tcl).max(m.l_cir).max(m.l_tot);
    }
    if y_max <= 0.0 || !y_max.is_finite() {
        y_max = 1.0;
    }
    y_max *= 1.05;

    let gray = (0.85, 0.85, 0.85);
    for k in 1..4 {
        let gy = y0 + (y1 - y0) * k as f64 / 4.0;
        draw_line(&mut img, (gy, x0), (gy, x1), gray);
    }
    let axis = (0.3, 0.3, 0.3);
    draw_line(&mut img, (y0, x0), (y1, x0), axis);
    draw_line(&mut img, (y0, x0), (y0, x1), axis);

    let n = metrics.len();
    let sx = |i: usize| {
        if n <= 1 {
            (x0 + x1) / 2.0
        } else {
            x0 + (x1 - x0) * i as f64 / (n - 1) as f64
        }
    };
    let sy = |v: f64| y0 + (y1 - y0) * (v.max(0.0) / y_max);
    let mut series = |get: &dyn Fn(&StepMetrics) -> f64, color| {
        if n == 1 {
            let p = (sy(get(&metrics[0])), sx(0));
            draw_line(&mut img, p, p, color);
        }
        for i in 1..n {
            let p0 = (sy(get(&metrics[i - 1])), sx(i - 1));
            let p1 = (sy(get(&metrics[i])), sx(i));
            draw_line(&mut img, p0, p1, color);
        }
    };
    series(&|m| m.l_tcl, COLOR_TCL);
    series(&|m| m.l_cir, COLOR_CIR);
    series(&|m| m.l_tot, COLOR_TOT);
    img
}

fn summarize(name: &str, metrics: &[StepMetrics], plot: Option<String>) -> MetricsSummary {
    let last = metrics.last();
    MetricsSummary {
        name: name.to_string(),
        steps: metrics.len(),
        final_l_tcl: last.map(|m| m.l_tcl),
        final_l_cir: last.map(|m| m.l_cir),
        final_l_tot: last.map(|m| m.l_tot),
        min_l_tot: metrics
            .iter()
            .map(|m| m.l_tot)
            .fold(None, |acc: Option<f64>, v| {
                Some(acc.map_or(v, |a| a.min(v)))
            }),
        plot,
    }
}

fn render_text(summaries: &[MetricsSummary], probes: &[NamedProbe]) -> String {
    let mut out = String::new();
    out.push_str("training metrics\n================\n\n");
    if summaries.is_empty() {
        out.push_str("none\n");
    }
    for s in summaries {
        if s.steps == 0 {
            let _ = writeln!(out, "{}: empty log (0 steps)", s.name);
            continue;
        }
        let _ = writeln!(
            out,
            "{}: {} steps, final l_tcl {:.6} l_cir {:.6} l_tot {:.6}, min l_tot {:.6}",
            s.name,
            s.steps,
            s.final_l_tcl.unwrap(),
            s.final_l_cir.unwrap(),
            s.final_l_tot.unwrap(),
            s.min_l_tot.unwrap(),
        );
        if let Some(p) = &s.plot {
            let _ = writeln!(
                out,
                "  plot: {p} (blue = temporal loss, orange = reconstruction loss, black = total)"
            );
        }
    }
    out.push_str("\nprobe results (F1 x 100)\n========================\n\n");
    if probes.is_empty() {
        out.push_str("none\n");
    } else {
        out.push_str(&render_probe_table(probes));
        out.push_str("\nper-fold mean F1 (x 100)\n");
        for p in probes {
            let folds: Vec<String> = p.report.fold_mean_f1.iter().map(|v| fmt_f1(*v)).collect();
            let _ = writeln!(out, "{}: {}", p.name, folds.join(" "));
        }
        let warn_count: usize = probes.iter().map(|p| p.report.warnings.len()).sum();
        if warn_count > 0 {
            out.push_str("\nwarnings\n");
            for p in probes {
                for w in &p.report.warnings {
                    let _ = writeln!(out, "{}: {}", p.name, w);
                }
            }
        }
    }
    out
}

/// Render everything into `out_dir`: `report.txt`, `report.json`, and one
/// `loss_curve_NN.png` per non-empty metrics log. Fails before writing
/// anything if any input is missing.
pub fn write_report(
    out_dir: &Path,
    metrics_paths: &[PathBuf],
    probe_paths: &[PathBuf],
) -> Result<ReportSummary> {
    let all: Vec<PathBuf> = metrics_paths
        .iter()
        .chain(probe_paths.iter())
        .cloned()
        .collect();
    check_inputs_exist(&all)?;
    std::fs::create_dir_all(out_dir).map_err(|e| ClpError::io(out_dir, e))?;

    let mut summaries = Vec::new();
    for (i, path) in metrics_paths.iter().enumerate() {
        let metrics = load_metrics(path)?;
        let plot = if metrics.is_empty() {
            None
        } else {
            let fname = format!("loss_curve_{i:02}.png");
            plot_loss_curves(&metrics).save_png(&out_dir.join(&fname))?;
            Some(fname)
        };
        summaries.push(summarize(&display_name(path), &metrics, plot));
    }

    let mut probes = Vec::new();
    for path in probe_paths {
        probes.push(NamedProbe {
            name: display_name(path),
            report: load_probe_report(path)?,
        });
    }

    let text = render_text(&summaries, &probes);
    std::fs::write(out_dir.join("report.txt"), text)
        .map_err(|e| ClpError::io(out_dir.join("report.txt"), e))?;
    let summary = ReportSummary {
        metrics: summaries,
        probes,
    };
    let json = serde_json::to_string_pretty(&summary).expect("report summary serializes");
    std::fs::write(out_dir.join("report.json"), json)
        .map_err(|e| ClpError::io(out_dir.join("report.json"), e))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probe::LabelStats;

    fn fake_report(names: &[&str], f1: &[f64], mean: f64) -> ProbeReport {
        let stats: Vec<LabelStats> = f1
            .iter()
            .map(|_| LabelStats::from_counts(1, 1, 1))
            .collect();
        ProbeReport {
            label_names: names.iter().map(|s| s.to_string()).collect(),
            per_fold: vec![stats],
            fold_mean_f1: vec![mean],
            label_f1: f1.to_vec(),
            mean_f1: mean,
            warnings: vec![],
        }
    }

    fn metrics_line(step: usize, tcl: f64, cir: f64) -> StepMetrics {
        StepMetrics {
            step,
            l_tcl: tcl,
            l_cir: cir,
            l_tot: tcl + 0.1 * cir,
            queue_fill: step * 4,
        }
    }

    #[test]
    fn missing_inputs_listed_in_error() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("gone_a.jsonl");
        let b = dir.path().join("gone_b.json");
        let err = write_report(dir.path(), &[a.clone()], &[b.clone()]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("gone_a.jsonl"), "{msg}");
        assert!(msg.contains("gone_b.json"), "{msg}");
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn empty_metrics_log_yields_valid_report() {
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("metrics.jsonl");
        std::fs::write(&log, "").unwrap();
        let out = dir.path().join("out");
        let summary = write_report(&out, &[log], &[]).unwrap();
        assert_eq!(summary.metrics.len(), 1);
        assert_eq!(summary.metrics[0].steps, 0);
        assert!(summary.metrics[0].plot.is_none());
        assert!(out.join("report.txt").exists());
        assert!(out.join("report.json").exists());
        let text = std::fs::read_to_string(out.join("report.txt")).unwrap();
        assert!(text.contains("empty log"));
    }

    #[test]
    fn side_by_side_table_covers_label_union() {
        let probes = vec![
            NamedProbe {
                name: "runA".into(),
                report: fake_report(&["au0", "au1"], &[0.624, 0.558], 0.591),
            },
            NamedProbe {
                name: "runB".into(),
                report: fake_report(&["au1", "au2"], &[0.520, 0.481], 0.501),
            },
        ];
        let table = render_probe_table(&probes);
        assert!(table.contains("runA"), "{table}");
        assert!(table.contains("runB"), "{table}");
        for label in ["au0", "au1", "au2", "mean"] {
            assert!(table.contains(label), "{table}");
        }
        // au0 is unknown to runB, au2 unknown to runA.
        let au0_row = table.lines().find(|l| l.starts_with("au0")).unwrap();
        assert!(au0_row.contains("62.4"), "{au0_row}");
        assert!(au0_row.trim_end().ends_with('-'), "{au0_row}");
        let mean_row = table.lines().find(|l| l.starts_with("mean")).unwrap();
        assert!(mean_row.contains("59.1"), "{mean_row}");
        assert!(mean_row.contains("50.1"), "{mean_row}");
    }

    #[test]
    fn identical_inputs_render_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("metrics.jsonl");
        let mut lines = String::new();
        for s in 1..=40 {
            let m = metrics_line(s, 0.5 / s as f64, 2.0 + 1.0 / s as f64);
            lines.push_str(&serde_json::to_string(&m).unwrap());
            lines.push('\n');
        }
        std::fs::write(&log, lines).unwrap();
        let probe = dir.path().join("probe_report.json");
        std::fs::write(
            &probe,
            serde_json::to_string(&fake_report(&["au0"], &[0.5], 0.5)).unwrap(),
        )
        .unwrap();

        let out1 = dir.path().join("out1");
        let out2 = dir.path().join("out2");
        write_report(&out1, &[log.clone()], &[probe.clone()]).unwrap();
        write_report(&out2, &[log], &[probe]).unwrap();
        for f in ["report.txt", "report.json", "loss_curve_00.png"] {
            let a = std::fs::read(out1.join(f)).unwrap();
            let b = std::fs::read(out2.join(f)).unwrap();
            assert_eq!(a, b, "{f} differs between identical runs");
        }
    }

    #[test]
    fn plot_contains_every_series_color() {
        let metrics: Vec<StepMetrics> = (1..=30)
            .map(|s| metrics_line(s, 0.3 + 0.01 * s as f64, 1.0 + 0.05 * s as f64))
            .collect();
        let img = plot_loss_curves(&metrics);
        assert_eq!((img.height, img.width, img.channels), (480, 640, 3));
        let close = |a: f64, b: f64| (a - b).abs() < 1.0 / 255.0;
        for color in [COLOR_TCL, COLOR_CIR, COLOR_TOT] {
            let found = (0..img.height).any(|y| {
                (0..img.width).any(|x| {
                    close(img.get(y, x, 0), color.0)
                        && close(img.get(y, x, 1), color.1)
                        && close(img.get(y, x, 2), color.2)
                })
            });
            assert!(found, "series color {color:?} absent from plot");
        }
    }

    #[test]
    fn malformed_metrics_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("metrics.jsonl");
        let good = serde_json::to_string(&metrics_line(1, 0.5, 2.0)).unwrap();
        std::fs::write(&log, format!("{good}\nnot json\n")).unwrap();
        let err = load_metrics(&log).unwrap_err();
        match err {
            ClpError::Format { line, .. } => assert_eq!(line, 2),
            other => panic!("expected format error, got {other}"),
        }
    }
}
