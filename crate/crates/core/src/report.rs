//! Report files (`report.json`, `metrics.csv`, `matrix.csv`), schema
//! validation and the SVG accuracy plot.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::AccuracyMatrix;
use crate::run::RunReport;

pub const REPORT_SCHEMA: &str = include_str!("../schemas/report.schema.json");

/// Validates a report document against the shipped schema.
pub fn validate_report_value(value: &serde_json::Value) -> Result<()> {
    let schema: serde_json::Value = serde_json::from_str(REPORT_SCHEMA).expect("shipped schema is JSON");
    let compiled = jsonschema::JSONSchema::compile(&schema).map_err(|e| Error::Format(format!("schema: {e}")))?;
    if let Err(errors) = compiled.validate(value) {
        let msgs: Vec<String> = errors.map(|e| format!("{} at {}", e, e.instance_path)).collect();
        return Err(Error::Format(format!("report does not match schema: {}", msgs.join("; "))));
    }
    Ok(())
}

pub fn validate_report(report: &RunReport) -> Result<()> {
    validate_report_value(&serde_json::to_value(report).expect("report serializes"))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const METRICS_HEADER: &str = "strategy,method,scenario,seed,A,F,FT";

/// One row per report.
pub fn metrics_csv(reports: &[&RunReport]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in reports {
        let m = r.metrics.as_ref();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.config.strategy.name(),
            r.config.method.name(),
            r.config.scenario.name(),
            r.config.seed,
            opt(m.map(|m| m.average_accuracy)),
            opt(m.and_then(|m| m.forgetting)),
            opt(m.and_then(|m| m.forward_transfer)),
        );
    }
    s
}

/// `T` rows of `T` cells; missing cells are empty.
pub fn matrix_csv(m: &AccuracyMatrix) -> String {
    let mut s = String::new();
    for row in &m.cells {
        let cells: Vec<String> = row.iter().map(|c| opt(*c)).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

pub fn parse_matrix_csv(text: &str) -> Result<AccuracyMatrix> {
    let mut cells = Vec::new();
    for (i, line) in text.lines().filter(|l| !l.is_empty()).enumerate() {
        let row = line
            .split(',')
            .map(|c| {
                if c.is_empty() {
                    Ok(None)
                } else {
                    c.parse::<f64>().map(Some).map_err(|e| Error::Parse(format!("matrix.csv line {}: {e}", i + 1)))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        cells.push(row);
    }
    if cells.iter().any(|r| r.len() != cells.len()) {
        return Err(Error::Parse("matrix.csv is not square".into()));
    }
    Ok(AccuracyMatrix { cells })
}

/// Writes `report.json`, `metrics.csv` and `matrix.csv` into `out_dir`.
pub fn write_report(report: &RunReport, out_dir: &Path) -> Result<()> {
    validate_report(report)?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("report.json"), report.to_json())?;
    std::fs::write(out_dir.join("metrics.csv"), metrics_csv(&[report]))?;
    std::fs::write(out_dir.join("matrix.csv"), matrix_csv(&report.accuracy))?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<RunReport> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
    validate_report_value(&value)?;
    serde_json::from_value(value).map_err(|e| Error::Parse(e.to_string()))
}

/// Running mean accuracy over seen tasks after each task.
pub fn seen_curve(m: &AccuracyMatrix) -> Result<Vec<f64>> {
    (0..m.tasks()).map(|j| m.seen_average(j)).collect()
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Line chart of [`seen_curve`] per report, labeled by strategy.
pub fn render_plot(reports: &[RunReport]) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::config("plot.reports", "no reports to plot"));
    }
    let curves = reports.iter().map(|r| seen_curve(&r.accuracy)).collect::<Result<Vec<_>>>()?;
    let t_max = curves.iter().map(Vec::len).max().unwrap_or(1).max(1);
    let (w, h, left, right, top, bottom) = (640.0, 400.0, 70.0, 170.0, 30.0, 60.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let x_of = |k: usize| if t_max == 1 { left + pw / 2.0 } else { left + pw * k as f64 / (t_max - 1) as f64 };
    let y_of = |v: f64| top + ph * (1.0 - v);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<g id="axes" stroke="black"><line x1="{left}" y1="{}" x2="{}" y2="{}"/><line x1="{left}" y1="{top}" x2="{left}" y2="{}"/></g>"#,
        top + ph,
        left + pw,
        top + ph,
        top + ph
    );
    for k in 0..t_max {
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">{}</text>"#, x_of(k), top + ph + 18.0, k + 1);
    }
    for i in 0..=4 {
        let v = i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12" text-anchor="end">{v:.2}</text>"#, left - 6.0, y_of(v) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="13" text-anchor="middle">task</text>"#, left + pw / 2.0, h - 15.0);
    let _ = writeln!(
        s,
        r#"<text x="18" y="{}" font-size="13" text-anchor="middle" transform="rotate(-90 18 {})">average accuracy on seen tasks</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    for (i, (r, c)) in reports.iter().zip(&curves).enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let label = escape(&format!("{} ({})", r.config.strategy.name(), r.config.method.name()));
        let pts: Vec<String> = c.iter().enumerate().map(|(k, &v)| format!("{},{}", x_of(k), y_of(v))).collect();
        let _ = writeln!(
            s,
            r#"<polyline class="series" data-label="{label}" fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = top + 16.0 * i as f64 + 8.0;
        let lx = left + pw + 15.0;
        let _ = writeln!(
            s,
            r#"<g class="legend"><line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}" font-size="12">{label}</text></g>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn emit_plot(reports: &[RunReport], out_path: &Path) -> Result<()> {
    let svg = render_plot(reports)?;
    std::fs::write(out_path, svg)?;
    Ok(())
}
