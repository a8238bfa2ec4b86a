//! CSV reports with parsers, plus static SVG renderings.
//!
//! Every float is written in Rust's shortest round-trip form, so parsing a
//! report gives back exactly the values that produced it.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::confidence::SweepRecord;
use crate::error::{Error, Result};

use super::{Confusion, EvalReport};

fn csv_err(what: &str, e: impl std::fmt::Display) -> Error {
    Error::data(format!("{what} csv: {e}"))
}

fn to_csv<T: Serialize>(what: &str, rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(what, e))?;
    }
    let bytes = w.into_inner().map_err(|e| csv_err(what, e))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn from_csv<T: for<'de> Deserialize<'de>>(what: &str, text: &str) -> Result<Vec<T>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| csv_err(what, format!("row {}: {e}", i + 1))))
        .collect()
}

pub fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ConfusionRow {
    true_class: String,
    predicted: String,
    count: usize,
    percent: f64,
    structural: bool,
}

/// Long format: one row per (true, predicted) pair in class order.
pub fn confusion_csv(c: &Confusion) -> Result<String> {
    let norm = c.normalized();
    let mut rows = Vec::with_capacity(c.classes.len().pow(2));
    for (t, tn) in c.classes.iter().enumerate() {
        for (p, pn) in c.classes.iter().enumerate() {
            rows.push(ConfusionRow {
                true_class: tn.clone(),
                predicted: pn.clone(),
                count: c.counts[t][p],
                percent: norm[t][p],
                structural: c.structural[t][p],
            });
        }
    }
    to_csv("confusion", &rows)
}

pub fn parse_confusion_csv(text: &str) -> Result<Confusion> {
    let rows: Vec<ConfusionRow> = from_csv("confusion", text)?;
    let mut classes: Vec<String> = Vec::new();
    for r in &rows {
        if !classes.contains(&r.true_class) {
            classes.push(r.true_class.clone());
        }
    }
    let k = classes.len();
    if rows.len() != k * k {
        return Err(Error::data(format!(
            "confusion csv: {} rows for {k} classes",
            rows.len()
        )));
    }
    let mut counts = vec![vec![0; k]; k];
    let mut structural = vec![vec![false; k]; k];
    for (i, r) in rows.iter().enumerate() {
        let (t, p) = (i / k, i % k);
        if r.true_class != classes[t] || r.predicted != classes[p] {
            return Err(Error::data(format!(
                "confusion csv: row {} is ({}, {}), expected ({}, {})",
                i + 1,
                r.true_class,
                r.predicted,
                classes[t],
                classes[p]
            )));
        }
        counts[t][p] = r.count;
        structural[t][p] = r.structural;
    }
    Ok(Confusion {
        classes,
        counts,
        structural,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetric {
    pub class: String,
    pub total: usize,
    pub correct: usize,
    /// Empty when the class has no samples.
    pub accuracy: Option<f64>,
}

/// Per-class rows followed by an `ALL` row.
pub fn metrics_rows(report: &EvalReport) -> Vec<ClassMetric> {
    let c = &report.confusion;
    let mut rows: Vec<ClassMetric> = c
        .classes
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let total: usize = c.counts[i].iter().sum();
            ClassMetric {
                class: name.clone(),
                total,
                correct: c.counts[i][i],
                accuracy: (total > 0).then(|| c.counts[i][i] as f64 / total as f64),
            }
        })
        .collect();
    let correct = rows.iter().map(|r| r.correct).sum();
    rows.push(ClassMetric {
        class: "ALL".into(),
        total: report.total,
        correct,
        accuracy: Some(report.accuracy),
    });
    rows
}

pub fn metrics_csv(report: &EvalReport) -> Result<String> {
    to_csv("metrics", &metrics_rows(report))
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<ClassMetric>> {
    from_csv("metrics", text)
}

pub fn sweep_csv(rows: &[SweepRecord]) -> Result<String> {
    to_csv("sweep", rows)
}

pub fn parse_sweep_csv(text: &str) -> Result<Vec<SweepRecord>> {
    from_csv("sweep", text)
}

/// One row of the experiment comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub experiment: String,
    pub phantom: String,
    pub input: String,
    pub output: String,
    pub accuracy: f64,
    pub params: usize,
    pub size_bytes: usize,
    /// Median batch-1 forward time; hardware-bound.
    pub infer_ms: f64,
}

pub fn experiment_csv(rows: &[ExperimentRow]) -> Result<String> {
    to_csv("experiment", rows)
}

pub fn parse_experiment_csv(text: &str) -> Result<Vec<ExperimentRow>> {
    from_csv("experiment", text)
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Row-normalized heatmap; structural cells are hatched and left unnumbered.
pub fn confusion_svg(c: &Confusion) -> String {
    let k = c.classes.len();
    let cell = 34.0;
    let (left, top) = (90.0, 90.0);
    let size = left + cell * k as f64 + 20.0;
    let norm = c.normalized();
    let mut s = String::new();
    let _ = write!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" font-family="sans-serif" font-size="10">"#
    );
    s.push_str(
        r##"<defs><pattern id="hatch" width="6" height="6" patternUnits="userSpaceOnUse" patternTransform="rotate(45)"><rect width="6" height="6" fill="#eee"/><line x1="0" y1="0" x2="0" y2="6" stroke="#bbb" stroke-width="2"/></pattern></defs>"##,
    );
    for (i, name) in c.classes.iter().enumerate() {
        let pos = top + cell * (i as f64 + 0.5);
        let _ = write!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end" dominant-baseline="middle">{}</text>"#,
            left - 4.0,
            pos,
            esc(name)
        );
        let x = left + cell * (i as f64 + 0.5);
        let _ = write!(
            s,
            r#"<text x="{x}" y="{}" transform="rotate(-60 {x} {})">{}</text>"#,
            top - 4.0,
            top - 4.0,
            esc(name)
        );
    }
    for t in 0..k {
        for p in 0..k {
            let x = left + cell * p as f64;
            let y = top + cell * t as f64;
            if c.structural[t][p] {
                let _ = write!(
                    s,
                    r##"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="url(#hatch)" stroke="#fff"/>"##
                );
                continue;
            }
            let v = norm[t][p] / 100.0;
            let shade = (255.0 * (1.0 - v)).round() as u8;
            let _ = write!(
                s,
                r##"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="rgb({shade},{shade},255)" stroke="#fff"/>"##
            );
            let color = if v > 0.5 { "#fff" } else { "#000" };
            let _ = write!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle" dominant-baseline="middle" fill="{color}">{}</text>"#,
                x + cell / 2.0,
                y + cell / 2.0,
                c.counts[t][p]
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Ignored rate against q per dataset (solid), error rate where known (dashed).
pub fn sweep_svg(rows: &[SweepRecord]) -> String {
    let (w, h, m) = (520.0, 360.0, 50.0);
    let mut datasets: Vec<&str> = Vec::new();
    for r in rows {
        if !datasets.contains(&r.dataset.as_str()) {
            datasets.push(&r.dataset);
        }
    }
    let qmax = rows.iter().map(|r| r.q).fold(0.0, f64::max).max(1e-9);
    let ymax = rows
        .iter()
        .flat_map(|r| [Some(r.ignored_rate), r.error_rate])
        .flatten()
        .fold(0.0, f64::max)
        .max(0.01);
    let px = |q: f64| m + (w - 2.0 * m) * q / qmax;
    let py = |v: f64| h - m - (h - 2.0 * m) * v / ymax;
    let mut s = String::new();
    let _ = write!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = write!(
        s,
        r##"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="#000"/><line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="#000"/>"##,
        h - m,
        w - m,
        h - m,
        h - m
    );
    let _ = write!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">quantile q (max {qmax})</text><text x="12" y="{}" transform="rotate(-90 12 {})" text-anchor="middle">rate (max {ymax:.3})</text>"#,
        w / 2.0,
        h - 12.0,
        h / 2.0,
        h / 2.0
    );
    for (di, d) in datasets.iter().enumerate() {
        let color = PALETTE[di % PALETTE.len()];
        let mine: Vec<&SweepRecord> = rows.iter().filter(|r| r.dataset == *d).collect();
        let line = |vals: Vec<(f64, f64)>, dash: &str| {
            let pts: Vec<String> = vals
                .iter()
                .map(|&(q, v)| format!("{:.2},{:.2}", px(q), py(v)))
                .collect();
            format!(
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.5"{dash} points="{}"/>"#,
                pts.join(" ")
            )
        };
        s.push_str(&line(mine.iter().map(|r| (r.q, r.ignored_rate)).collect(), ""));
        let errs: Vec<(f64, f64)> = mine
            .iter()
            .filter_map(|r| r.error_rate.map(|e| (r.q, e)))
            .collect();
        if !errs.is_empty() {
            s.push_str(&line(errs, r#" stroke-dasharray="4 3""#));
        }
        let _ = write!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            m + 8.0,
            m + 14.0 * di as f64,
            esc(d)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn confusion() -> Confusion {
        Confusion {
            classes: vec!["A".into(), "B,x".into(), "C".into()],
            counts: vec![vec![5, 1, 0], vec![0, 3, 0], vec![0, 0, 0]],
            structural: vec![
                vec![false, false, true],
                vec![false, false, true],
                vec![true, true, false],
            ],
        }
    }

    #[test]
    fn confusion_round_trip() {
        let c = confusion();
        let text = confusion_csv(&c).unwrap();
        assert_eq!(parse_confusion_csv(&text).unwrap(), c);
    }

    #[test]
    fn sweep_round_trip_keeps_exact_floats() {
        let rows = vec![
            SweepRecord {
                dataset: "test".into(),
                q: 0.005,
                total: 3,
                ignored: 1,
                ignored_rate: 1.0 / 3.0,
                errors: Some(0),
                error_rate: Some(0.0),
            },
            SweepRecord {
                dataset: "unknown".into(),
                q: 0.1,
                total: 7,
                ignored: 2,
                ignored_rate: 2.0 / 7.0,
                errors: None,
                error_rate: None,
            },
        ];
        assert_eq!(parse_sweep_csv(&sweep_csv(&rows).unwrap()).unwrap(), rows);
        assert!(sweep_svg(&rows).starts_with("<svg"));
    }

    #[test]
    fn structural_cells_carry_no_number() {
        let svg = confusion_svg(&confusion());
        assert_eq!(svg.matches("url(#hatch)").count(), 4);
    }

    #[test]
    fn metrics_round_trip() {
        let c = confusion();
        let report = EvalReport {
            total: c.total(),
            accuracy: c.accuracy(),
            confusion: c,
        };
        let rows = metrics_rows(&report);
        assert_eq!(rows.last().unwrap().correct, 8);
        assert_eq!(rows[2].accuracy, None);
        assert_eq!(
            parse_metrics_csv(&metrics_csv(&report).unwrap()).unwrap(),
            rows
        );
    }
}
