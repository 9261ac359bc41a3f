use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::metrics::MetricsSummary;

pub const REPORT_HEADER: &str = "epoch,loss,accuracy,precision,recall,f1,roc_auc,kappa,mcc";

/// Training loss and test-set metrics of one epoch. `epoch` counts from 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// NaN when no class has both positives and negatives in the test set.
    pub roc_auc: f64,
    pub kappa: f64,
    pub mcc: f64,
}

impl EpochReport {
    pub fn new(epoch: usize, train_loss: f64, m: &MetricsSummary) -> Self {
        Self {
            epoch,
            train_loss,
            accuracy: m.accuracy,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            roc_auc: m.roc_auc,
            kappa: m.kappa,
            mcc: m.mcc,
        }
    }

    pub fn metrics(&self) -> [(&'static str, f64); 8] {
        [
            ("loss", self.train_loss),
            ("accuracy", self.accuracy),
            ("precision", self.precision),
            ("recall", self.recall),
            ("f1", self.f1),
            ("roc_auc", self.roc_auc),
            ("kappa", self.kappa),
            ("mcc", self.mcc),
        ]
    }

    pub fn csv_row(&self) -> String {
        let mut row = self.epoch.to_string();
        for (_, v) in self.metrics() {
            write!(row, ",{v:.6}").expect("writing to a String");
        }
        row
    }
}

/// Appends report rows to a CSV file as they are produced.
pub struct ReportWriter {
    file: File,
    path: PathBuf,
}

impl ReportWriter {
    /// Starts a new report, replacing any existing file.
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "{REPORT_HEADER}").map_err(|e| Error::io(path, e))?;
        Ok(Self {
            file,
            path: path.to_path_buf(),
        })
    }

    /// Reopens a report, dropping rows after epoch `keep`. A missing file
    /// starts out empty.
    pub fn resume(path: &Path, keep: usize) -> Result<Self> {
        let kept: Vec<String> = match fs::read_to_string(path) {
            Ok(text) => text
                .lines()
                .skip(1)
                .filter(|l| {
                    l.split(',')
                        .next()
                        .and_then(|e| e.parse::<usize>().ok())
                        .is_some_and(|e| e <= keep)
                })
                .map(str::to_string)
                .collect(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(Error::io(path, e)),
        };
        let mut w = Self::create(path)?;
        for line in kept {
            writeln!(w.file, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(w)
    }

    pub fn append(&mut self, report: &EpochReport) -> Result<()> {
        writeln!(self.file, "{}", report.csv_row())
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

/// Reads a report CSV. Columns are located by header name; `epoch`, `loss`,
/// `roc_auc` and `mcc` are required and the rest default to NaN.
pub fn read_report(path: &Path) -> Result<Vec<EpochReport>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_report(&text).map_err(|e| match e {
        Error::Data { line, message, .. } => Error::data_at(path, line, message),
        other => other,
    })
}

pub fn parse_report(text: &str) -> Result<Vec<EpochReport>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| Error::data(e.to_string()))?.clone();
    let col = |name: &str| header.iter().position(|h| h == name);
    let need = |name: &str| {
        col(name).ok_or_else(|| Error::Data {
            path: None,
            line: Some(1),
            message: format!("report has no {name} column"),
        })
    };
    let (epoch, loss, auc, mcc) = (need("epoch")?, need("loss")?, need("roc_auc")?, need("mcc")?);
    let optional = ["accuracy", "precision", "recall", "f1", "kappa"].map(col);
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::data(e.to_string()))?;
        let line = rec.position().map(|p| p.line());
        let bad = |what: &str| Error::Data {
            path: None,
            line,
            message: format!("cannot parse {what}"),
        };
        let num = |i: usize, what: &str| rec.get(i).and_then(|v| v.parse::<f64>().ok()).ok_or_else(|| bad(what));
        let opt = |i: Option<usize>, what: &str| i.map_or(Ok(f64::NAN), |i| num(i, what));
        rows.push(EpochReport {
            epoch: rec
                .get(epoch)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad("epoch"))?,
            train_loss: num(loss, "loss")?,
            accuracy: opt(optional[0], "accuracy")?,
            precision: opt(optional[1], "precision")?,
            recall: opt(optional[2], "recall")?,
            f1: opt(optional[3], "f1")?,
            roc_auc: num(auc, "roc_auc")?,
            kappa: opt(optional[4], "kappa")?,
            mcc: num(mcc, "mcc")?,
        });
    }
    Ok(rows)
}

fn pct(v: f64) -> String {
    if v.is_nan() {
        "n/a".into()
    } else {
        format!("{:.2}", v * 100.0)
    }
}

fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            rows.iter()
                .map(|r| r[c].len())
                .chain([header[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        padded.join(" | ").trim_end().to_string() + "\n"
    };
    let mut out = line(header.to_vec());
    out.push_str(&(widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-") + "\n"));
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    out
}

fn summary_cells(r: &EpochReport) -> [String; 3] {
    [format!("{:.4}", r.train_loss), pct(r.roc_auc), format!("{:.4}", r.mcc)]
}

/// Per-epoch table with columns Epoch, Loss, ROC AUC (%), MCC.
pub fn format_epoch_table(reports: &[EpochReport]) -> String {
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let mut row = vec![r.epoch.to_string()];
            row.extend(summary_cells(r));
            row
        })
        .collect();
    table(&["Epoch", "Loss", "ROC AUC (%)", "MCC"], &rows)
}

/// Side-by-side table of two arms; epochs missing from one arm are blank.
pub fn format_compare_table(full: &[EpochReport], masked: &[EpochReport]) -> String {
    let last = full.iter().chain(masked).map(|r| r.epoch).max().unwrap_or(0);
    let cells = |arm: &[EpochReport], e: usize| {
        arm.iter()
            .find(|r| r.epoch == e)
            .map_or_else(|| vec![String::new(); 3], |r| summary_cells(r).to_vec())
    };
    let rows: Vec<Vec<String>> = (1..=last)
        .filter(|&e| full.iter().chain(masked).any(|r| r.epoch == e))
        .map(|e| {
            let mut row = vec![e.to_string()];
            row.extend(cells(full, e));
            row.extend(cells(masked, e));
            row
        })
        .collect();
    table(
        &[
            "Epoch",
            "Full Loss",
            "Full ROC AUC (%)",
            "Full MCC",
            "Masked Loss",
            "Masked ROC AUC (%)",
            "Masked MCC",
        ],
        &rows,
    )
}

/// `arm,epoch,...` rows for both arms under one header.
pub fn format_compare_csv(full: &[EpochReport], masked: &[EpochReport]) -> String {
    let mut out = format!("arm,{REPORT_HEADER}\n");
    for (arm, reports) in [("full", full), ("masked", masked)] {
        for r in reports {
            writeln!(out, "{arm},{}", r.csv_row()).expect("writing to a String");
        }
    }
    out
}

/// Final-epoch value of every metric in both arms and `full − masked`.
pub fn format_delta_csv(full: &EpochReport, masked: &EpochReport) -> String {
    let mut out = String::from("metric,full,masked,delta\n");
    for ((name, a), (_, b)) in full.metrics().into_iter().zip(masked.metrics()) {
        writeln!(out, "{name},{a:.6},{b:.6},{:.6}", a - b).expect("writing to a String");
    }
    out
}

/// Trailing moving average with the given window (shorter at the start).
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

const SVG_W: f64 = 720.0;
const PANEL_H: f64 = 260.0;
const MARGIN: f64 = 50.0;
const COLORS: [&str; 7] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2",
];

fn panel(out: &mut String, top: f64, title: &str, series: &[(&str, Vec<(f64, f64)>)], y_range: (f64, f64)) {
    let (w, h) = (SVG_W - 2.0 * MARGIN, PANEL_H - 2.0 * MARGIN);
    let xs = series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0));
    let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let x1 = if x1 > x0 { x1 } else { x0 + 1.0 };
    let (y0, y1) = if y_range.1 > y_range.0 {
        y_range
    } else {
        (y_range.0, y_range.0 + 1.0)
    };
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * w;
    let py = |y: f64| top + MARGIN + (1.0 - (y - y0) / (y1 - y0)) * h;
    let _ = writeln!(
        out,
        r##"<rect x="{MARGIN}" y="{}" width="{w}" height="{h}" fill="none" stroke="#888"/>"##,
        top + MARGIN
    );
    let _ = writeln!(
        out,
        r#"<text x="{MARGIN}" y="{}" font-size="14">{title}</text>"#,
        top + MARGIN - 10.0
    );
    for (v, anchor) in [(y0, top + MARGIN + h), (y1, top + MARGIN + 4.0)] {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{anchor}" font-size="10" text-anchor="end">{v:.3}</text>"#,
            MARGIN - 4.0
        );
    }
    for (x, anchor) in [(x0, "start"), (x1, "end")] {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-size="10" text-anchor="{anchor}">epoch {x}</text>"#,
            px(x),
            top + MARGIN + h + 14.0
        );
    }
    for (i, (name, points)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = points
            .iter()
            .filter(|p| p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline class="series" data-name="{name}" fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-size="11" fill="{color}">{name}</text>"#,
            SVG_W - MARGIN + 4.0,
            top + MARGIN + 12.0 + 14.0 * i as f64
        );
    }
}

/// SVG with a training-loss panel and a test-metric panel.
pub fn render_svg(reports: &[EpochReport]) -> String {
    let x =
        |f: fn(&EpochReport) -> f64| -> Vec<(f64, f64)> { reports.iter().map(|r| (r.epoch as f64, f(r))).collect() };
    let mut out = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_W}" height="{}" viewBox="0 0 {SVG_W} {}">"#,
        2.0 * PANEL_H,
        2.0 * PANEL_H
    );
    out.push('\n');
    let losses = x(|r| r.train_loss);
    let lmax = losses.iter().map(|p| p.1).filter(|v| v.is_finite()).fold(0.0, f64::max);
    panel(&mut out, 0.0, "Training loss", &[("loss", losses)], (0.0, lmax));
    let metrics: Vec<(&str, Vec<(f64, f64)>)> = vec![
        ("accuracy", x(|r| r.accuracy)),
        ("precision", x(|r| r.precision)),
        ("recall", x(|r| r.recall)),
        ("f1", x(|r| r.f1)),
        ("roc_auc", x(|r| r.roc_auc)),
        ("kappa", x(|r| r.kappa)),
        ("mcc", x(|r| r.mcc)),
    ];
    let lo = metrics
        .iter()
        .flat_map(|(_, p)| p.iter().map(|q| q.1))
        .filter(|v| v.is_finite())
        .fold(0.0, f64::min);
    panel(&mut out, PANEL_H, "Test metrics", &metrics, (lo, 1.0));
    out.push_str("</svg>\n");
    out
}

/// Renders the report CSV at `report` as an SVG at `out`.
pub fn plot_report(report: &Path, out: &Path) -> Result<usize> {
    let rows = read_report(report)?;
    if rows.is_empty() {
        return Err(Error::data_at(report, None, "report has no rows to plot"));
    }
    fs::write(out, render_svg(&rows)).map_err(|e| Error::io(out, e))?;
    Ok(rows.len())
}

pub(crate) fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(epoch: usize, loss: f64, auc: f64, mcc: f64) -> EpochReport {
        EpochReport {
            epoch,
            train_loss: loss,
            accuracy: 0.5,
            precision: 0.5,
            recall: 0.5,
            f1: 0.5,
            roc_auc: auc,
            kappa: 0.25,
            mcc,
        }
    }

    /// Reference per-epoch rows of a masked-pipeline run.
    fn region_rows() -> Vec<EpochReport> {
        [
            (0.9144, 0.9304, 0.6175),
            (0.7189, 0.9331, 0.6371),
            (0.6648, 0.9364, 0.6481),
            (0.6150, 0.9406, 0.6725),
            (0.5690, 0.9422, 0.6702),
            (0.5191, 0.9430, 0.6766),
            (0.4561, 0.9443, 0.6888),
            (0.4101, 0.9442, 0.6908),
        ]
        .iter()
        .enumerate()
        .map(|(i, &(l, a, m))| row(i + 1, l, a, m))
        .collect()
    }

    #[test]
    fn csv_row_has_six_decimals() {
        let r = row(3, 0.5, 0.75, -0.125);
        assert_eq!(
            r.csv_row(),
            "3,0.500000,0.500000,0.500000,0.500000,0.500000,0.750000,0.250000,-0.125000"
        );
        assert_eq!(r.csv_row().split(',').count(), REPORT_HEADER.split(',').count());
    }

    #[test]
    fn epoch_table_layout() {
        let t = format_epoch_table(&region_rows());
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], "Epoch | Loss   | ROC AUC (%) | MCC");
        assert_eq!(lines.len(), 2 + 8);
        assert_eq!(lines[2], "1     | 0.9144 | 93.04       | 0.6175");
        assert_eq!(lines[9], "8     | 0.4101 | 94.42       | 0.6908");
    }

    #[test]
    fn compare_table_final_rows() {
        let full: Vec<EpochReport> = [(0.4812, 0.9437, 0.6761), (0.4081, 0.9454, 0.6967)]
            .iter()
            .enumerate()
            .map(|(i, &(l, a, m))| row(i + 7, l, a, m))
            .collect();
        let region = &region_rows()[6..];
        let t = format_compare_table(&full, region);
        let last = t.lines().last().unwrap();
        let cells: Vec<&str> = last.split('|').map(str::trim).collect();
        assert_eq!(cells, ["8", "0.4081", "94.54", "0.6967", "0.4101", "94.42", "0.6908"]);
    }

    #[test]
    fn undefined_auc_prints_na() {
        let t = format_epoch_table(&[row(1, 0.3, f64::NAN, 0.0)]);
        assert!(t.contains("n/a"));
        let parsed = parse_report(&format!("{REPORT_HEADER}\n{}\n", row(1, 0.3, f64::NAN, 0.0).csv_row())).unwrap();
        assert!(parsed[0].roc_auc.is_nan());
    }

    #[test]
    fn report_parse_round_trip() {
        let rows = region_rows();
        let text = std::iter::once(REPORT_HEADER.to_string())
            .chain(rows.iter().map(EpochReport::csv_row))
            .collect::<Vec<_>>()
            .join("\n");
        assert_eq!(parse_report(&text).unwrap(), rows);
        let minimal = parse_report("epoch,loss,roc_auc,mcc\n1,0.9,0.93,0.6\n").unwrap();
        assert_eq!(minimal[0].mcc, 0.6);
        assert!(minimal[0].accuracy.is_nan());
        assert!(parse_report("epoch,loss\n1,0.2\n").is_err());
        assert!(parse_report("epoch,loss,roc_auc,mcc\n1,x,0.9,0.1\n").is_err());
    }

    #[test]
    fn writer_resume_truncates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let mut w = ReportWriter::create(&path).unwrap();
        for r in region_rows() {
            w.append(&r).unwrap();
        }
        drop(w);
        ReportWriter::resume(&path, 3).unwrap();
        let back = read_report(&path).unwrap();
        assert_eq!(back, region_rows()[..3]);
    }

    #[test]
    fn compare_csv_counts_rows() {
        let rows = region_rows();
        let csv = format_compare_csv(&rows, &rows);
        assert_eq!(csv.lines().count(), 1 + 2 * rows.len());
        let delta = format_delta_csv(&rows[7], &rows[7]);
        assert!(delta.lines().skip(1).all(|l| l.ends_with(",0.000000")));
    }

    #[test]
    fn smoothing() {
        assert_eq!(smoothed(&[3.0, 1.0, 2.0, 6.0], 2), vec![3.0, 2.0, 1.5, 4.0]);
        assert_eq!(smoothed(&[1.0, 2.0], 1), vec![1.0, 2.0]);
    }

    #[test]
    fn svg_has_a_series_per_metric() {
        let svg = render_svg(&region_rows());
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("class=\"series\"").count(), 8);
        for name in ["loss", "accuracy", "roc_auc", "mcc", "kappa"] {
            assert!(svg.contains(&format!("data-name=\"{name}\"")));
        }
    }
}
