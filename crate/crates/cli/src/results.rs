//! Results tables (CSV) and trade-off scatter plots (SVG).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use lfr_core::eval::{EvalReport, Metric};
use lfr_core::trainer::TrainLog;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// One evaluation event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub run_id: String,
    pub stage: String,
    pub method: String,
    pub knob: String,
    pub knob_value: Option<f64>,
    pub seed: u64,
    pub prev_bleu: Option<f64>,
    pub prev_acc: Option<f64>,
    pub new_bleu: Option<f64>,
    pub new_acc: Option<f64>,
    pub avg_bleu: Option<f64>,
    pub avg_acc: Option<f64>,
    pub zero_bleu: Option<f64>,
    pub zero_acc: Option<f64>,
    pub forget_bleu: Option<f64>,
    pub forget_acc: Option<f64>,
}

impl ResultRow {
    pub fn from_report(run_id: &str, stage: &str, knob: Option<(&str, f64)>, report: &EvalReport) -> Self {
        Self {
            run_id: run_id.to_string(),
            stage: stage.to_string(),
            method: report.run.method.clone(),
            knob: knob.map(|k| k.0.to_string()).unwrap_or_default(),
            knob_value: knob.map(|k| k.1),
            seed: report.run.seed,
            prev_bleu: report.avg1.map(|a| a.bleu),
            prev_acc: report.avg1.map(|a| a.accuracy),
            new_bleu: report.avg2.map(|a| a.bleu),
            new_acc: report.avg2.map(|a| a.accuracy),
            avg_bleu: report.avg.map(|a| a.bleu),
            avg_acc: report.avg.map(|a| a.accuracy),
            zero_bleu: report.zero_avg.map(|a| a.bleu),
            zero_acc: report.zero_avg.map(|a| a.accuracy),
            forget_bleu: report.forgetting.map(|f| f.bleu),
            forget_acc: report.forgetting.map(|f| f.accuracy),
        }
    }

    pub fn key(&self) -> (String, String) {
        (self.run_id.clone(), self.stage.clone())
    }

    pub fn point(&self, metric: Metric) -> Option<(f64, f64)> {
        match metric {
            Metric::Bleu => self.prev_bleu.zip(self.new_bleu),
            Metric::Accuracy => self.prev_acc.zip(self.new_acc),
        }
    }
}

pub fn parse_rows(text: &str) -> Result<Vec<ResultRow>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    rdr.deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| CliError::Runtime(format!("results table: {e}")))
}

pub fn write_rows(rows: &[ResultRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        // keep the header so the file stays a valid table
        w.write_record(["run_id", "stage", "method", "knob", "knob_value", "seed", "prev_bleu", "prev_acc", "new_bleu", "new_acc", "avg_bleu", "avg_acc", "zero_bleu", "zero_acc", "forget_bleu", "forget_acc"])
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))
}

/// Replaces rows with the same (run, stage) key, appends the rest, and
/// keeps the table sorted by key.
pub fn upsert(rows: &mut Vec<ResultRow>, new: ResultRow) {
    rows.retain(|r| r.key() != new.key());
    rows.push(new);
    rows.sort_by_key(ResultRow::key);
}

/// Per-step training log.
pub fn train_log_csv(log: &TrainLog) -> Result<Vec<u8>> {
    let evals: BTreeMap<usize, f64> = log.evals.iter().map(|e| (e.step, e.valid_loss)).collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "lr", "loss", "penalty", "valid_loss"])
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    for r in &log.rows {
        let v = evals.get(&r.step).map(f64::to_string).unwrap_or_default();
        w.write_record([r.step.to_string(), r.lr.to_string(), r.loss.to_string(), r.penalty.to_string(), v])
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Scatter of previous-task vs new-task metric, one series per method.
/// Each plotted row is one `<circle class="point">`.
pub fn scatter_svg(rows: &[ResultRow], metric: Metric, title: &str) -> String {
    let (w, h, m) = (640.0, 480.0, 60.0);
    let pts: Vec<(&ResultRow, f64, f64)> = rows
        .iter()
        .filter_map(|r| r.point(metric).map(|(p, n)| (r, p, n)))
        .filter(|(_, p, n)| p.is_finite() && n.is_finite())
        .collect();
    let span = |vals: Vec<f64>| {
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() {
            (0.0, 100.0)
        } else if hi - lo < 1e-9 {
            (lo - 1.0, hi + 1.0)
        } else {
            let pad = 0.05 * (hi - lo);
            (lo - pad, hi + pad)
        }
    };
    let (x0, x1) = span(pts.iter().map(|p| p.2).collect());
    let (y0, y1) = span(pts.iter().map(|p| p.1).collect());
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let label = match metric {
        Metric::Bleu => "BLEU",
        Metric::Accuracy => "token accuracy (%)",
    };
    let mut methods: Vec<&str> = pts.iter().map(|p| p.0.method.as_str()).collect();
    methods.sort();
    methods.dedup();
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, esc(title));
    let _ = writeln!(s, r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - m, w - m, h - m);
    let _ = writeln!(s, r#"<line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#, h - m);
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{fx:.1}</text>"#, sx(fx), h - m + 16.0);
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{fy:.1}</text>"#, m - 6.0, sy(fy) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">new task {label}</text>"#, w / 2.0, h - 16.0);
    let _ = writeln!(s, r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">previous task {label}</text>"#, h / 2.0, h / 2.0);
    for (i, method) in methods.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(s, r#"<g class="series" data-method="{}" fill="{color}">"#, esc(method));
        for (r, p, n) in pts.iter().filter(|p| p.0.method == *method) {
            let knob = r.knob_value.map(|v| format!(" {}={v}", r.knob)).unwrap_or_default();
            let _ = writeln!(
                s,
                r#"<circle class="point" cx="{:.2}" cy="{:.2}" r="4"><title>{}{}: prev {p:.2}, new {n:.2}</title></circle>"#,
                sx(*n),
                sy(*p),
                esc(&r.run_id),
                esc(&knob)
            );
        }
        let _ = writeln!(s, "</g>");
        let ly = m + 16.0 * i as f64;
        let _ = writeln!(s, r#"<circle cx="{}" cy="{ly}" r="4" fill="{color}"/><text x="{}" y="{}">{}</text>"#, w - m - 90.0, w - m - 82.0, ly + 4.0, esc(method));
    }
    s.push_str("</svg>\n");
    s
}

/// Number of plotted points in an SVG produced by [`scatter_svg`].
pub fn count_points(svg: &str) -> usize {
    svg.matches(r#"<circle class="point""#).count()
}
