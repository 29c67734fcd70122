//! Report files (JSON, CSV, SVG) and side-by-side comparison.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{HarnessError, OrderEffectReport};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportFile {
    pub schema_version: u32,
    pub reports: Vec<OrderEffectReport>,
}

impl ReportFile {
    pub fn new(reports: Vec<OrderEffectReport>) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            reports,
        }
    }

    pub fn strata(&self) -> Vec<usize> {
        let mut k: Vec<usize> = self.reports.iter().map(|r| r.k).collect();
        k.sort_unstable();
        k.dedup();
        k
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Json,
    Csv,
    Svg,
}

impl OutputFormat {
    pub fn extension(self) -> &'static str {
        match self {
            Self::Json => "json",
            Self::Csv => "csv",
            Self::Svg => "svg",
        }
    }
}

impl FromStr for OutputFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            "svg" => Ok(Self::Svg),
            _ => Err(format!("unknown format {s:?} (expected json, csv or svg)")),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Writes `file` to `path` in the given format.
pub fn emit_report(file: &ReportFile, format: OutputFormat, path: &Path) -> Result<(), HarnessError> {
    if file.reports.is_empty() {
        return Err(HarnessError::Protocol("no reports to write".into()));
    }
    let text = match format {
        OutputFormat::Json => {
            let mut s = serde_json::to_string_pretty(file).map_err(|e| io_err(path, e))?;
            s.push('\n');
            s
        }
        OutputFormat::Csv => to_csv(file).map_err(|e| io_err(path, e))?,
        OutputFormat::Svg => to_svg(file),
    };
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn read_report(path: &Path) -> Result<ReportFile, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let file: ReportFile = serde_json::from_str(&text).map_err(|e| io_err(path, e))?;
    if file.schema_version != REPORT_SCHEMA_VERSION {
        return Err(io_err(
            path,
            format!(
                "report schema version {} (expected {REPORT_SCHEMA_VERSION})",
                file.schema_version
            ),
        ));
    }
    Ok(file)
}

fn to_csv(file: &ReportFile) -> Result<String, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["scheme", "loss_mode", "k", "position", "mean", "std", "n_shuffles", "n_samples"])?;
    for r in &file.reports {
        for p in 0..r.k {
            w.write_record([
                r.scheme.clone(),
                r.loss_mode.clone(),
                r.k.to_string(),
                p.to_string(),
                r.per_position_mean[p].to_string(),
                r.per_position_std[p].to_string(),
                r.n_shuffles.to_string(),
                r.n_samples.to_string(),
            ])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// One panel per `k`, one line (with a ±1 std band) per scheme/loss pair.
fn to_svg(file: &ReportFile) -> String {
    let strata = file.strata();
    let (pw, ph) = (320.0, 240.0);
    let (ml, mr, mt, mb) = (50.0, 15.0, 30.0, 40.0);
    let width = pw * strata.len() as f64;
    let height = ph + 30.0;
    let mut labels: Vec<String> = Vec::new();
    for r in &file.reports {
        let l = format!("{} / {}", r.scheme, r.loss_mode);
        if !labels.contains(&l) {
            labels.push(l);
        }
    }

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    for (pi, &k) in strata.iter().enumerate() {
        let x0 = pw * pi as f64;
        let (px, py) = (x0 + ml, mt);
        let (w, h) = (pw - ml - mr, ph - mt - mb);
        let in_panel: Vec<&OrderEffectReport> = file.reports.iter().filter(|r| r.k == k).collect();
        let ymax = in_panel
            .iter()
            .flat_map(|r| r.per_position_mean.iter().zip(&r.per_position_std).map(|(m, sd)| m + sd))
            .fold(0.0f64, f64::max)
            .max(1e-9)
            * 1.1;
        let xs = |p: usize| {
            if k == 1 {
                px + w / 2.0
            } else {
                px + w * p as f64 / (k - 1) as f64
            }
        };
        let ys = |v: f64| py + h - h * (v / ymax).clamp(0.0, 1.0);

        let _ = writeln!(s, r#"<g class="panel" data-k="{k}">"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="13">k = {k}</text>"#,
            px + w / 2.0,
            mt - 10.0
        );
        let _ = writeln!(
            s,
            r##"<line x1="{px}" y1="{}" x2="{}" y2="{}" stroke="#000"/>"##,
            py + h,
            px + w,
            py + h
        );
        let _ = writeln!(s, r##"<line x1="{px}" y1="{py}" x2="{px}" y2="{}" stroke="#000"/>"##, py + h);
        for p in 0..k {
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
                xs(p),
                py + h + 15.0,
                p + 1
            );
        }
        for frac in [0.0, 0.5, 1.0] {
            let v = ymax * frac;
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="end">{v:.3}</text>"#,
                px - 4.0,
                ys(v) + 4.0
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">knowledge position</text>"#,
            px + w / 2.0,
            py + h + 32.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle" transform="rotate(-90 {} {})">mean attribution</text>"#,
            x0 + 12.0,
            py + h / 2.0,
            x0 + 12.0,
            py + h / 2.0
        );
        for r in in_panel {
            let label = format!("{} / {}", r.scheme, r.loss_mode);
            let color = COLORS[labels.iter().position(|l| *l == label).unwrap_or(0) % COLORS.len()];
            let upper: Vec<String> = (0..k)
                .map(|p| format!("{:.2},{:.2}", xs(p), ys(r.per_position_mean[p] + r.per_position_std[p])))
                .collect();
            let lower: Vec<String> = (0..k)
                .rev()
                .map(|p| format!("{:.2},{:.2}", xs(p), ys(r.per_position_mean[p] - r.per_position_std[p])))
                .collect();
            let _ = writeln!(
                s,
                r#"<polygon class="band" points="{} {}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
                upper.join(" "),
                lower.join(" ")
            );
            let line: Vec<String> = (0..k)
                .map(|p| format!("{:.2},{:.2}", xs(p), ys(r.per_position_mean[p])))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"><title>{}</title></polyline>"#,
                line.join(" "),
                xml_escape(&label)
            );
        }
        let _ = writeln!(s, "</g>");
    }
    for (i, l) in labels.iter().enumerate() {
        let x = 10.0 + 180.0 * i as f64;
        let y = height - 10.0;
        let _ = writeln!(
            s,
            r#"<rect x="{x}" y="{}" width="12" height="4" fill="{}"/><text x="{}" y="{y}">{}</text>"#,
            y - 5.0,
            COLORS[i % COLORS.len()],
            x + 16.0,
            xml_escape(l)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub k: usize,
    pub gap_a: f64,
    pub gap_b: f64,
    pub gap_delta: f64,
    pub ppl_a: Option<f64>,
    pub ppl_b: Option<f64>,
    pub ppl_delta: Option<f64>,
    pub self_bleu_a: Option<f64>,
    pub self_bleu_b: Option<f64>,
    pub self_bleu_delta: Option<f64>,
    pub accuracy_a: f64,
    pub accuracy_b: f64,
    pub gap_reduced: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub label_a: String,
    pub label_b: String,
    pub rows: Vec<ComparisonRow>,
}

fn label(file: &ReportFile) -> String {
    file.reports
        .first()
        .map(|r| format!("{}/{}", r.scheme, r.loss_mode))
        .unwrap_or_default()
}

fn delta(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some(b? - a?)
}

/// Stratum-by-stratum differences `b − a`.
pub fn compare(a: &ReportFile, b: &ReportFile) -> Result<Comparison, HarnessError> {
    let (ka, kb) = (a.strata(), b.strata());
    if ka != kb || ka.is_empty() {
        return Err(HarnessError::StrataMismatch { a: ka, b: kb });
    }
    let rows = ka
        .iter()
        .map(|&k| {
            let ra = a.reports.iter().find(|r| r.k == k).expect("stratum present");
            let rb = b.reports.iter().find(|r| r.k == k).expect("stratum present");
            ComparisonRow {
                k,
                gap_a: ra.max_min_gap,
                gap_b: rb.max_min_gap,
                gap_delta: rb.max_min_gap - ra.max_min_gap,
                ppl_a: ra.ppl_mean,
                ppl_b: rb.ppl_mean,
                ppl_delta: delta(ra.ppl_mean, rb.ppl_mean),
                self_bleu_a: ra.self_bleu_mean,
                self_bleu_b: rb.self_bleu_mean,
                self_bleu_delta: delta(ra.self_bleu_mean, rb.self_bleu_mean),
                accuracy_a: ra.grounding_accuracy,
                accuracy_b: rb.grounding_accuracy,
                gap_reduced: rb.max_min_gap < ra.max_min_gap,
            }
        })
        .collect();
    Ok(Comparison {
        label_a: label(a),
        label_b: label(b),
        rows,
    })
}

/// Plain-text table of a comparison.
pub fn format_comparison(c: &Comparison) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"));
    let mut s = format!("a = {}\nb = {}\n", c.label_a, c.label_b);
    let _ = writeln!(
        s,
        "{:>3} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}  gap reduced",
        "k", "gap a", "gap b", "delta", "ppl a", "ppl b", "delta", "bleu a", "bleu b", "delta"
    );
    for r in &c.rows {
        let _ = writeln!(
            s,
            "{:>3} {:>8.3} {:>8.3} {:>8.3} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}  {}",
            r.k,
            r.gap_a,
            r.gap_b,
            r.gap_delta,
            opt(r.ppl_a),
            opt(r.ppl_b),
            opt(r.ppl_delta),
            opt(r.self_bleu_a),
            opt(r.self_bleu_b),
            opt(r.self_bleu_delta),
            r.gap_reduced
        );
    }
    s
}
