//! CSV tables, SVG line charts and a file manifest for analysis outputs.
//!
//! Every table has a fixed column order given by [`Table::HEADER`]. Floats
//! are written as shortest round-trip decimals; undefined values are empty
//! cells. Chart points carry `data-series`, `data-x` and `data-y` attributes
//! holding the exact plotted values.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::bootstrap::BootstrapCi;
use crate::commitment::{CommitmentReport, ProfileRow, SweepRow};
use crate::factor::{MultiSeedRoles, RoleReport};
use crate::online::{OnlineSummary, StopRecord};
use crate::readout::{ScalingRow, TransferRow};
use crate::summary::{BareComparison, ConditionSummary};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("csv {path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("nothing to report: {0}")]
    Empty(&'static str),
}

/// A row type with a stable column contract.
pub trait Table {
    const HEADER: &'static [&'static str];
    fn cells(&self) -> Vec<String>;
}

pub fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

fn opt_f(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

fn opt_u(x: Option<usize>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn ci_cells(ci: &Option<BootstrapCi>) -> [String; 3] {
    match ci {
        Some(c) => [fmt_f64(c.estimate), fmt_f64(c.lower), fmt_f64(c.upper)],
        None => Default::default(),
    }
}

impl Table for ConditionSummary {
    const HEADER: &'static [&'static str] = &[
        "condition",
        "gamma",
        "n",
        "n_parsed",
        "parse_rate",
        "accuracy",
        "winner_matches_final_rate",
        "commit_rate",
        "onset_mean",
        "onset_lower",
        "onset_upper",
        "lead_mean",
        "lead_lower",
        "lead_upper",
        "n_committed",
        "mean_sign_flips",
        "mean_final_margin",
        "boot_replicates",
        "boot_alpha",
        "boot_seed",
    ];
    fn cells(&self) -> Vec<String> {
        let [om, ol, ou] = ci_cells(&self.onset);
        let [lm, ll, lu] = ci_cells(&self.lead);
        let boot = self.onset.as_ref().or(self.lead.as_ref());
        let n_committed = self
            .commit_rate
            .map(|r| (r * self.n_parsed as f64).round() as usize)
            .unwrap_or(0);
        vec![
            self.condition.clone(),
            fmt_f64(self.gamma),
            self.n.to_string(),
            self.n_parsed.to_string(),
            fmt_f64(self.parse_rate),
            opt_f(self.accuracy),
            opt_f(self.winner_matches_final_rate),
            opt_f(self.commit_rate),
            om,
            ol,
            ou,
            lm,
            ll,
            lu,
            n_committed.to_string(),
            opt_f(self.mean_sign_flips),
            opt_f(self.mean_final_margin),
            boot.map(|b| b.replicates.to_string()).unwrap_or_default(),
            boot.map(|b| fmt_f64(b.alpha)).unwrap_or_default(),
            boot.map(|b| b.seed.to_string()).unwrap_or_default(),
        ]
    }
}

impl Table for CommitmentReport {
    const HEADER: &'static [&'static str] = &[
        "id",
        "condition",
        "gamma",
        "onset",
        "final_answer",
        "commit_time",
        "lead",
        "sign_flips",
        "final_margin",
        "winner_matches_final",
    ];
    fn cells(&self) -> Vec<String> {
        vec![
            self.id.clone(),
            self.condition.clone(),
            fmt_f64(self.gamma),
            self.onset.to_string(),
            self.final_answer.as_str().into(),
            opt_u(self.commit_time),
            opt_u(self.lead),
            self.sign_flips.to_string(),
            opt_f(self.final_margin),
            self.winner_matches_final.to_string(),
        ]
    }
}

impl Table for SweepRow {
    const HEADER: &'static [&'static str] = &[
        "condition",
        "gamma",
        "n_parsed",
        "commit_rate",
        "mean_lead",
        "mean_commit_time",
    ];
    fn cells(&self) -> Vec<String> {
        vec![
            self.condition.clone(),
            fmt_f64(self.gamma),
            self.n_parsed.to_string(),
            opt_f(self.commit_rate),
            opt_f(self.mean_lead),
            opt_f(self.mean_commit_time),
        ]
    }
}

impl Table for ProfileRow {
    const HEADER: &'static [&'static str] = &[
        "condition",
        "progress",
        "n",
        "median",
        "q25",
        "q75",
        "winner_match",
        "mean_margin",
    ];
    fn cells(&self) -> Vec<String> {
        vec![
            self.condition.clone(),
            fmt_f64(self.progress),
            self.n.to_string(),
            fmt_f64(self.median),
            fmt_f64(self.q25),
            fmt_f64(self.q75),
            fmt_f64(self.winner_match),
            fmt_f64(self.mean_margin),
        ]
    }
}

impl Table for OnlineSummary {
    const HEADER: &'static [&'static str] = &[
        "condition",
        "rule_gamma",
        "rule_min_progress",
        "rule_window",
        "n",
        "stop_rate",
        "stop_accuracy",
        "overall_accuracy",
        "mean_online_lead",
        "median_online_lead",
        "mean_retro_lead",
        "mean_sign_flips",
    ];
    fn cells(&self) -> Vec<String> {
        vec![
            self.condition.clone(),
            fmt_f64(self.rule.gamma),
            fmt_f64(self.rule.min_progress),
            self.rule.window.to_string(),
            self.n.to_string(),
            fmt_f64(self.stop_rate),
            opt_f(self.stop_accuracy),
            fmt_f64(self.overall_accuracy),
            opt_f(self.mean_online_lead),
            opt_f(self.median_online_lead),
            opt_f(self.mean_retro_lead),
            opt_f(self.mean_sign_flips),
        ]
    }
}

impl Table for StopRecord {
    const HEADER: &'static [&'static str] = &[
        "id",
        "condition",
        "stop",
        "predicted",
        "final_answer",
        "correct",
        "online_lead",
    ];
    fn cells(&self) -> Vec<String> {
        vec![
            self.id.clone(),
            self.condition.clone(),
            opt_u(self.stop),
            self.predicted.map(|v| v.as_str().to_string()).unwrap_or_default(),
            self.final_answer.map(|v| v.as_str().to_string()).unwrap_or_default(),
            self.correct.map(|c| c.to_string()).unwrap_or_default(),
            opt_u(self.online_lead),
        ]
    }
}

impl Table for TransferRow {
    const HEADER: &'static [&'static str] = &[
        "mode",
        "train",
        "test",
        "lambda",
        "n_splits",
        "corr_mean",
        "corr_std",
        "acc_mean",
        "tau_mae_mean",
    ];
    fn cells(&self) -> Vec<String> {
        vec![
            self.mode.as_str().into(),
            self.train.clone(),
            self.test.clone(),
            fmt_f64(self.lambda),
            self.n_splits.to_string(),
            opt_f(self.corr_mean),
            opt_f(self.corr_std),
            opt_f(self.acc_mean),
            opt_f(self.tau_mae_mean),
        ]
    }
}

impl Table for ScalingRow {
    const HEADER: &'static [&'static str] = &["condition", "train_groups", "n_seeds", "corr_mean"];
    fn cells(&self) -> Vec<String> {
        vec![
            self.condition.clone(),
            self.train_groups.to_string(),
            self.n_seeds.to_string(),
            opt_f(self.corr_mean),
        ]
    }
}

impl Table for RoleReport {
    const HEADER: &'static [&'static str] = &[
        "control",
        "encoder_seed",
        "n_probe_seeds",
        "perf_u_delta",
        "perf_v_delta",
        "perf_u_cursor",
        "perf_v_cursor",
        "commitment_gap",
        "cursor_gap",
        "leak_delta_from_v",
        "leak_cursor_from_u",
    ];
    fn cells(&self) -> Vec<String> {
        vec![
            self.control.as_str().into(),
            self.encoder_seed.to_string(),
            self.probe_seeds.len().to_string(),
            fmt_f64(self.perf_u_delta),
            fmt_f64(self.perf_v_delta),
            fmt_f64(self.perf_u_cursor),
            fmt_f64(self.perf_v_cursor),
            fmt_f64(self.commitment_gap),
            fmt_f64(self.cursor_gap),
            fmt_f64(self.leak_delta_from_v),
            fmt_f64(self.leak_cursor_from_u),
        ]
    }
}

impl Table for MultiSeedRoles {
    const HEADER: &'static [&'static str] = &[
        "control",
        "n_seeds",
        "commitment_gap",
        "commitment_gap_lower",
        "commitment_gap_upper",
        "cursor_gap",
        "cursor_gap_lower",
        "cursor_gap_upper",
        "boot_replicates",
        "boot_alpha",
        "boot_seed",
    ];
    fn cells(&self) -> Vec<String> {
        let (c, k) = (&self.commitment_gap, &self.cursor_gap);
        vec![
            self.control.as_str().into(),
            self.seeds.len().to_string(),
            fmt_f64(c.estimate),
            fmt_f64(c.lower),
            fmt_f64(c.upper),
            fmt_f64(k.estimate),
            fmt_f64(k.lower),
            fmt_f64(k.upper),
            c.replicates.to_string(),
            fmt_f64(c.alpha),
            c.seed.to_string(),
        ]
    }
}

impl Table for BareComparison {
    const HEADER: &'static [&'static str] = &[
        "condition",
        "n_traces",
        "n_states",
        "mean_correlation",
        "winner_agreement",
        "bare_final_match",
        "contextual_final_match",
    ];
    fn cells(&self) -> Vec<String> {
        vec![
            self.condition.clone(),
            self.n_traces.to_string(),
            self.n_states.to_string(),
            opt_f(self.mean_correlation),
            opt_f(self.winner_agreement),
            opt_f(self.bare_final_match),
            opt_f(self.contextual_final_match),
        ]
    }
}

/// CSV text with header, even when `rows` is empty.
pub fn csv_string<T: Table>(rows: &[T]) -> Result<String, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(T::HEADER)?;
    for r in rows {
        w.write_record(r.cells())?;
    }
    let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv of utf-8 cells"))
}

/// One plotted line.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn span(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

/// Static line chart; one polyline plus marked points per series.
pub fn line_chart_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h, ml, mr, mt, mb) = (640.0, 400.0, 60.0, 140.0, 36.0, 48.0);
    let all = || series.iter().flat_map(|s| s.points.iter().copied());
    let (x0, x1) = span(all().map(|p| p.0));
    let (y0, y1) = span(all().map(|p| p.1));
    let px = |x: f64| ml + (x - x0) / (x1 - x0) * (w - ml - mr);
    let py = |y: f64| h - mb - (y - y0) / (y1 - y0) * (h - mt - mb);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-family="sans-serif" font-size="15">{}</text>"#,
        w / 2.0,
        xml_escape(title)
    );
    let _ = writeln!(
        s,
        r#"<line x1="{ml}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{ml}" y1="{mt}" x2="{ml}" y2="{}" stroke="black"/>"#,
        h - mb,
        w - mr,
        h - mb,
        h - mb
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">{}</text>"#,
        (ml + w - mr) / 2.0,
        h - 12.0,
        xml_escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 16 {})">{}</text>"#,
        (mt + h - mb) / 2.0,
        (mt + h - mb) / 2.0,
        xml_escape(y_label)
    );
    for (v, anchor_y) in [(y0, h - mb), (y1, mt)] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{anchor_y}" text-anchor="end" font-family="sans-serif" font-size="10">{}</text>"#,
            ml - 4.0,
            fmt_tick(v)
        );
    }
    for (v, anchor_x) in [(x0, ml), (x1, w - mr)] {
        let _ = writeln!(
            s,
            r#"<text x="{anchor_x}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="10">{}</text>"#,
            h - mb + 14.0,
            fmt_tick(v)
        );
    }
    if y0 < 0.0 && y1 > 0.0 {
        let _ = writeln!(
            s,
            r##"<line x1="{ml}" y1="{0:.2}" x2="{1}" y2="{0:.2}" stroke="#999" stroke-dasharray="4 3"/>"##,
            py(0.0),
            w - mr
        );
    }
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let name = xml_escape(&ser.name);
        let pts: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(s, r#"<g data-series="{name}">"#);
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        for &(x, y) in &ser.points {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}" data-series="{name}" data-x="{}" data-y="{}"/>"#,
                px(x),
                py(y),
                fmt_f64(x),
                fmt_f64(y)
            );
        }
        let _ = writeln!(s, "</g>");
        let ly = mt + 16.0 * i as f64 + 8.0;
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="10" height="10" fill="{color}"/><text x="{}" y="{}" font-family="sans-serif" font-size="11">{name}</text>"#,
            w - mr + 10.0,
            ly - 8.0,
            w - mr + 24.0,
            ly + 1.0
        );
    }
    s.push_str("</svg>\n");
    s
}

fn fmt_tick(v: f64) -> String {
    let r = (v * 100.0).round() / 100.0;
    fmt_f64(if r == 0.0 { 0.0 } else { r })
}

/// Recovers `(series, x, y)` from the point markers of a chart.
pub fn chart_points(svg: &str) -> Vec<(String, f64, f64)> {
    let re = regex::Regex::new(r#"<circle [^>]*data-series="([^"]*)" data-x="([^"]*)" data-y="([^"]*)""#)
        .expect("static pattern");
    re.captures_iter(svg)
        .filter_map(|c| {
            let name = c[1].replace("&quot;", "\"").replace("&gt;", ">").replace("&lt;", "<").replace("&amp;", "&");
            Some((name, c[2].parse().ok()?, c[3].parse().ok()?))
        })
        .collect()
}

/// Signed-δ median per normalized-time bin, one series per condition.
pub fn signed_delta_series(profile: &[ProfileRow]) -> Vec<Series> {
    let mut by: std::collections::BTreeMap<&str, Vec<(f64, f64)>> = Default::default();
    for r in profile {
        by.entry(&r.condition).or_default().push((r.progress, r.median));
    }
    by.into_iter()
        .map(|(name, points)| Series {
            name: name.to_string(),
            points,
        })
        .collect()
}

/// Empirical CDF of lead over committed traces, one series per condition.
pub fn lead_cdf_series(reports: &[CommitmentReport]) -> Vec<Series> {
    let mut by: std::collections::BTreeMap<&str, Vec<f64>> = Default::default();
    for r in reports {
        if let Some(l) = r.lead {
            by.entry(&r.condition).or_default().push(l as f64);
        }
    }
    by.into_iter()
        .map(|(name, mut leads)| {
            leads.sort_by(f64::total_cmp);
            let n = leads.len() as f64;
            Series {
                name: name.to_string(),
                points: leads.iter().enumerate().map(|(i, &l)| (l, (i + 1) as f64 / n)).collect(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub kind: String,
    /// Data rows for tables, plotted points for charts.
    pub rows: usize,
    pub columns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub files: Vec<ManifestEntry>,
    pub meta: Value,
}

/// Accumulates files in one output directory and records them.
pub struct ReportWriter {
    dir: PathBuf,
    files: Vec<ManifestEntry>,
}

impl ReportWriter {
    pub fn new(dir: &Path) -> Result<Self, ReportError> {
        fs::create_dir_all(dir).map_err(|source| ReportError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn write(&self, name: &str, text: &str) -> Result<PathBuf, ReportError> {
        let path = self.dir.join(name);
        fs::write(&path, text).map_err(|source| ReportError::Io {
            path: path.clone(),
            source,
        })?;
        Ok(path)
    }

    pub fn table<T: Table>(&mut self, name: &str, rows: &[T]) -> Result<PathBuf, ReportError> {
        let text = csv_string(rows).map_err(|source| ReportError::Csv {
            path: self.dir.join(name),
            source,
        })?;
        let path = self.write(name, &text)?;
        self.files.push(ManifestEntry {
            file: name.into(),
            kind: "csv".into(),
            rows: rows.len(),
            columns: T::HEADER.iter().map(|c| c.to_string()).collect(),
        });
        Ok(path)
    }

    pub fn chart(&mut self, name: &str, title: &str, x: &str, y: &str, series: &[Series]) -> Result<PathBuf, ReportError> {
        let path = self.write(name, &line_chart_svg(title, x, y, series))?;
        self.files.push(ManifestEntry {
            file: name.into(),
            kind: "svg".into(),
            rows: series.iter().map(|s| s.points.len()).sum(),
            columns: vec!["series".into(), x.into(), y.into()],
        });
        Ok(path)
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf, ReportError> {
        let text = serde_json::to_string_pretty(value).expect("serializable report") + "\n";
        let path = self.write(name, &text)?;
        self.files.push(ManifestEntry {
            file: name.into(),
            kind: "json".into(),
            rows: 1,
            columns: Vec::new(),
        });
        Ok(path)
    }

    /// Writes `manifest.json` and returns the manifest.
    pub fn finish(self, meta: Value) -> Result<Manifest, ReportError> {
        let manifest = Manifest { files: self.files, meta };
        let text = serde_json::to_string_pretty(&manifest).expect("serializable manifest") + "\n";
        let path = self.dir.join("manifest.json");
        fs::write(&path, text).map_err(|source| ReportError::Io { path, source })?;
        Ok(manifest)
    }
}

/// Commitment analysis outputs: summary, per-trace commitment, sweep and
/// profile tables plus signed-δ and lead charts.
pub struct AnalysisReport<'a> {
    pub summaries: &'a [ConditionSummary],
    pub commitments: &'a [CommitmentReport],
    pub sweeps: &'a [SweepRow],
    pub profile: &'a [ProfileRow],
    pub bare: &'a [BareComparison],
}

pub fn emit_report(report: &AnalysisReport<'_>, dir: &Path, meta: Value) -> Result<Manifest, ReportError> {
    if report.summaries.is_empty() {
        return Err(ReportError::Empty("condition summaries"));
    }
    if report.sweeps.is_empty() {
        return Err(ReportError::Empty("threshold sweep"));
    }
    let mut w = ReportWriter::new(dir)?;
    w.table("summary.csv", report.summaries)?;
    w.table("commitment.csv", report.commitments)?;
    w.table("sweep.csv", report.sweeps)?;
    w.table("profile.csv", report.profile)?;
    if !report.bare.is_empty() {
        w.table("bare_contextual.csv", report.bare)?;
    }
    w.chart(
        "signed_delta.svg",
        "Median signed δ toward the final answer",
        "t / onset",
        "signed δ",
        &signed_delta_series(report.profile),
    )?;
    w.chart(
        "lead_cdf.svg",
        "Lead distribution over committed traces",
        "lead (tokens)",
        "cumulative fraction",
        &lead_cdf_series(report.commitments),
    )?;
    w.finish(meta)
}
