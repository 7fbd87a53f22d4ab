//! Markdown and CSV result tables, and SVG bar charts.
//!
//! All output is a pure function of the input, with fixed number formatting,
//! so reruns are byte-identical.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{AggregateReport, MetricKind};

pub const CSV_HEADER: &str = "model,config,metric,mean,ci95,max,n_runs";

/// One metric of one table row, in percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportMetric {
    pub mean: f64,
    pub ci95: f64,
    /// Best single run, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportRow {
    pub model: String,
    /// Input or configuration column, e.g. `Clinical data` or `RN-IN`.
    pub config: String,
    pub n_runs: usize,
    pub metrics: BTreeMap<MetricKind, ReportMetric>,
}

impl ReportRow {
    pub fn from_aggregate(model: impl Into<String>, config: impl Into<String>, agg: &AggregateReport) -> Self {
        Self {
            model: model.into(),
            config: config.into(),
            n_runs: agg.n_runs,
            metrics: MetricKind::ALL
                .into_iter()
                .map(|k| {
                    let s = agg.get(k);
                    (
                        k,
                        ReportMetric {
                            mean: s.mean,
                            ci95: s.ci95,
                            max: Some(s.max),
                        },
                    )
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultsTable {
    pub title: String,
    #[serde(default)]
    pub caption: String,
    /// Header of the second column.
    #[serde(default = "default_config_header")]
    pub config_header: String,
    pub metrics: Vec<MetricKind>,
    /// Print the best single run in parentheses after each cell.
    #[serde(default)]
    pub show_max: bool,
    pub rows: Vec<ReportRow>,
}

fn default_config_header() -> String {
    "Input".into()
}

impl ResultsTable {
    pub fn validate(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::Report("no results to report".into()));
        }
        if self.metrics.is_empty() {
            return Err(Error::Report("no metrics selected".into()));
        }
        for r in &self.rows {
            for k in &self.metrics {
                let m = r
                    .metrics
                    .get(k)
                    .ok_or_else(|| Error::Report(format!("row {}/{} lacks {}", r.model, r.config, k.label())))?;
                if !(m.mean.is_finite() && m.ci95.is_finite() && m.ci95 >= 0.0) {
                    return Err(Error::Report(format!("row {}/{}: invalid {}", r.model, r.config, k.label())));
                }
                if self.show_max && m.max.is_none() {
                    return Err(Error::Report(format!("row {}/{} lacks a max for {}", r.model, r.config, k.label())));
                }
            }
        }
        Ok(())
    }
}

fn one_decimal(v: f64) -> String {
    // avoid printing "-0.0"
    let s = format!("{v:.1}");
    if s == "-0.0" {
        "0.0".into()
    } else {
        s
    }
}

/// Markdown table; the best mean of each column is bold (all ties bold).
pub fn render_markdown(table: &ResultsTable) -> Result<String> {
    table.validate()?;
    let mut out = String::new();
    writeln!(out, "## {}", table.title).unwrap();
    writeln!(out).unwrap();
    if !table.caption.is_empty() {
        writeln!(out, "{}", table.caption).unwrap();
        writeln!(out).unwrap();
    }
    let mut header = vec!["Model".to_string(), table.config_header.clone()];
    header.extend(table.metrics.iter().map(|k| k.label().to_string()));
    writeln!(out, "| {} |", header.join(" | ")).unwrap();
    writeln!(out, "|{}", "---|".repeat(header.len())).unwrap();
    let best: Vec<String> = table
        .metrics
        .iter()
        .map(|k| {
            table
                .rows
                .iter()
                .map(|r| one_decimal(r.metrics[k].mean))
                .max_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse::<f64>().unwrap()))
                .expect("rows checked non-empty")
        })
        .collect();
    for r in &table.rows {
        let mut cells = vec![r.model.clone(), r.config.clone()];
        for (k, b) in table.metrics.iter().zip(&best) {
            let m = r.metrics[k];
            let mean = one_decimal(m.mean);
            let mut cell = if &mean == b { format!("**{mean}**") } else { mean };
            write!(cell, " ± {}", one_decimal(m.ci95)).unwrap();
            if table.show_max {
                write!(cell, " ({})", one_decimal(m.max.expect("validated"))).unwrap();
            }
            cells.push(cell);
        }
        writeln!(out, "| {} |", cells.join(" | ")).unwrap();
    }
    writeln!(out).unwrap();
    let n: Vec<usize> = table.rows.iter().map(|r| r.n_runs).collect();
    let runs = if n.iter().all(|&x| x == n[0]) {
        format!("n={}", n[0])
    } else {
        "the stated number of".to_string()
    };
    writeln!(
        out,
        "Mean ± 95% Student-t confidence half-width over {runs} independent runs, in percent."
    )
    .unwrap();
    if table.show_max {
        writeln!(out, "Values in parentheses are the best single run (interpretation of the max column).").unwrap();
    }
    Ok(out)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Long-format CSV: one line per row and metric.
pub fn render_csv(table: &ResultsTable) -> Result<String> {
    table.validate()?;
    let mut out = String::new();
    writeln!(out, "{CSV_HEADER}").unwrap();
    for r in &table.rows {
        for k in &table.metrics {
            let m = r.metrics[k];
            writeln!(
                out,
                "{},{},{},{:.4},{:.4},{},{}",
                csv_field(&r.model),
                csv_field(&r.config),
                k.key(),
                m.mean,
                m.ci95,
                m.max.map(|v| format!("{v:.4}")).unwrap_or_default(),
                r.n_runs
            )
            .unwrap();
        }
    }
    Ok(out)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const PALETTE: [&str; 4] = ["#4878cf", "#d65f5f", "#6acc65", "#b47cc7"];

/// Bars of one series over the groups, with optional symmetric whiskers.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub values: Vec<f64>,
    pub errors: Option<Vec<f64>>,
}

/// Grouped bar chart, values in percent on a 0 to 100 axis.
pub fn render_bar_chart(title: &str, groups: &[String], series: &[Series]) -> Result<String> {
    if groups.is_empty() || series.is_empty() {
        return Err(Error::Report("empty chart".into()));
    }
    for s in series {
        if s.values.len() != groups.len() || s.errors.as_ref().is_some_and(|e| e.len() != groups.len()) {
            return Err(Error::Report(format!("series {} does not match the {} groups", s.name, groups.len())));
        }
        if s.values.iter().chain(s.errors.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::Report(format!("series {} has non-finite values", s.name)));
        }
    }
    let (left, right, top, bottom) = (60.0, 20.0, 50.0, 70.0);
    let group_w = 24.0 * series.len() as f64 + 24.0;
    let plot_w = group_w * groups.len() as f64;
    let plot_h = 260.0;
    let width = left + plot_w + right;
    let height = top + plot_h + bottom;
    let y = |v: f64| top + plot_h * (1.0 - v.clamp(0.0, 100.0) / 100.0);

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(s, r#"<rect x="0" y="0" width="{width:.0}" height="{height:.0}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="13">{}</text>"#,
        width / 2.0,
        xml_escape(title)
    )
    .unwrap();
    for t in (0..=100).step_by(20) {
        let yy = y(t as f64);
        writeln!(
            s,
            r##"<line x1="{left:.1}" y1="{yy:.2}" x2="{:.1}" y2="{yy:.2}" stroke="#dddddd"/>"##,
            left + plot_w
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{:.1}" y="{:.2}" text-anchor="end">{t}%</text>"#,
            left - 6.0,
            yy + 4.0
        )
        .unwrap();
    }
    writeln!(
        s,
        r##"<line x1="{left:.1}" y1="{top:.1}" x2="{left:.1}" y2="{:.1}" stroke="#333333"/>"##,
        top + plot_h
    )
    .unwrap();
    for (gi, g) in groups.iter().enumerate() {
        let gx = left + gi as f64 * group_w + 12.0;
        for (si, ser) in series.iter().enumerate() {
            let v = ser.values[gi];
            let x = gx + si as f64 * 24.0;
            let (y0, y1) = (y(v), y(0.0));
            writeln!(
                s,
                r#"<rect class="bar" x="{x:.2}" y="{y0:.2}" width="20" height="{:.2}" fill="{}"><title>{}: {} {:.1}</title></rect>"#,
                y1 - y0,
                PALETTE[si % PALETTE.len()],
                xml_escape(g),
                xml_escape(&ser.name),
                v
            )
            .unwrap();
            if let Some(e) = ser.errors.as_ref().map(|e| e[gi]) {
                let cx = x + 10.0;
                let (ya, yb) = (y(v + e), y(v - e));
                writeln!(
                    s,
                    r##"<path class="whisker" d="M{cx:.2} {ya:.2}V{yb:.2}M{:.2} {ya:.2}H{:.2}M{:.2} {yb:.2}H{:.2}" stroke="#222222" fill="none"/>"##,
                    cx - 4.0,
                    cx + 4.0,
                    cx - 4.0,
                    cx + 4.0
                )
                .unwrap();
            }
        }
        writeln!(
            s,
            r#"<text x="{:.2}" y="{:.1}" text-anchor="middle">{}</text>"#,
            left + gi as f64 * group_w + group_w / 2.0,
            top + plot_h + 18.0,
            xml_escape(g)
        )
        .unwrap();
    }
    for (si, ser) in series.iter().enumerate() {
        let lx = left + 10.0 + si as f64 * 110.0;
        let ly = height - 22.0;
        writeln!(
            s,
            r#"<rect x="{lx:.1}" y="{:.1}" width="12" height="12" fill="{}"/><text x="{:.1}" y="{ly:.1}">{}</text>"#,
            ly - 10.0,
            PALETTE[si % PALETTE.len()],
            lx + 16.0,
            xml_escape(&ser.name)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// One group per row and one bar series per metric, whiskers at the CI.
pub fn render_results_svg(table: &ResultsTable) -> Result<String> {
    table.validate()?;
    let groups: Vec<String> = table.rows.iter().map(|r| r.config.clone()).collect();
    let series: Vec<Series> = table
        .metrics
        .iter()
        .map(|k| Series {
            name: k.label().to_string(),
            values: table.rows.iter().map(|r| r.metrics[k].mean).collect(),
            errors: Some(table.rows.iter().map(|r| r.metrics[k].ci95).collect()),
        })
        .collect();
    render_bar_chart(&table.title, &groups, &series)
}

/// Feature importance chart: one group per feature, one series per model.
/// Features missing from a model are drawn at 0.
pub fn render_importance_svg(title: &str, models: &[(String, Vec<(String, f64)>)]) -> Result<String> {
    let mut features: Vec<String> = Vec::new();
    for (_, imp) in models {
        for (f, _) in imp {
            if !features.contains(f) {
                features.push(f.clone());
            }
        }
    }
    let series: Vec<Series> = models
        .iter()
        .map(|(name, imp)| Series {
            name: name.clone(),
            values: features
                .iter()
                .map(|f| imp.iter().find(|(g, _)| g == f).map_or(0.0, |x| x.1))
                .collect(),
            errors: None,
        })
        .collect();
    render_bar_chart(title, &features, &series)
}
