//! Markdown, CSV and SVG rendering of result tables and importance charts.

use std::collections::BTreeMap;

use octmh_core::metrics::{aggregate_runs, MetricKind, MetricSet};
use octmh_core::report::{
    render_csv, render_importance_svg, render_markdown, render_results_svg, ReportMetric, ReportRow, ResultsTable,
    CSV_HEADER,
};
use octmh_core::train::VisionPreset;

fn row(model: &str, config: &str, f1: f64, auroc: f64) -> ReportRow {
    let m = |mean: f64| ReportMetric {
        mean,
        ci95: mean / 10.0,
        max: Some((mean + 5.0).min(100.0)),
    };
    ReportRow {
        model: model.into(),
        config: config.into(),
        n_runs: 10,
        metrics: BTreeMap::from([
            (MetricKind::F1, m(f1)),
            (MetricKind::Auroc, m(auroc)),
            (MetricKind::Recall, m(50.0)),
            (MetricKind::Specificity, m(50.0)),
        ]),
    }
}

fn nine_configs() -> ResultsTable {
    ResultsTable {
        title: "Vision configurations".into(),
        caption: String::new(),
        config_header: "Configuration".into(),
        metrics: vec![MetricKind::F1, MetricKind::Auroc],
        show_max: true,
        rows: VisionPreset::ALL
            .iter()
            .enumerate()
            .map(|(i, p)| row("CNN", p.label(), 50.0 + i as f64, 60.0 + 2.0 * i as f64))
            .collect(),
    }
}

#[test]
fn nine_configurations_chart_has_eighteen_bars() {
    let svg = render_results_svg(&nine_configs()).unwrap();
    assert_eq!(svg.matches(r#"class="bar""#).count(), 18);
    assert_eq!(svg.matches(r#"class="whisker""#).count(), 18);
    assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
    for p in VisionPreset::ALL {
        assert!(svg.contains(&format!(">{}</text>", p.label())), "{}", p.label());
    }
    assert_eq!(svg.matches("<text").count(), svg.matches("</text>").count());
}

#[test]
fn rendering_is_deterministic() {
    let t = nine_configs();
    assert_eq!(render_results_svg(&t).unwrap(), render_results_svg(&t).unwrap());
    assert_eq!(render_markdown(&t).unwrap(), render_markdown(&t).unwrap());
    assert_eq!(render_csv(&t).unwrap(), render_csv(&t).unwrap());
}

#[test]
fn importance_fixture_renders_one_bar_per_feature() {
    let clinical: Vec<(String, f64)> = [
        ("Age", 6.1),
        ("MH duration", 7.6),
        ("Elevated edge", 19.4),
        ("Pseudophakic", 14.9),
        ("Baseline VA", 52.0),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let svg = render_importance_svg("Feature importance", &[("Clinical data".to_string(), clinical)]).unwrap();
    assert_eq!(svg.matches(r#"class="bar""#).count(), 5);
    assert_eq!(svg.matches(r#"class="whisker""#).count(), 0);
    for v in ["6.1", "7.6", "19.4", "14.9", "52.0"] {
        assert!(svg.contains(&format!(" {v}</title>")), "{v}");
    }
    // a taller bar for a larger share
    let height = |name: &str| -> f64 {
        let at = svg.find(&format!("<title>{name}:")).unwrap();
        let tag = &svg[svg[..at].rfind("<rect").unwrap()..at];
        let h = tag.split("height=\"").nth(1).unwrap();
        h[..h.find('"').unwrap()].parse().unwrap()
    };
    assert!(height("Baseline VA") > height("Elevated edge"));
    assert!(height("Elevated edge") > height("Age"));
}

#[test]
fn importance_series_fill_missing_features_with_zero() {
    let a = vec![("age".to_string(), 40.0), ("va".to_string(), 60.0)];
    let b = vec![("age".to_string(), 30.0), ("va".to_string(), 50.0), ("cnn".to_string(), 20.0)];
    let svg = render_importance_svg("t", &[("A".into(), a), ("B".into(), b)]).unwrap();
    assert_eq!(svg.matches(r#"class="bar""#).count(), 6);
    assert!(svg.contains("<title>cnn: A 0.0</title>"));
}

#[test]
fn markdown_bolds_column_maxima_and_ties() {
    let t = ResultsTable {
        title: "T".into(),
        caption: "c".into(),
        config_header: "Input".into(),
        metrics: vec![MetricKind::F1, MetricKind::Auroc],
        show_max: false,
        rows: vec![row("A", "x", 70.0, 80.04), row("B", "y", 65.0, 80.0)],
    };
    let md = render_markdown(&t).unwrap();
    assert!(md.contains("| A | x | **70.0** ± 7.0 | **80.0** ± 8.0 |"), "{md}");
    assert!(md.contains("| B | y | 65.0 ± 6.5 | **80.0** ± 8.0 |"), "{md}");
    assert!(md.contains("n=10"));
    assert!(!md.contains("parentheses"));
}

#[test]
fn csv_is_long_format_and_parses() {
    let t = nine_configs();
    let text = render_csv(&t).unwrap();
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    assert_eq!(rdr.headers().unwrap().iter().collect::<Vec<_>>().join(","), CSV_HEADER);
    let recs: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(recs.len(), 18);
    assert_eq!(&recs[0][2], "f1");
    assert_eq!(recs[0][3].parse::<f64>().unwrap(), 50.0);
    assert_eq!(&recs[17][6], "10");
}

#[test]
fn empty_and_incomplete_tables_are_rejected() {
    let mut t = nine_configs();
    t.rows[3].metrics.remove(&MetricKind::Auroc);
    assert!(render_markdown(&t).is_err());
    t.rows.clear();
    assert!(render_markdown(&t).is_err());
    assert!(render_results_svg(&t).is_err());
    assert!(render_importance_svg("t", &[]).is_err());
}

#[test]
fn aggregate_rows_carry_percent_statistics() {
    let runs = [
        MetricSet { f1: 0.5, auroc: 0.7, recall: 0.4, specificity: 0.9 },
        MetricSet { f1: 0.7, auroc: 0.9, recall: 0.6, specificity: 0.7 },
    ];
    let r = ReportRow::from_aggregate("CNN", "OCTs", &aggregate_runs(&runs).unwrap());
    assert_eq!(r.n_runs, 2);
    assert!((r.metrics[&MetricKind::F1].mean - 60.0).abs() < 1e-12);
    assert_eq!(r.metrics[&MetricKind::Auroc].max, Some(90.0));
}
