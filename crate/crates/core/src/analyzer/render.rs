use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{basename, ApiView, ComponentView, ImbalanceReport};

pub const SCHEMA: &str = "xflow.report/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Text,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "view", rename_all = "lowercase")]
pub enum Report {
    Component(ComponentView),
    Api(ApiView),
    Imbalance(ImbalanceReport),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub schema: String,
    pub reports: Vec<Report>,
}

impl Document {
    pub fn parse(json: &str) -> serde_json::Result<Self> {
        serde_json::from_str(json)
    }
}

pub fn render(reports: &[Report], format: Format) -> String {
    match format {
        Format::Json => {
            let doc = Document { schema: SCHEMA.to_string(), reports: reports.to_vec() };
            let mut s = serde_json::to_string_pretty(&doc).expect("reports serialize");
            s.push('\n');
            s
        }
        Format::Text => {
            let mut out = String::new();
            for (i, r) in reports.iter().enumerate() {
                if i > 0 {
                    out.push('\n');
                }
                match r {
                    Report::Component(v) => component_text(&mut out, v),
                    Report::Api(v) => api_text(&mut out, v),
                    Report::Imbalance(v) => imbalance_text(&mut out, v),
                }
            }
            out
        }
    }
}

fn diagnostics(out: &mut String, d: &[String]) {
    for line in d {
        let _ = writeln!(out, "  note: {line}");
    }
}

fn component_text(out: &mut String, v: &ComponentView) {
    let _ = writeln!(out, "Component view: {} ({})", basename(&v.component), v.component);
    let _ = writeln!(out, "  total {} cycles, {:.6} s", v.total_cycles, v.total_seconds);
    let w = v.rows.iter().map(|r| basename(&r.label).len()).max().unwrap_or(0).max(32);
    let _ = writeln!(out, "  {:<w$} {:>20} {:>12} {:>7}", "ROW", "CYCLES", "SECONDS", "%");
    for r in &v.rows {
        let _ = writeln!(out, "  {:<w$} {:>20} {:>12.6} {:>7.1}", basename(&r.label), r.cycles, r.seconds, r.percent);
    }
    diagnostics(out, &v.diagnostics);
}

fn api_text(out: &mut String, v: &ApiView) {
    let _ = writeln!(out, "API view: {} ({})", basename(&v.library), v.library);
    let _ = writeln!(out, "  total {} cycles, {:.6} s", v.total_cycles, v.total_seconds);
    let w = v.rows.iter().map(|r| r.symbol.len()).max().unwrap_or(0).max(40);
    let _ = writeln!(out, "  {:<w$} {:>12} {:>20} {:>12} {:>7}", "API", "CALLS", "CYCLES", "SECONDS", "%");
    for r in &v.rows {
        let _ = writeln!(
            out,
            "  {:<w$} {:>12} {:>20} {:>12.6} {:>7.1}",
            r.symbol, r.count, r.cycles, r.seconds, r.percent
        );
    }
    diagnostics(out, &v.diagnostics);
}

fn imbalance_text(out: &mut String, v: &ImbalanceReport) {
    let _ = writeln!(out, "Thread groups");
    let _ = writeln!(out, "  {:<20} {:>8} {:>20} {:>20} {:>12}", "GROUP", "THREADS", "MEAN EXEC CYCLES", "MEAN WAIT CYCLES", "EXEC SECONDS");
    for g in &v.groups {
        let _ = writeln!(
            out,
            "  {:<20} {:>8} {:>20} {:>20} {:>12.6}",
            g.group, g.threads, g.mean_exec_cycles, g.mean_wait_cycles, g.mean_exec_seconds
        );
    }
    let verdict = if v.flagged { "IMBALANCED" } else { "balanced" };
    let _ = writeln!(out, "  exec ratio max/min {:.2} (threshold {:.2}): {verdict}", v.ratio, v.threshold);
    diagnostics(out, &v.diagnostics);
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::super::*;
    use super::*;

    fn reports() -> Vec<Report> {
        let cfg = AnalyzerConfig::default();
        let a = input(0, 0, 1000, vec![row(0, 0, "f", 5, 333, Some(1)), row(1, 0, "g", 2, 111, Some(2))]);
        let b = input(1, 0x40, 400, vec![row(0, 0, "f", 1, 7, Some(1))]);
        let agg = merge(&[a, b], &cfg, &NoOwners);
        vec![
            Report::Component(component_view(&agg, &cfg, "app").unwrap()),
            Report::Api(api_view(&agg, "libA.so").unwrap()),
            Report::Imbalance(imbalance_report(&agg, 4.0)),
        ]
    }

    #[test]
    fn json_round_trip() {
        let r = reports();
        let text = render(&r, Format::Json);
        let doc = Document::parse(&text).unwrap();
        assert_eq!(doc.schema, SCHEMA);
        assert_eq!(doc.reports, r);
    }

    #[test]
    fn deterministic_text() {
        let a = render(&reports(), Format::Text);
        let b = render(&reports(), Format::Text);
        assert_eq!(a, b);
        assert!(a.contains("Component view: app"));
        assert!(a.contains("Self"));
        assert!(a.contains("API view: libA.so"));
    }

    #[test]
    fn text_percent_column_sums() {
        let r = reports();
        let Report::Component(v) = &r[0] else { unreachable!() };
        let total: f64 = v.rows.iter().map(|r| r.percent).sum();
        assert!((total - 100.0).abs() <= 0.1);
    }
}
