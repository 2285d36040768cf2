//! Markdown tables and SVG bar charts over evaluated runs.

use std::fmt::Write as _;
use std::fs;

use fisa_core::metrics::RunResult;

use crate::{create_dir, CliError, ReportArgs};

/// Mean metrics of one variant across its seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub variant: String,
    pub runs: usize,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub miou: f64,
    pub pq_per_run: Vec<f64>,
}

impl SummaryRow {
    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "pq" => Some(self.pq),
            "sq" => Some(self.sq),
            "rq" => Some(self.rq),
            "miou" => Some(self.miou),
            _ => None,
        }
    }
}

/// Groups runs named `variant/seedN` by variant, keeping first-seen order.
pub fn summarize(runs: &[RunResult]) -> Vec<SummaryRow> {
    let mut order: Vec<String> = Vec::new();
    for r in runs {
        let v = variant_of(&r.run);
        if !order.iter().any(|o| o == v) {
            order.push(v.to_string());
        }
    }
    order
        .into_iter()
        .map(|variant| {
            let members: Vec<_> = runs.iter().filter(|r| variant_of(&r.run) == variant).collect();
            let n = members.len() as f64;
            let mean = |f: &dyn Fn(&RunResult) -> f64| members.iter().map(|r| f(r)).sum::<f64>() / n;
            SummaryRow {
                runs: members.len(),
                pq: mean(&|r| r.report.pq),
                sq: mean(&|r| r.report.sq),
                rq: mean(&|r| r.report.rq),
                miou: mean(&|r| r.report.miou),
                pq_per_run: members.iter().map(|r| r.report.pq).collect(),
                variant,
            }
        })
        .collect()
}

fn variant_of(run: &str) -> &str {
    run.split('/').next().unwrap_or(run)
}

pub fn markdown_table(title: &str, rows: &[SummaryRow]) -> String {
    let mut s = format!("### {title}\n\n| variant | runs | PQ | SQ | RQ | mIoU | PQ per run |\n|---|---:|---:|---:|---:|---:|---|\n");
    for r in rows {
        let per: Vec<String> = r.pq_per_run.iter().map(|v| format!("{:.1}", 100.0 * v)).collect();
        let _ = writeln!(
            s,
            "| {} | {} | {:.1} | {:.1} | {:.1} | {:.1} | {} |",
            r.variant,
            r.runs,
            100.0 * r.pq,
            100.0 * r.sq,
            100.0 * r.rq,
            100.0 * r.miou,
            per.join(", ")
        );
    }
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// A self-contained bar chart of `metric` (0..1, drawn as 0..100) per row.
pub fn svg_bar_chart(title: &str, rows: &[SummaryRow], metric: &str) -> Result<String, CliError> {
    let (bar, gap, left, top, height) = (56.0, 24.0, 48.0, 40.0, 200.0);
    let width = left + rows.len() as f64 * (bar + gap) + gap;
    let total_h = top + height + 56.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{total_h:.0}" viewBox="0 0 {width:.0} {total_h:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"  <text x="{left}" y="20" font-size="13">{} ({})</text>"#, escape(title), metric.to_uppercase());
    let axis_y = top + height;
    let _ = writeln!(s, r##"  <line x1="{left}" y1="{top}" x2="{left}" y2="{axis_y}" stroke="#333"/>"##);
    let _ = writeln!(s, r##"  <line x1="{left}" y1="{axis_y}" x2="{width:.0}" y2="{axis_y}" stroke="#333"/>"##);
    for tick in [0, 25, 50, 75, 100] {
        let y = axis_y - height * tick as f64 / 100.0;
        let _ = writeln!(s, r#"  <text x="{}" y="{:.1}" text-anchor="end">{tick}</text>"#, left - 6.0, y + 4.0);
    }
    for (i, r) in rows.iter().enumerate() {
        let v = r
            .metric(metric)
            .ok_or_else(|| CliError::usage(format!("unknown metric `{metric}`; use pq, sq, rq or miou")))?;
        let h = height * v.clamp(0.0, 1.0);
        let x = left + gap + i as f64 * (bar + gap);
        let _ = writeln!(
            s,
            r##"  <rect x="{x:.1}" y="{:.1}" width="{bar}" height="{h:.1}" fill="#4a78b5"/>"##,
            axis_y - h
        );
        let cx = x + bar / 2.0;
        let _ = writeln!(s, r#"  <text x="{cx:.1}" y="{:.1}" text-anchor="middle">{:.1}</text>"#, axis_y - h - 4.0, 100.0 * v);
        let _ = writeln!(
            s,
            r#"  <text x="{cx:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            axis_y + 16.0,
            escape(&r.variant)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn cmd_report(a: &ReportArgs) -> Result<(), CliError> {
    let mut runs: Vec<RunResult> = Vec::new();
    for path in &a.results {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read results {}: {e}", path.display())))?;
        let mut parsed: Vec<RunResult> = serde_json::from_str(&text)
            .map_err(|e| CliError::usage(format!("invalid results file {}: {e}", path.display())))?;
        runs.append(&mut parsed);
    }
    let rows = summarize(&runs);
    let table = markdown_table("Results", &rows);
    let chart = svg_bar_chart("Results", &rows, &a.metric)?;
    print!("{table}");
    if let Some(out) = &a.out {
        create_dir(out)?;
        let w = |name: &str, text: &str| {
            let p = out.join(name);
            fs::write(&p, text).map_err(|e| CliError::runtime(anyhow::anyhow!("writing {}: {e}", p.display())))
        };
        w("table.md", &table)?;
        w("chart.svg", &chart)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(name: &str, pq: f64) -> SummaryRow {
        SummaryRow { variant: name.into(), runs: 1, pq, sq: pq, rq: 1.0, miou: pq, pq_per_run: vec![pq] }
    }

    #[test]
    fn table_has_one_line_per_row() {
        let t = markdown_table("t", &[row("a", 0.5), row("b<c", 0.25)]);
        assert_eq!(t.lines().filter(|l| l.starts_with("| ") && !l.starts_with("| variant")).count(), 2);
        assert!(t.contains("| a | 1 | 50.0 |"));
    }

    #[test]
    fn chart_escapes_labels_and_rejects_unknown_metrics() {
        let svg = svg_bar_chart("x & y", &[row("b<c", 0.25)], "pq").unwrap();
        assert!(svg.contains("b&lt;c") && svg.contains("x &amp; y"));
        assert!(svg_bar_chart("t", &[row("a", 0.1)], "nope").is_err());
    }
}
