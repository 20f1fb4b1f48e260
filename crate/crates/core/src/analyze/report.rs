//! CSV tables and self-describing SVG charts.
//!
//! Every SVG carries the CSV it was drawn from in a leading comment. Output is
//! a pure function of the input, so identical inputs give identical bytes.

use super::{AggregateRecord, AnalyzeError, ConfusionMatrix, SeedSummary};
use crate::diagnose::SweepResult;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Svg,
}

/// One labelled threshold sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSeries {
    pub label: String,
    pub sweep: SweepResult,
}

/// Everything a report can show; empty parts are skipped.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub aggregates: Vec<AggregateRecord>,
    pub confusion: Option<ConfusionMatrix>,
    pub sweeps: Vec<SweepSeries>,
    pub seeds: Vec<SeedSummary>,
}

impl Report {
    pub fn is_empty(&self) -> bool {
        self.aggregates.is_empty() && self.confusion.is_none() && self.sweeps.is_empty() && self.seeds.is_empty()
    }
}

fn csv_string(f: impl FnOnce(&mut Vec<u8>) -> Result<(), AnalyzeError>) -> Result<String, AnalyzeError> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

pub fn write_aggregate_csv(records: &[AggregateRecord], w: impl Write) -> Result<(), AnalyzeError> {
    let mut wr = csv::Writer::from_writer(w);
    if records.is_empty() {
        wr.write_record([
            "diagnostic",
            "setup",
            "tau",
            "mean_bits",
            "std",
            "n",
            "rel_change_pct",
            "t_vs_none",
            "p_vs_none",
        ])?;
    }
    for r in records {
        wr.serialize(r)?;
    }
    wr.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Every cell, gold category major.
pub fn write_confusion_csv(m: &ConfusionMatrix, w: impl Write) -> Result<(), AnalyzeError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["gold_category", "pred_category", "proportion"])?;
    for (g, gold) in m.categories.iter().enumerate() {
        for (p, pred) in m.categories.iter().enumerate() {
            wr.write_record([gold.as_str(), pred.as_str(), &m.proportion(g, p).to_string()])?;
        }
    }
    wr.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_column_sums_csv(m: &ConfusionMatrix, w: impl Write) -> Result<(), AnalyzeError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["pred_category", "proportion"])?;
    for (cat, s) in m.categories.iter().zip(m.column_sums()) {
        wr.write_record([cat.as_str(), &s.to_string()])?;
    }
    wr.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_sweep_csv(series: &[SweepSeries], w: impl Write) -> Result<(), AnalyzeError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record([
        "series",
        "measure",
        "tau",
        "mean_bits",
        "mean_ablated",
        "none_mean_bits",
        "all_mean_bits",
    ])?;
    for s in series {
        for p in &s.sweep.points {
            wr.write_record([
                s.label.clone(),
                s.sweep.measure.to_string(),
                p.tau.to_string(),
                p.mean_bits.to_string(),
                p.mean_ablated.to_string(),
                s.sweep.none_mean.to_string(),
                s.sweep.all_mean.to_string(),
            ])?;
        }
    }
    wr.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_seed_csv(rows: &[SeedSummary], w: impl Write) -> Result<(), AnalyzeError> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush().map_err(csv::Error::from)?;
    Ok(())
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn num(x: f64) -> String {
    format!("{x:.2}")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Svg {
    out: String,
}

impl Svg {
    fn new(width: f64, height: f64, title: &str, data: &str) -> Self {
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}" font-family="sans-serif" font-size="11">"#,
            num(width),
            num(height),
            num(width),
            num(height)
        );
        // a comment may not contain "--"
        let _ = writeln!(out, "<!-- data\n{}-->", data.replace("--", "- -"));
        let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            out,
            r#"<text x="{}" y="18" text-anchor="middle" font-size="14">{}</text>"#,
            num(width / 2.0),
            escape(title)
        );
        Self { out }
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str, extra: &str) {
        let _ = writeln!(
            self.out,
            r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="{stroke}"{extra}/>"#,
            num(x1),
            num(y1),
            num(x2),
            num(y2)
        );
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str, extra: &str) {
        let _ = writeln!(
            self.out,
            r#"<rect x="{}" y="{}" width="{}" height="{}" fill="{fill}"{extra}/>"#,
            num(x),
            num(y),
            num(w),
            num(h)
        );
    }

    fn text(&mut self, x: f64, y: f64, anchor: &str, s: &str) {
        let _ = writeln!(
            self.out,
            r#"<text x="{}" y="{}" text-anchor="{anchor}">{}</text>"#,
            num(x),
            num(y),
            escape(s)
        );
    }

    fn finish(mut self) -> String {
        self.out.push_str("</svg>\n");
        self.out
    }
}

/// Linear map from `[lo, hi]` onto the plot's vertical pixel range.
struct YScale {
    lo: f64,
    hi: f64,
    top: f64,
    bottom: f64,
}

impl YScale {
    fn new(values: impl Iterator<Item = f64>, top: f64, bottom: f64, from_zero: bool) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| v.is_finite()) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if from_zero {
            lo = lo.min(0.0);
        }
        if hi - lo < 1e-9 {
            hi = lo + 1.0;
        }
        let pad = 0.05 * (hi - lo);
        Self {
            lo: if from_zero && lo == 0.0 { 0.0 } else { lo - pad },
            hi: hi + pad,
            top,
            bottom,
        }
    }

    fn y(&self, v: f64) -> f64 {
        self.bottom - (v - self.lo) / (self.hi - self.lo) * (self.bottom - self.top)
    }

    fn axis(&self, svg: &mut Svg, x: f64, width: f64) {
        svg.line(x, self.top, x, self.bottom, "black", "");
        for i in 0..=4 {
            let v = self.lo + (self.hi - self.lo) * i as f64 / 4.0;
            let y = self.y(v);
            svg.line(x - 4.0, y, x, y, "black", "");
            svg.line(x, y, x + width, y, "#dddddd", "");
            svg.text(x - 6.0, y + 4.0, "end", &format!("{v:.3}"));
        }
    }
}

fn bar_label(d: impl std::fmt::Display, s: impl std::fmt::Display, tau: Option<f64>) -> String {
    match tau {
        Some(t) => format!("{d} {s} {t}"),
        None => format!("{d} {s}"),
    }
}

/// One bar per aggregate record, mean bits with a ±1 std whisker.
pub fn aggregate_svg(records: &[AggregateRecord]) -> Result<String, AnalyzeError> {
    let data = csv_string(|b| write_aggregate_csv(records, b))?;
    let bars: Vec<(String, f64, f64, f64)> = records
        .iter()
        .map(|r| {
            (
                bar_label(r.diagnostic, r.setup, r.tau),
                r.mean_bits,
                r.mean_bits - r.std,
                r.mean_bits + r.std,
            )
        })
        .collect();
    Ok(bar_chart("Mean loss (bits) per setup", &data, &bars))
}

/// One bar per row, mean over seeds with the min..max range as whisker.
pub fn seed_svg(rows: &[SeedSummary]) -> Result<String, AnalyzeError> {
    let data = csv_string(|b| write_seed_csv(rows, b))?;
    let bars: Vec<(String, f64, f64, f64)> = rows
        .iter()
        .map(|r| {
            (
                bar_label(r.diagnostic, r.setup, r.tau),
                r.mean_bits,
                r.min_bits,
                r.max_bits,
            )
        })
        .collect();
    Ok(bar_chart("Mean loss (bits) across seeds, min..max", &data, &bars))
}

fn bar_chart(title: &str, data: &str, bars: &[(String, f64, f64, f64)]) -> String {
    let (left, top, slot, plot_h) = (70.0, 40.0, 70.0, 220.0);
    let width = left + slot * bars.len() as f64 + 20.0;
    let height = top + plot_h + 50.0;
    let mut svg = Svg::new(width, height, title, data);
    let scale = YScale::new(bars.iter().flat_map(|b| [b.1, b.2, b.3]), top, top + plot_h, true);
    scale.axis(&mut svg, left, slot * bars.len() as f64);
    let base = scale.y(scale.lo.max(0.0));
    for (i, (label, value, lo, hi)) in bars.iter().enumerate() {
        let x = left + slot * i as f64 + 10.0;
        let y = scale.y(*value);
        let color = PALETTE[i % PALETTE.len()];
        svg.rect(x, y.min(base), slot - 20.0, (base - y).abs(), color, r#" class="bar""#);
        let cx = x + (slot - 20.0) / 2.0;
        svg.line(cx, scale.y(*lo), cx, scale.y(*hi), "black", "");
        svg.text(cx, top + plot_h + 16.0, "middle", label);
        svg.text(cx, y.min(base) - 4.0, "middle", &format!("{value:.3}"));
    }
    svg.finish()
}

/// Mean Object-ablation bits against τ, with dashed None and All references per series.
pub fn sweep_svg(series: &[SweepSeries]) -> Result<String, AnalyzeError> {
    let data = csv_string(|b| write_sweep_csv(series, b))?;
    let (left, top, plot_w, plot_h) = (70.0, 40.0, 360.0, 220.0);
    let mut svg = Svg::new(
        left + plot_w + 140.0,
        top + plot_h + 50.0,
        "Object ablation vs threshold",
        &data,
    );
    let scale = YScale::new(
        series.iter().flat_map(|s| {
            s.sweep
                .points
                .iter()
                .map(|p| p.mean_bits)
                .chain([s.sweep.none_mean, s.sweep.all_mean])
        }),
        top,
        top + plot_h,
        false,
    );
    scale.axis(&mut svg, left, plot_w);
    let x = |tau: f64| left + tau * plot_w;
    svg.line(left, top + plot_h, left + plot_w, top + plot_h, "black", "");
    for i in 0..=5 {
        let tau = i as f64 / 5.0;
        svg.text(x(tau), top + plot_h + 16.0, "middle", &format!("{tau:.1}"));
    }
    svg.text(left + plot_w / 2.0, top + plot_h + 34.0, "middle", "tau");
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        for (name, v) in [("none", s.sweep.none_mean), ("all", s.sweep.all_mean)] {
            let y = scale.y(v);
            svg.line(
                left,
                y,
                left + plot_w,
                y,
                color,
                r#" stroke-dasharray="4 3" class="reference""#,
            );
            svg.text(left + plot_w + 4.0, y + 4.0, "start", &format!("{} {name}", s.label));
        }
        let pts: Vec<String> = s
            .sweep
            .points
            .iter()
            .map(|p| format!("{},{}", num(x(p.tau)), num(scale.y(p.mean_bits))))
            .collect();
        let _ = writeln!(
            svg.out,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            pts.join(" ")
        );
        for p in &s.sweep.points {
            let _ = writeln!(
                svg.out,
                r#"<circle cx="{}" cy="{}" r="3" fill="{color}"/>"#,
                num(x(p.tau)),
                num(scale.y(p.mean_bits))
            );
        }
    }
    Ok(svg.finish())
}

/// Heatmap of error proportions with a column-sum row underneath.
pub fn confusion_svg(m: &ConfusionMatrix) -> Result<String, AnalyzeError> {
    let data = csv_string(|b| write_confusion_csv(m, b))?;
    let k = m.categories.len() as f64;
    let (left, top, cell) = (90.0, 60.0, 60.0);
    let mut svg = Svg::new(
        left + cell * k + 20.0,
        top + cell * (k + 1.0) + 30.0,
        "Incorrect silver predictions (gold row, predicted column)",
        &data,
    );
    let max = m.counts.iter().flatten().copied().max().unwrap_or(0).max(1) as f64;
    for (p, cat) in m.categories.iter().enumerate() {
        svg.text(left + cell * (p as f64 + 0.5), top - 8.0, "middle", cat);
    }
    for (g, cat) in m.categories.iter().enumerate() {
        let y = top + cell * g as f64;
        svg.text(left - 6.0, y + cell / 2.0 + 4.0, "end", cat);
        for p in 0..m.categories.len() {
            let x = left + cell * p as f64;
            let opacity = format!(
                r##" fill-opacity="{:.3}" stroke="#999999""##,
                m.counts[g][p] as f64 / max
            );
            svg.rect(x, y, cell, cell, "#d62728", &opacity);
            svg.text(
                x + cell / 2.0,
                y + cell / 2.0 + 4.0,
                "middle",
                &format!("{:.3}", m.proportion(g, p)),
            );
        }
    }
    let y = top + cell * k;
    svg.text(left - 6.0, y + cell / 2.0 + 4.0, "end", "column sum");
    for (p, s) in m.column_sums().into_iter().enumerate() {
        let x = left + cell * p as f64;
        svg.rect(x, y, cell, cell, "#eeeeee", r##" stroke="#999999""##);
        svg.text(x + cell / 2.0, y + cell / 2.0 + 4.0, "middle", &format!("{s:.3}"));
    }
    Ok(svg.finish())
}

fn write_file(dir: &Path, name: &str, content: &[u8], written: &mut Vec<PathBuf>) -> Result<(), AnalyzeError> {
    let path = dir.join(name);
    std::fs::write(&path, content).map_err(|source| AnalyzeError::Io {
        path: path.display().to_string(),
        source,
    })?;
    written.push(path);
    Ok(())
}

/// Writes every non-empty part of `report` into directory `dir`, returning the files written.
pub fn emit_report(report: &Report, format: ReportFormat, dir: &Path) -> Result<Vec<PathBuf>, AnalyzeError> {
    if report.is_empty() {
        return Err(AnalyzeError::Empty);
    }
    std::fs::create_dir_all(dir).map_err(|source| AnalyzeError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut written = Vec::new();
    let w = &mut written;
    match format {
        ReportFormat::Csv => {
            if !report.aggregates.is_empty() {
                let s = csv_string(|b| write_aggregate_csv(&report.aggregates, b))?;
                write_file(dir, "aggregate.csv", s.as_bytes(), w)?;
            }
            if let Some(m) = &report.confusion {
                write_file(
                    dir,
                    "confusion.csv",
                    csv_string(|b| write_confusion_csv(m, b))?.as_bytes(),
                    w,
                )?;
                write_file(
                    dir,
                    "confusion_columns.csv",
                    csv_string(|b| write_column_sums_csv(m, b))?.as_bytes(),
                    w,
                )?;
            }
            if !report.sweeps.is_empty() {
                write_file(
                    dir,
                    "sweep.csv",
                    csv_string(|b| write_sweep_csv(&report.sweeps, b))?.as_bytes(),
                    w,
                )?;
            }
            if !report.seeds.is_empty() {
                write_file(
                    dir,
                    "seeds.csv",
                    csv_string(|b| write_seed_csv(&report.seeds, b))?.as_bytes(),
                    w,
                )?;
            }
        }
        ReportFormat::Svg => {
            if !report.aggregates.is_empty() {
                write_file(dir, "aggregate.svg", aggregate_svg(&report.aggregates)?.as_bytes(), w)?;
            }
            if let Some(m) = &report.confusion {
                write_file(dir, "confusion.svg", confusion_svg(m)?.as_bytes(), w)?;
            }
            if !report.sweeps.is_empty() {
                write_file(dir, "sweep.svg", sweep_svg(&report.sweeps)?.as_bytes(), w)?;
            }
            if !report.seeds.is_empty() {
                write_file(dir, "seeds.svg", seed_svg(&report.seeds)?.as_bytes(), w)?;
            }
        }
    }
    Ok(written)
}
