//! Aggregate tables and static SVG charts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::policy_eval::interval;
use crate::synth::{DominanceMatrix, ResultRow, ResultsTable, RESULTS_SCHEMA};

/// Mean fraction-of-oracle with a 95% interval for one group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub group: String,
    pub method: String,
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parameter {
    Amplitude,
    Lengthscale,
    QueryBudget,
    NoiseScale,
}

impl Parameter {
    pub const ALL: [Parameter; 4] =
        [Parameter::Amplitude, Parameter::Lengthscale, Parameter::QueryBudget, Parameter::NoiseScale];

    pub fn name(&self) -> &'static str {
        match self {
            Parameter::Amplitude => "amplitude",
            Parameter::Lengthscale => "lengthscale",
            Parameter::QueryBudget => "query_budget",
            Parameter::NoiseScale => "noise_scale",
        }
    }

    fn value(&self, r: &ResultRow) -> f64 {
        match self {
            Parameter::Amplitude => r.amplitude,
            Parameter::Lengthscale => r.lengthscale,
            Parameter::QueryBudget => r.query_budget as f64,
            Parameter::NoiseScale => r.noise_scale,
        }
    }
}

fn summarize<K: Ord + ToString>(groups: BTreeMap<(K, String), Vec<f64>>) -> Result<Vec<SummaryRow>> {
    groups
        .into_iter()
        .map(|((g, method), v)| {
            let s = interval(&v)?;
            Ok(SummaryRow { group: g.to_string(), method, mean: s.mean, lo: s.lo, hi: s.hi, count: s.count })
        })
        .collect()
}

fn finite_rows(table: &ResultsTable) -> impl Iterator<Item = &ResultRow> {
    table.successful().filter(|r| r.fraction_of_oracle.is_finite())
}

/// Per-method pooled fraction-of-oracle.
pub fn method_summary(table: &ResultsTable) -> Result<Vec<SummaryRow>> {
    let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in finite_rows(table) {
        groups.entry(("all".into(), r.method.clone())).or_default().push(r.fraction_of_oracle);
    }
    if groups.is_empty() {
        return Err(Error::Ingest("results contain no successful runs".into()));
    }
    summarize(groups)
}

/// Fraction-of-oracle broken down by one generating or privacy parameter.
pub fn parameter_summary(table: &ResultsTable, parameter: Parameter) -> Result<Vec<SummaryRow>> {
    // keyed by the value's bit pattern, which orders non-negative floats
    let mut groups: BTreeMap<(u64, String), Vec<f64>> = BTreeMap::new();
    for r in finite_rows(table) {
        groups.entry((parameter.value(r).to_bits(), r.method.clone())).or_default().push(r.fraction_of_oracle);
    }
    if groups.is_empty() {
        return Err(Error::Ingest("results contain no successful runs".into()));
    }
    let mut rows = summarize(groups)?;
    for row in &mut rows {
        row.group = f64::from_bits(row.group.parse().expect("bit pattern")).to_string();
    }
    Ok(rows)
}

pub fn write_summary<W: Write>(rows: &[SummaryRow], group_name: &str, mut out: W) -> Result<()> {
    writeln!(out, "{RESULTS_SCHEMA}")?;
    writeln!(out, "{group_name},method,mean,lo,hi,count")?;
    for r in rows {
        writeln!(out, "{},{},{},{},{},{}", r.group, r.method, r.mean, r.lo, r.hi, r.count)?;
    }
    Ok(())
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 60.0;
const PALETTE: [&str; 8] = ["#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#9c755f"];

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(title));
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn y_range(rows: &[SummaryRow]) -> (f64, f64) {
    let lo = rows.iter().map(|r| r.lo).fold(0.0, f64::min);
    let hi = rows.iter().map(|r| r.hi).fold(1.0, f64::max);
    (lo, hi)
}

fn axes(s: &mut String, lo: f64, hi: f64) -> impl Fn(f64) -> f64 {
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let y = move |v: f64| HEIGHT - MARGIN - (v - lo) / (hi - lo) * plot_h;
    let _ = writeln!(
        s,
        r#"<line x1="{MARGIN}" y1="{}" x2="{MARGIN}" y2="{}" stroke="black"/>"#,
        MARGIN,
        HEIGHT - MARGIN
    );
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.2}</text><line x1="{MARGIN}" y1="{:.1}" x2="{}" y2="{:.1}" stroke="gray" stroke-width="0.3"/>"#,
            MARGIN - 4.0,
            y(v) + 4.0,
            y(v),
            WIDTH - MARGIN,
            y(v)
        );
    }
    y
}

/// Bar chart of the pooled per-method means with interval whiskers.
pub fn bar_chart(rows: &[SummaryRow], title: &str) -> String {
    let mut s = svg_open(title);
    let (lo, hi) = y_range(rows);
    let y = axes(&mut s, lo, hi);
    let slot = (WIDTH - 2.0 * MARGIN) / rows.len().max(1) as f64;
    for (i, r) in rows.iter().enumerate() {
        let x = MARGIN + slot * i as f64 + slot * 0.15;
        let w = slot * 0.7;
        let (top, base) = (y(r.mean.max(0.0)), y(r.mean.min(0.0)));
        let _ = writeln!(
            s,
            r#"<rect x="{x:.1}" y="{top:.1}" width="{w:.1}" height="{:.1}" fill="{}"/>"#,
            base - top,
            PALETTE[i % PALETTE.len()]
        );
        let cx = x + w / 2.0;
        let _ = writeln!(s, r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/>"#, y(r.lo), y(r.hi));
        let _ = writeln!(
            s,
            r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle" font-size="9">{}</text>"#,
            HEIGHT - MARGIN + 14.0,
            escape(&r.method)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// One line per method across the groups of a parameter summary.
pub fn line_chart(rows: &[SummaryRow], title: &str) -> String {
    let mut s = svg_open(title);
    let (lo, hi) = y_range(rows);
    let y = axes(&mut s, lo, hi);
    let mut groups: Vec<&str> = Vec::new();
    for r in rows {
        if !groups.contains(&r.group.as_str()) {
            groups.push(&r.group);
        }
    }
    let step = (WIDTH - 2.0 * MARGIN) / groups.len().max(1) as f64;
    let x = |g: &str| MARGIN + step * (groups.iter().position(|h| *h == g).unwrap_or(0) as f64 + 0.5);
    for g in &groups {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, x(g), HEIGHT - MARGIN + 14.0, escape(g));
    }
    let mut methods: Vec<&str> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    for (i, m) in methods.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> =
            rows.iter().filter(|r| r.method == *m).map(|r| format!("{:.1},{:.1}", x(&r.group), y(r.mean))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, pts.join(" "));
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" fill="{color}">{}</text>"#,
            WIDTH - MARGIN + 4.0 - 120.0,
            MARGIN + 14.0 * i as f64,
            escape(m)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Square table of dominance counts as an SVG grid.
pub fn dominance_chart(m: &DominanceMatrix) -> String {
    let n = m.methods.len();
    let cell = 44.0;
    let label = 190.0;
    let size = label + cell * n as f64 + 20.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let max = m.counts.iter().flatten().copied().max().unwrap_or(0).max(1) as f64;
    for (i, name) in m.methods.iter().enumerate() {
        let pos = label + cell * i as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#, label - 6.0, pos + cell / 2.0 + 4.0, escape(name));
        let _ = writeln!(
            s,
            r#"<text transform="translate({:.1},{}) rotate(-60)">{}</text>"#,
            pos + cell / 2.0,
            label - 6.0,
            escape(name)
        );
        for (j, &c) in m.counts[i].iter().enumerate() {
            let shade = 255 - (c as f64 / max * 180.0) as u8;
            let x = label + cell * j as f64;
            let _ = writeln!(
                s,
                r#"<rect x="{x:.1}" y="{pos:.1}" width="{cell}" height="{cell}" fill="rgb(255,{shade},{shade})" stroke="gray"/><text x="{:.1}" y="{:.1}" text-anchor="middle">{c}</text>"#,
                x + cell / 2.0,
                pos + cell / 2.0 + 4.0
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Reads a dominance table written by [`DominanceMatrix::write`].
pub fn read_dominance(text: &str) -> Result<DominanceMatrix> {
    let bad = |m: &str| Error::Ingest(format!("dominance table: {m}"));
    let mut lines = text.lines();
    if lines.next() != Some(RESULTS_SCHEMA) {
        return Err(bad("missing schema line"));
    }
    let header = lines.next().ok_or_else(|| bad("missing header"))?;
    let methods: Vec<String> = header.split(',').skip(1).map(String::from).collect();
    let mut counts = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != methods.len() + 1 {
            return Err(bad("ragged row"));
        }
        counts.push(fields[1..].iter().map(|v| v.parse().map_err(|_| bad("bad count"))).collect::<Result<Vec<usize>>>()?);
    }
    if counts.len() != methods.len() || methods.is_empty() {
        return Err(bad("table is not square"));
    }
    Ok(DominanceMatrix { methods, counts })
}
