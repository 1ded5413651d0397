//! Pareto fronts, DTIP scoring, checkpoint selection, interpolation sweeps
//! and the merge-schedule trace, with CSV and SVG emitters.

use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distance::OriginProbe;
use crate::error::{Error, Result};
use crate::merge::interpolate;
use crate::model::ModelConfig;
use crate::params::ParamStore;
use crate::tasks::EvalReport;
use crate::train::{evaluate, EvalContext, MergeEvent};

/// One evaluated checkpoint in (text, retrieval) space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfPoint {
    pub step: u64,
    pub text: f64,
    pub retrieval: f64,
    /// Where the point came from, e.g. a run id or checkpoint path.
    #[serde(default)]
    pub source: String,
}

impl PerfPoint {
    pub fn new(step: u64, text: f64, retrieval: f64) -> Self {
        Self {
            step,
            text,
            retrieval,
            source: String::new(),
        }
    }

    pub fn from_report(report: &EvalReport, source: impl Into<String>) -> Self {
        Self {
            step: report.step,
            text: report.capability_accuracy,
            retrieval: report.recall_at_k,
            source: source.into(),
        }
    }

    /// `self` is at least as good on both axes and strictly better on one.
    pub fn dominates(&self, other: &PerfPoint) -> bool {
        self.text >= other.text
            && self.retrieval >= other.retrieval
            && (self.text > other.text || self.retrieval > other.retrieval)
    }
}

/// Min-max normalisation bounds for the two performance axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormBounds {
    pub t_min: f64,
    pub t_max: f64,
    pub r_min: f64,
    pub r_max: f64,
}

impl NormBounds {
    pub fn new(t_min: f64, t_max: f64, r_min: f64, r_max: f64) -> Result<Self> {
        let b = Self {
            t_min,
            t_max,
            r_min,
            r_max,
        };
        b.validate()?;
        Ok(b)
    }

    /// Text bounds from the origin and the unregularised fine-tune, retrieval
    /// bounds from zero to the unregularised fine-tune.
    pub fn from_specialists(
        init_text: f64,
        finetuned_text: f64,
        finetuned_recall: f64,
    ) -> Result<Self> {
        Self::new(finetuned_text, init_text, 0.0, finetuned_recall)
    }

    pub fn validate(&self) -> Result<()> {
        let all_finite = [self.t_min, self.t_max, self.r_min, self.r_max]
            .iter()
            .all(|v| v.is_finite());
        if !all_finite || self.t_max <= self.t_min || self.r_max <= self.r_min {
            return Err(Error::Domain(format!(
                "normalisation bounds need t_max > t_min and r_max > r_min, got t [{}, {}], r [{}, {}]",
                self.t_min, self.t_max, self.r_min, self.r_max
            )));
        }
        Ok(())
    }

    pub fn normalize(&self, p: &PerfPoint) -> (f64, f64) {
        let t = ((p.text - self.t_min) / (self.t_max - self.t_min)).clamp(0.0, 1.0);
        let r = ((p.retrieval - self.r_min) / (self.r_max - self.r_min)).clamp(0.0, 1.0);
        (t, r)
    }
}

fn check_points(points: &[PerfPoint]) -> Result<()> {
    if points.is_empty() {
        return Err(Error::Domain("no performance points".to_owned()));
    }
    if let Some(p) = points
        .iter()
        .find(|p| !(p.text.is_finite() && p.retrieval.is_finite()))
    {
        return Err(Error::Domain(format!(
            "non-finite performance at step {}",
            p.step
        )));
    }
    Ok(())
}

/// Indices of the non-dominated points, in input order. Duplicates of a
/// non-dominated point are all kept.
pub fn pareto_indices(points: &[PerfPoint]) -> Result<Vec<usize>> {
    check_points(points)?;
    // Sweep by text descending; within equal text, retrieval descending. A
    // point survives iff its retrieval beats everything with strictly larger
    // text, and matches the best retrieval within its own text tie group.
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points[b]
            .text
            .total_cmp(&points[a].text)
            .then(points[b].retrieval.total_cmp(&points[a].retrieval))
    });
    let mut keep = vec![false; points.len()];
    let mut best_above = f64::NEG_INFINITY;
    let mut i = 0;
    while i < order.len() {
        let text = points[order[i]].text;
        let mut j = i;
        while j < order.len() && points[order[j]].text == text {
            j += 1;
        }
        let group_best = points[order[i]].retrieval;
        if group_best > best_above {
            for &idx in &order[i..j] {
                keep[idx] = points[idx].retrieval == group_best;
            }
            best_above = group_best;
        }
        i = j;
    }
    Ok((0..points.len()).filter(|&i| keep[i]).collect())
}

pub fn pareto_front(points: &[PerfPoint]) -> Result<Vec<PerfPoint>> {
    Ok(pareto_indices(points)?
        .into_iter()
        .map(|i| points[i].clone())
        .collect())
}

/// Distance to the ideal point `(1, 1)` after clamped min-max normalisation.
pub fn dtip(p: &PerfPoint, bounds: &NormBounds) -> f64 {
    let (t, r) = bounds.normalize(p);
    ((1.0 - t).powi(2) + (1.0 - r).powi(2)).sqrt()
}

/// Index of the front member with the smallest DTIP; ties go to the earlier
/// step, then to the earlier input position.
pub fn select_index(points: &[PerfPoint], bounds: &NormBounds) -> Result<usize> {
    bounds.validate()?;
    let front = pareto_indices(points)?;
    let best = front
        .into_iter()
        .min_by(|&a, &b| {
            dtip(&points[a], bounds)
                .total_cmp(&dtip(&points[b], bounds))
                .then(points[a].step.cmp(&points[b].step))
                .then(a.cmp(&b))
        })
        .expect("front of a non-empty set is non-empty");
    Ok(best)
}

pub fn select_checkpoint<'a>(
    points: &'a [PerfPoint],
    bounds: &NormBounds,
) -> Result<&'a PerfPoint> {
    Ok(&points[select_index(points, bounds)?])
}

/// One row of a post-hoc interpolation sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub text: f64,
    pub recall: f64,
}

/// Evaluates `interpolate(init, ft, lambda)` for every `lambda` in `grid`.
pub fn interpolation_sweep(
    model_config: ModelConfig,
    init: &ParamStore,
    ft: &ParamStore,
    grid: &[f64],
    ctx: &EvalContext<'_>,
) -> Result<Vec<SweepRow>> {
    if let Some(bad) = grid.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::Domain(format!(
            "interpolation weight must lie in [0, 1], got {bad}"
        )));
    }
    let probe = OriginProbe::new(init.clone());
    grid.par_iter()
        .map(|&lambda| {
            let params = interpolate(init, ft, lambda)?;
            let report = evaluate(model_config, &params, &probe, ctx, 0, 0)?;
            Ok(SweepRow {
                lambda,
                text: report.capability_accuracy,
                recall: report.recall_at_k,
            })
        })
        .collect()
}

/// Step gaps between consecutive merge events.
pub fn merge_schedule_trace(events: &[MergeEvent]) -> Result<Vec<u64>> {
    if events.windows(2).any(|w| w[1].step <= w[0].step) {
        return Err(Error::Domain(
            "merge events must be sorted by strictly increasing step".to_owned(),
        ));
    }
    Ok(events.windows(2).map(|w| w[1].step - w[0].step).collect())
}

/// Row of the per-checkpoint CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRow {
    pub step: u64,
    pub text: f64,
    pub recall: f64,
    pub dtip: f64,
    pub on_front: bool,
}

pub fn checkpoint_rows(points: &[PerfPoint], bounds: &NormBounds) -> Result<Vec<CheckpointRow>> {
    bounds.validate()?;
    let mut on_front = vec![false; points.len()];
    for i in pareto_indices(points)? {
        on_front[i] = true;
    }
    Ok(points
        .iter()
        .zip(on_front)
        .map(|(p, on_front)| CheckpointRow {
            step: p.step,
            text: p.text,
            recall: p.retrieval,
            dtip: dtip(p, bounds),
            on_front,
        })
        .collect())
}

pub fn write_csv<T: Serialize>(out: impl Write, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct GapRow {
    index: usize,
    gap: u64,
}

pub fn write_trace_csv(out: impl Write, gaps: &[u64]) -> Result<()> {
    let rows: Vec<GapRow> = gaps
        .iter()
        .enumerate()
        .map(|(index, &gap)| GapRow { index, gap })
        .collect();
    if rows.is_empty() {
        let mut out = out;
        out.write_all(b"index,gap\n")?;
        return Ok(());
    }
    write_csv(out, &rows)
}

/// A named set of points for a scatter plot.
#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];
const W: f64 = 640.0;
const H: f64 = 480.0;
const MARGIN: f64 = 60.0;

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn fit(points: impl Iterator<Item = (f64, f64)>) -> Self {
        let (mut x0, mut x1, mut y0, mut y1) = (
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
        );
        for (x, y) in points.filter(|(x, y)| x.is_finite() && y.is_finite()) {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        let pad = |lo: f64, hi: f64| {
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                let d = 0.05 * (hi - lo);
                (lo - d, hi + d)
            }
        };
        Self {
            x: pad(x0, x1),
            y: pad(y0, y1),
        }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x.0) / (self.x.1 - self.x.0) * (W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        H - MARGIN - (y - self.y.0) / (self.y.1 - self.y.0) * (H - 2.0 * MARGIN)
    }

    fn axes(&self, svg: &mut String, title: &str, xlabel: &str, ylabel: &str) {
        let (l, r, t, b) = (MARGIN, W - MARGIN, MARGIN, H - MARGIN);
        let _ = writeln!(
            svg,
            r#"<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>"#
        );
        let _ = writeln!(
            svg,
            r#"<path d="M{l} {t} L{l} {b} L{r} {b}" stroke="black" fill="none"/>"#
        );
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let xv = self.x.0 + f * (self.x.1 - self.x.0);
            let yv = self.y.0 + f * (self.y.1 - self.y.0);
            let (xp, yp) = (self.px(xv), self.py(yv));
            let _ = writeln!(
                svg,
                r#"<line x1="{xp:.1}" y1="{b}" x2="{xp:.1}" y2="{:.1}" stroke="black"/>"#,
                b + 5.0
            );
            let _ = writeln!(
                svg,
                r#"<text x="{xp:.1}" y="{:.1}" font-size="11" text-anchor="middle">{}</text>"#,
                b + 18.0,
                tick(xv)
            );
            let _ = writeln!(
                svg,
                r#"<line x1="{:.1}" y1="{yp:.1}" x2="{l}" y2="{yp:.1}" stroke="black"/>"#,
                l - 5.0
            );
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">{}</text>"#,
                l - 8.0,
                yp + 4.0,
                tick(yv)
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="30" font-size="15" text-anchor="middle">{}</text>"#,
            W / 2.0,
            escape(title)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-size="13" text-anchor="middle">{}</text>"#,
            W / 2.0,
            H - 15.0,
            escape(xlabel)
        );
        let _ = writeln!(
            svg,
            r#"<text x="15" y="{:.1}" font-size="13" text-anchor="middle" transform="rotate(-90 15 {:.1})">{}</text>"#,
            H / 2.0,
            H / 2.0,
            escape(ylabel)
        );
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 1000.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
            .trim_end_matches('0')
            .trim_end_matches('.')
            .to_owned()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn open_svg() -> String {
    format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    ) + "\n"
}

/// Self-contained SVG scatter plot with one colour per series and a legend.
pub fn scatter_svg(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let frame = Frame::fit(series.iter().flat_map(|s| s.points.iter().copied()));
    let mut svg = open_svg();
    frame.axes(&mut svg, title, xlabel, ylabel);
    for (i, s) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        for &(x, y) in s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
        {
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.1}" cy="{:.1}" r="4" fill="{colour}" fill-opacity="0.8"/>"#,
                frame.px(x),
                frame.py(y)
            );
        }
        let ly = MARGIN + 16.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<circle cx="{:.1}" cy="{ly:.1}" r="4" fill="{colour}"/>"#,
            W - MARGIN - 110.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-size="11">{}</text>"#,
            W - MARGIN - 100.0,
            ly + 4.0,
            escape(&s.name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Self-contained SVG line plot of `values` against their index.
pub fn line_svg(title: &str, xlabel: &str, ylabel: &str, values: &[f64]) -> String {
    let pts: Vec<(f64, f64)> = values
        .iter()
        .enumerate()
        .map(|(i, &v)| (i as f64, v))
        .collect();
    let frame = Frame::fit(pts.iter().copied());
    let mut svg = open_svg();
    frame.axes(&mut svg, title, xlabel, ylabel);
    if !pts.is_empty() {
        let mut d = String::new();
        for (i, &(x, y)) in pts.iter().enumerate() {
            let _ = write!(
                d,
                "{}{:.1} {:.1} ",
                if i == 0 { "M" } else { "L" },
                frame.px(x),
                frame.py(y)
            );
        }
        let _ = writeln!(
            svg,
            r#"<path d="{}" stroke="{}" stroke-width="1.5" fill="none"/>"#,
            d.trim_end(),
            PALETTE[0]
        );
    }
    svg.push_str("</svg>\n");
    svg
}
