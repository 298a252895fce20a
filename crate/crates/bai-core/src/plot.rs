//! Deterministic SVG emitters for training-record figures: one line chart
//! per scalar metric and a grid of per-length-bucket reward panels. Output
//! is plain text with fixed number formatting, so identical inputs produce
//! byte-identical files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::analysis::{BucketSpec, RunSeries};
use crate::error::{Error, Result};

/// Line colors, cycled when there are more runs than entries.
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

const CHART_W: f64 = 640.0;
const CHART_H: f64 = 400.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 42.0;
const MARGIN_B: f64 = 50.0;

/// Fixed two-decimal coordinate formatting keeps the output stable.
fn coord(v: f64) -> String {
    format!("{v:.2}")
}

/// Tick labels: up to four decimals with trailing zeros trimmed.
fn label(v: f64) -> String {
    let mut s = format!("{v:.4}");
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
    if s == "-0" {
        "0".into()
    } else {
        s
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Pads a degenerate range so a constant series still gets a usable scale.
fn pad_range(lo: f64, hi: f64) -> (f64, f64) {
    if hi > lo {
        (lo, hi)
    } else {
        let pad = lo.abs().max(1.0) * 0.5;
        (lo - pad, lo + pad)
    }
}

struct Scale {
    x_lo: f64,
    x_hi: f64,
    y_lo: f64,
    y_hi: f64,
    left: f64,
    right: f64,
    top: f64,
    bottom: f64,
}

impl Scale {
    fn x(&self, v: f64) -> f64 {
        self.left + (v - self.x_lo) / (self.x_hi - self.x_lo) * (self.right - self.left)
    }
    fn y(&self, v: f64) -> f64 {
        self.bottom - (v - self.y_lo) / (self.y_hi - self.y_lo) * (self.bottom - self.top)
    }
}

fn data_range(runs: &[(&str, Vec<(f64, f64)>)]) -> (f64, f64, f64, f64) {
    let mut x_lo = f64::INFINITY;
    let mut x_hi = f64::NEG_INFINITY;
    let mut y_lo = f64::INFINITY;
    let mut y_hi = f64::NEG_INFINITY;
    for (_, pts) in runs {
        for &(x, y) in pts {
            x_lo = x_lo.min(x);
            x_hi = x_hi.max(x);
            y_lo = y_lo.min(y);
            y_hi = y_hi.max(y);
        }
    }
    let (x_lo, x_hi) = pad_range(x_lo, x_hi);
    let (y_lo, y_hi) = pad_range(y_lo, y_hi);
    (x_lo, x_hi, y_lo, y_hi)
}

fn polyline(out: &mut String, pts: &[(f64, f64)], sc: &Scale, color: &str) {
    if pts.is_empty() {
        return;
    }
    if pts.len() == 1 {
        let _ = write!(
            out,
            "<circle cx=\"{}\" cy=\"{}\" r=\"2.5\" fill=\"{color}\"/>\n",
            coord(sc.x(pts[0].0)),
            coord(sc.y(pts[0].1)),
        );
        return;
    }
    let mut attr = String::new();
    for &(x, y) in pts {
        if !attr.is_empty() {
            attr.push(' ');
        }
        let _ = write!(attr, "{},{}", coord(sc.x(x)), coord(sc.y(y)));
    }
    let _ = write!(
        out,
        "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{attr}\"/>\n",
    );
}

fn axes(out: &mut String, sc: &Scale, x_label: &str, y_label: &str) {
    let _ = write!(
        out,
        "<line x1=\"{l}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"#333\" stroke-width=\"1\"/>\n\
         <line x1=\"{l}\" y1=\"{t}\" x2=\"{l}\" y2=\"{b}\" stroke=\"#333\" stroke-width=\"1\"/>\n",
        l = coord(sc.left),
        r = coord(sc.right),
        t = coord(sc.top),
        b = coord(sc.bottom),
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let xv = sc.x_lo + f * (sc.x_hi - sc.x_lo);
        let yv = sc.y_lo + f * (sc.y_hi - sc.y_lo);
        let xpix = sc.x(xv);
        let ypix = sc.y(yv);
        let _ = write!(
            out,
            "<line x1=\"{x}\" y1=\"{b}\" x2=\"{x}\" y2=\"{b2}\" stroke=\"#333\" stroke-width=\"1\"/>\n\
             <text x=\"{x}\" y=\"{bt}\" font-size=\"10\" text-anchor=\"middle\" fill=\"#333\">{xl}</text>\n\
             <line x1=\"{l}\" y1=\"{y}\" x2=\"{l2}\" y2=\"{y}\" stroke=\"#333\" stroke-width=\"1\"/>\n\
             <text x=\"{lt}\" y=\"{yt}\" font-size=\"10\" text-anchor=\"end\" fill=\"#333\">{yl}</text>\n",
            x = coord(xpix),
            b = coord(sc.bottom),
            b2 = coord(sc.bottom + 4.0),
            bt = coord(sc.bottom + 16.0),
            xl = label(xv),
            l = coord(sc.left),
            l2 = coord(sc.left - 4.0),
            y = coord(ypix),
            lt = coord(sc.left - 7.0),
            yt = coord(ypix + 3.5),
            yl = label(yv),
        );
    }
    let _ = write!(
        out,
        "<text x=\"{cx}\" y=\"{cy}\" font-size=\"11\" text-anchor=\"middle\" fill=\"#333\">{xn}</text>\n\
         <text x=\"14\" y=\"{my}\" font-size=\"11\" text-anchor=\"middle\" fill=\"#333\" \
          transform=\"rotate(-90 14 {my})\">{yn}</text>\n",
        cx = coord((sc.left + sc.right) / 2.0),
        cy = coord(sc.bottom + 34.0),
        xn = escape(x_label),
        my = coord((sc.top + sc.bottom) / 2.0),
        yn = escape(y_label),
    );
}

fn legend(out: &mut String, names: &[&str], x: f64, y0: f64) {
    for (i, name) in names.iter().enumerate() {
        let y = y0 + 15.0 * i as f64;
        let color = PALETTE[i % PALETTE.len()];
        let _ = write!(
            out,
            "<line x1=\"{x1}\" y1=\"{ly}\" x2=\"{x2}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\n\
             <text x=\"{tx}\" y=\"{ty}\" font-size=\"11\" fill=\"#333\">{n}</text>\n",
            x1 = coord(x),
            x2 = coord(x + 18.0),
            ly = coord(y),
            tx = coord(x + 23.0),
            ty = coord(y + 3.5),
            n = escape(name),
        );
    }
}

/// A single line chart with one polyline per named series. X values are
/// step indices; points must already be in x order.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, runs: &[(&str, Vec<(f64, f64)>)]) -> String {
    let (x_lo, x_hi, y_lo, y_hi) = data_range(runs);
    let sc = Scale {
        x_lo,
        x_hi,
        y_lo,
        y_hi,
        left: MARGIN_L,
        right: CHART_W - MARGIN_R,
        top: MARGIN_T,
        bottom: CHART_H - MARGIN_B,
    };
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {w} {h}\" \
         width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"#ffffff\"/>\n\
         <text x=\"{cx}\" y=\"20\" font-size=\"14\" text-anchor=\"middle\" fill=\"#111\">{t}</text>\n",
        w = label(CHART_W),
        h = label(CHART_H),
        cx = coord(CHART_W / 2.0),
        t = escape(title),
    );
    axes(&mut out, &sc, x_label, y_label);
    for (i, (_, pts)) in runs.iter().enumerate() {
        polyline(&mut out, pts, &sc, PALETTE[i % PALETTE.len()]);
    }
    let names: Vec<&str> = runs.iter().map(|(n, _)| *n).collect();
    legend(&mut out, &names, sc.right - 150.0, sc.top + 10.0);
    out.push_str("</svg>\n");
    out
}

const PANEL_W: f64 = 225.0;
const PANEL_H: f64 = 150.0;
const GRID_COLS: usize = 4;

/// A grid of mini line charts, one per response-length bucket, all sharing
/// one y-scale so panels are comparable. Steps where a bucket was empty
/// break the polyline into separate segments.
pub fn bucket_grid(title: &str, spec: BucketSpec, runs: &[(&str, &RunSeries)]) -> String {
    let rows = spec.count.div_ceil(GRID_COLS);
    let head = 46.0 + 15.0 * runs.len() as f64;
    let total_w = GRID_COLS as f64 * PANEL_W;
    let total_h = head + rows as f64 * PANEL_H + 8.0;

    // shared scales across every panel and run
    let mut x_lo = f64::INFINITY;
    let mut x_hi = f64::NEG_INFINITY;
    let mut y_lo = f64::INFINITY;
    let mut y_hi = f64::NEG_INFINITY;
    for (_, run) in runs {
        for m in &run.metrics {
            x_lo = x_lo.min(m.step as f64);
            x_hi = x_hi.max(m.step as f64);
            for v in m.buckets.iter().flatten() {
                y_lo = y_lo.min(*v);
                y_hi = y_hi.max(*v);
            }
        }
    }
    if !y_lo.is_finite() {
        (y_lo, y_hi) = (0.0, 1.0);
    }
    let (x_lo, x_hi) = pad_range(x_lo, x_hi);
    let (y_lo, y_hi) = pad_range(y_lo, y_hi);

    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {w} {h}\" \
         width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"#ffffff\"/>\n\
         <text x=\"{cx}\" y=\"20\" font-size=\"14\" text-anchor=\"middle\" fill=\"#111\">{t}</text>\n",
        w = label(total_w),
        h = label(total_h),
        cx = coord(total_w / 2.0),
        t = escape(title),
    );
    let names: Vec<&str> = runs.iter().map(|(n, _)| *n).collect();
    legend(&mut out, &names, 10.0, 34.0);

    for b in 0..spec.count {
        let col = (b % GRID_COLS) as f64;
        let row = (b / GRID_COLS) as f64;
        let ox = col * PANEL_W;
        let oy = head + row * PANEL_H;
        let sc = Scale {
            x_lo,
            x_hi,
            y_lo,
            y_hi,
            left: ox + 38.0,
            right: ox + PANEL_W - 8.0,
            top: oy + 20.0,
            bottom: oy + PANEL_H - 18.0,
        };
        let lo = b * spec.width;
        let panel_title = if b + 1 == spec.count {
            format!("len &#8805; {lo}")
        } else {
            format!("len [{lo}, {})", lo + spec.width)
        };
        let _ = write!(
            out,
            "<rect x=\"{x}\" y=\"{y}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"#ccc\"/>\n\
             <text x=\"{tx}\" y=\"{ty}\" font-size=\"10\" text-anchor=\"middle\" fill=\"#333\">{pt}</text>\n\
             <text x=\"{lx}\" y=\"{ly0}\" font-size=\"8\" text-anchor=\"end\" fill=\"#666\">{v1}</text>\n\
             <text x=\"{lx}\" y=\"{ly1}\" font-size=\"8\" text-anchor=\"end\" fill=\"#666\">{v0}</text>\n",
            x = coord(sc.left),
            y = coord(sc.top),
            pw = coord(sc.right - sc.left),
            ph = coord(sc.bottom - sc.top),
            tx = coord((sc.left + sc.right) / 2.0),
            ty = coord(oy + 13.0),
            pt = panel_title,
            lx = coord(sc.left - 3.0),
            ly0 = coord(sc.top + 7.0),
            ly1 = coord(sc.bottom),
            v1 = label(y_hi),
            v0 = label(y_lo),
        );
        for (i, (_, run)) in runs.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let mut segment: Vec<(f64, f64)> = Vec::new();
            for m in &run.metrics {
                match m.buckets.get(b).copied().flatten() {
                    Some(v) => segment.push((m.step as f64, v)),
                    None => {
                        polyline(&mut out, &segment, &sc, color);
                        segment.clear();
                    }
                }
            }
            polyline(&mut out, &segment, &sc, color);
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Writes the standard figure set for a collection of runs into `out_dir`:
/// mean_len.svg, mean_reward.svg, kl.svg, and bucket_rewards.svg.
pub fn emit_plots(runs: &[(&str, &RunSeries)], spec: BucketSpec, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if runs.is_empty() || runs.iter().any(|(_, r)| r.metrics.is_empty()) {
        return Err(Error::Config("plotting needs at least one run with metrics rows".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let series = |f: &dyn Fn(&RunSeries) -> Vec<f64>| -> Vec<(&str, Vec<(f64, f64)>)> {
        runs.iter()
            .map(|(n, r)| {
                let ys = f(r);
                let pts = r
                    .metrics
                    .iter()
                    .zip(ys)
                    .map(|(m, y)| (m.step as f64, y))
                    .collect();
                (*n, pts)
            })
            .collect()
    };
    let figures = [
        ("mean_len.svg", line_chart("Mean response length", "step", "tokens", &series(&RunSeries::mean_len_series))),
        ("mean_reward.svg", line_chart("Mean reward", "step", "reward", &series(&RunSeries::mean_reward_series))),
        ("kl.svg", line_chart("Policy KL (train vs sample)", "step", "kl", &series(&RunSeries::kl_series))),
        ("bucket_rewards.svg", bucket_grid("Reward by response-length bucket", spec, runs)),
    ];
    let mut paths = Vec::new();
    for (name, svg) in figures {
        let path = out_dir.join(name);
        std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}

// --------------------------------------------------------------------------
// tests
// --------------------------------------------------------------------------
