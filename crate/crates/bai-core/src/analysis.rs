//! Turning training records into verdicts: length-bucketed reward summaries,
//! collapse / hockey-stick detectors, metrics CSV I/O, and ratio-sweep tables.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ppo::Trajectory;
use crate::train::StepMetrics;

/// Fixed-width response-length buckets partitioning `[0, width·count)`.
/// Lengths past the end are clamped into the last bucket.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BucketSpec {
    pub width: usize,
    pub count: usize,
}

impl Default for BucketSpec {
    fn default() -> Self {
        BucketSpec { width: 8, count: 20 }
    }
}

impl BucketSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.count == 0 {
            return Err(Error::Config("bucket width and count must be positive".into()));
        }
        Ok(())
    }

    /// Bucket index for a response length.
    pub fn bucket_of(&self, len: usize) -> usize {
        (len / self.width).min(self.count - 1)
    }
}

/// Per-bucket (mean reward, count); `None` where no trajectory landed.
pub fn bucket_rewards(trajs: &[Trajectory], spec: BucketSpec) -> Vec<Option<(f64, usize)>> {
    let mut sums = vec![0.0; spec.count];
    let mut counts = vec![0usize; spec.count];
    for t in trajs {
        let b = spec.bucket_of(t.response_len());
        sums[b] += t.reward;
        counts[b] += 1;
    }
    sums.iter()
        .zip(&counts)
        .map(|(&s, &c)| if c > 0 { Some((s / c as f64, c)) } else { None })
        .collect()
}

/// Centered moving average with the window clamped at the series edges.
pub fn moving_avg(series: &[f64], radius: usize) -> Vec<f64> {
    let n = series.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(radius);
            let hi = (i + radius).min(n.saturating_sub(1));
            let w = &series[lo..=hi];
            w.iter().sum::<f64>() / w.len() as f64
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub collapsed: bool,
    /// First step from which the smoothed series stays at or below the
    /// recovery threshold while sitting below the drop threshold.
    pub onset_step: Option<usize>,
    /// Minimum of the smoothed series (from the onset on, when collapsed).
    pub trough_value: f64,
}

/// Detects a sequence-length collapse: within the first `window` steps the
/// smoothed series (centered moving average, radius 2) falls below
/// `drop_frac · initial` and never exceeds `recovery_frac · initial` again.
pub fn detect_collapse(
    series: &[f64],
    drop_frac: f64,
    window: usize,
    recovery_frac: f64,
) -> Result<CollapseReport> {
    if series.is_empty() {
        return Err(Error::Data("collapse detector needs a nonempty series".into()));
    }
    let s = moving_avg(series, 2);
    let initial = s[0];
    let drop = drop_frac * initial;
    let recovery = recovery_frac * initial;
    // A step qualifies as onset when it is below the drop threshold and no
    // later step pokes above the recovery threshold. Scanning from just
    // past the last recovery-exceeding step makes the verdict monotone in
    // drop_frac: raising the threshold can only add qualifying onsets.
    let start = s.iter().rposition(|&v| v > recovery).map_or(0, |u| u + 1);
    let w = window.min(s.len());
    let onset = (start..w).find(|&t| s[t] < drop);
    let trough_value = match onset {
        Some(t) => s[t..].iter().cloned().fold(f64::INFINITY, f64::min),
        None => s.iter().cloned().fold(f64::INFINITY, f64::min),
    };
    Ok(CollapseReport { collapsed: onset.is_some(), onset_step: onset, trough_value })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HockeyStickReport {
    pub shaped: bool,
    /// Step of the smoothed global minimum (first occurrence on ties).
    pub min_step: usize,
    pub initial: f64,
    pub trough: f64,
    pub final_value: f64,
}

/// Detects a decline-trough-recovery reward curve: the smoothed global
/// minimum sits strictly after the start, at least `margin` below the
/// initial value, and the final value recovers at least `margin` above the
/// trough, where `margin = margin_frac · (smoothed range)`.
pub fn detect_hockey_stick(
    series: &[f64],
    radius: usize,
    margin_frac: f64,
) -> Result<HockeyStickReport> {
    if series.len() <= 2 * radius + 1 {
        return Err(Error::Data(format!(
            "series too short for hockey-stick smoothing radius {radius}: needs more than {} points, got {}",
            2 * radius + 1,
            series.len()
        )));
    }
    let s = moving_avg(series, radius);
    let mut min_step = 0;
    for (i, &v) in s.iter().enumerate() {
        if v < s[min_step] {
            min_step = i;
        }
    }
    let trough = s[min_step];
    let initial = s[0];
    let final_value = *s.last().unwrap();
    let hi = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let margin = margin_frac * (hi - trough);
    let shaped = min_step > 0 && trough < initial - margin && final_value > trough + margin;
    Ok(HockeyStickReport { shaped, min_step, initial, trough, final_value })
}

/// Detector thresholds, exposed so run configs can tighten or relax them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub drop_frac: f64,
    pub recovery_frac: f64,
    /// Collapse onset window as a fraction of the series length.
    pub window_frac: f64,
    /// Smoothing radius for the hockey-stick detector.
    pub hs_radius: usize,
    pub hs_margin_frac: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            drop_frac: 0.5,
            recovery_frac: 0.75,
            window_frac: 0.1,
            hs_radius: 2,
            hs_margin_frac: 0.05,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("drop_frac", self.drop_frac),
            ("recovery_frac", self.recovery_frac),
            ("window_frac", self.window_frac),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("{name} must be in (0, 1], got {v}")));
            }
        }
        if !(self.hs_margin_frac >= 0.0 && self.hs_margin_frac.is_finite()) {
            return Err(Error::Config("hs_margin_frac must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Collapse window in steps for a series of length `n`.
    pub fn window_steps(&self, n: usize) -> usize {
        ((self.window_frac * n as f64).ceil() as usize).max(1)
    }

    pub fn collapse(&self, mean_len: &[f64]) -> Result<CollapseReport> {
        detect_collapse(mean_len, self.drop_frac, self.window_steps(mean_len.len()), self.recovery_frac)
    }

    pub fn hockey_stick(&self, reward: &[f64]) -> Result<HockeyStickReport> {
        detect_hockey_stick(reward, self.hs_radius, self.hs_margin_frac)
    }
}

/// A named training record, as read back from a run directory.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSeries {
    pub name: String,
    pub metrics: Vec<StepMetrics>,
    /// Path of the manifest the series was loaded alongside, when known.
    pub manifest: Option<String>,
}

impl RunSeries {
    pub fn new(name: impl Into<String>, metrics: Vec<StepMetrics>, manifest: Option<String>) -> Result<Self> {
        let name = name.into();
        for pair in metrics.windows(2) {
            if pair[1].step <= pair[0].step {
                return Err(Error::Data(format!(
                    "run '{name}': step indices must be strictly increasing ({} then {})",
                    pair[0].step, pair[1].step
                )));
            }
        }
        Ok(RunSeries { name, metrics, manifest })
    }

    pub fn mean_len_series(&self) -> Vec<f64> {
        self.metrics.iter().map(|m| m.mean_len).collect()
    }

    pub fn mean_reward_series(&self) -> Vec<f64> {
        self.metrics.iter().map(|m| m.mean_reward).collect()
    }

    pub fn kl_series(&self) -> Vec<f64> {
        self.metrics.iter().map(|m| m.kl).collect()
    }
}

// ---------------------------------------------------------------- CSV I/O

/// Header line for the fixed metrics schema with `n_buckets` bucket columns.
pub fn metrics_csv_header(n_buckets: usize) -> String {
    let mut h = String::from("step,mean_len,kl,mean_reward,actor_loss,value_loss,clip_frac");
    for b in 0..n_buckets {
        let _ = write!(h, ",bucket_{b}");
    }
    h.push_str(",kl_seq");
    h
}

/// One CSV row. Floats use the shortest round-trip decimal form; absent
/// buckets become empty cells.
pub fn metrics_csv_row(m: &StepMetrics) -> String {
    let mut r = format!(
        "{},{},{},{},{},{},{}",
        m.step, m.mean_len, m.kl, m.mean_reward, m.actor_loss, m.value_loss, m.clip_frac
    );
    for b in &m.buckets {
        match b {
            Some(v) => {
                let _ = write!(r, ",{v}");
            }
            None => r.push(','),
        }
    }
    let _ = write!(r, ",{}", m.kl_seq);
    r
}

pub fn write_metrics_csv(path: &Path, metrics: &[StepMetrics]) -> Result<()> {
    let n_buckets = metrics.first().map_or(0, |m| m.buckets.len());
    let mut out = metrics_csv_header(n_buckets);
    out.push('\n');
    for m in metrics {
        if m.buckets.len() != n_buckets {
            return Err(Error::Data(format!(
                "step {}: expected {n_buckets} bucket columns, found {}",
                m.step,
                m.buckets.len()
            )));
        }
        out.push_str(&metrics_csv_row(m));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn parse_field(cell: &str, line: usize, col: &str) -> Result<f64> {
    cell.parse::<f64>()
        .map_err(|_| Error::Data(format!("metrics CSV line {line}: bad {col} value {cell:?}")))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<StepMetrics>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Data("metrics CSV is empty".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    const FIXED: [&str; 7] =
        ["step", "mean_len", "kl", "mean_reward", "actor_loss", "value_loss", "clip_frac"];
    if cols.len() < FIXED.len() + 1 || cols[..FIXED.len()] != FIXED || *cols.last().unwrap() != "kl_seq"
    {
        return Err(Error::Data(format!("unrecognized metrics CSV header {header:?}")));
    }
    let n_buckets = cols.len() - FIXED.len() - 1;
    for (b, col) in cols[FIXED.len()..FIXED.len() + n_buckets].iter().enumerate() {
        if *col != format!("bucket_{b}") {
            return Err(Error::Data(format!("unrecognized metrics CSV header {header:?}")));
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let ln = i + 1; // 1-based, matching editors
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != cols.len() {
            return Err(Error::Data(format!(
                "metrics CSV line {ln}: expected {} cells, found {}",
                cols.len(),
                cells.len()
            )));
        }
        let step = cells[0]
            .parse::<usize>()
            .map_err(|_| Error::Data(format!("metrics CSV line {ln}: bad step value {:?}", cells[0])))?;
        let mut buckets = Vec::with_capacity(n_buckets);
        for (b, cell) in cells[FIXED.len()..FIXED.len() + n_buckets].iter().enumerate() {
            if cell.is_empty() {
                buckets.push(None);
            } else {
                buckets.push(Some(parse_field(cell, ln, &format!("bucket_{b}"))?));
            }
        }
        out.push(StepMetrics {
            step,
            mean_len: parse_field(cells[1], ln, "mean_len")?,
            kl: parse_field(cells[2], ln, "kl")?,
            mean_reward: parse_field(cells[3], ln, "mean_reward")?,
            actor_loss: parse_field(cells[4], ln, "actor_loss")?,
            value_loss: parse_field(cells[5], ln, "value_loss")?,
            clip_frac: parse_field(cells[6], ln, "clip_frac")?,
            buckets,
            kl_seq: parse_field(cells.last().unwrap(), ln, "kl_seq")?,
        });
    }
    Ok(out)
}

// ------------------------------------------------------------- ratio sweep

/// Sweep comparison: one column per merge ratio, one row per summary metric.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub alphas: Vec<f64>,
    pub run_names: Vec<String>,
    pub final_mean_len: Vec<f64>,
    pub final_mean_reward: Vec<f64>,
    pub collapsed: Vec<bool>,
    pub hockey_stick: Vec<bool>,
    pub mean_kl: Vec<f64>,
}

/// Summarizes a set of runs keyed by merge ratio. Columns come out in
/// ascending α order regardless of input order.
pub fn compare_sweep(runs: &[(f64, &RunSeries)], det: &DetectorConfig) -> Result<SweepTable> {
    if runs.len() < 2 {
        return Err(Error::Config(format!(
            "sweep comparison needs at least 2 runs, got {}",
            runs.len()
        )));
    }
    det.validate()?;
    let mut order: Vec<usize> = (0..runs.len()).collect();
    order.sort_by(|&a, &b| runs[a].0.total_cmp(&runs[b].0));
    let mut seen = BTreeSet::new();
    for &i in &order {
        if !seen.insert(runs[i].0.to_bits()) {
            return Err(Error::Config(format!("duplicate merge ratio {} in sweep", runs[i].0)));
        }
    }
    let mut t = SweepTable {
        alphas: Vec::new(),
        run_names: Vec::new(),
        final_mean_len: Vec::new(),
        final_mean_reward: Vec::new(),
        collapsed: Vec::new(),
        hockey_stick: Vec::new(),
        mean_kl: Vec::new(),
    };
    for &i in &order {
        let (alpha, run) = &runs[i];
        if run.metrics.is_empty() {
            return Err(Error::Data(format!("run '{}' has no metrics rows", run.name)));
        }
        let last = run.metrics.last().unwrap();
        let lens = run.mean_len_series();
        let rewards = run.mean_reward_series();
        let collapse = det.collapse(&lens)?;
        let hockey = det
            .hockey_stick(&rewards)
            .map_err(|e| Error::Data(format!("run '{}': {e}", run.name)))?;
        t.alphas.push(*alpha);
        t.run_names.push(run.name.clone());
        t.final_mean_len.push(last.mean_len);
        t.final_mean_reward.push(last.mean_reward);
        t.collapsed.push(collapse.collapsed);
        t.hockey_stick.push(hockey.shaped);
        t.mean_kl
            .push(run.kl_series().iter().sum::<f64>() / run.metrics.len() as f64);
    }
    Ok(t)
}

impl SweepTable {
    fn rows(&self) -> Vec<(&'static str, Vec<String>)> {
        vec![
            ("run", self.run_names.clone()),
            ("final_mean_len", self.final_mean_len.iter().map(|v| format!("{v:.4}")).collect()),
            (
                "final_mean_reward",
                self.final_mean_reward.iter().map(|v| format!("{v:.4}")).collect(),
            ),
            ("collapsed", self.collapsed.iter().map(|v| v.to_string()).collect()),
            ("hockey_stick", self.hockey_stick.iter().map(|v| v.to_string()).collect()),
            ("mean_kl", self.mean_kl.iter().map(|v| format!("{v:.6}")).collect()),
        ]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric");
        for a in &self.alphas {
            let _ = write!(out, ",alpha_{a}");
        }
        out.push('\n');
        for (name, cells) in self.rows() {
            out.push_str(name);
            for c in cells {
                let _ = write!(out, ",{c}");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let headers: Vec<String> = self.alphas.iter().map(|a| format!("alpha={a}")).collect();
        let rows = self.rows();
        let name_w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max("metric".len());
        let mut col_w: Vec<usize> = headers.iter().map(|h| h.len()).collect();
        for (_, cells) in &rows {
            for (j, c) in cells.iter().enumerate() {
                col_w[j] = col_w[j].max(c.len());
            }
        }
        let mut out = format!("{:<name_w$}", "metric");
        for (h, w) in headers.iter().zip(&col_w) {
            let _ = write!(out, "  {h:>w$}");
        }
        out.push('\n');
        for (name, cells) in rows {
            let _ = write!(out, "{name:<name_w$}");
            for (c, w) in cells.iter().zip(&col_w) {
                let _ = write!(out, "  {c:>w$}");
            }
            out.push('\n');
        }
        out
    }
}

// --------------------------------------------------------------------------
// tests
// --------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn traj(len: usize, reward: f64) -> Trajectory {
        Trajectory {
            tokens: vec![1; 2 + len],
            prompt_len: 2,
            sampled_logps: vec![0.0; len],
            sampled_dists: Vec::new(),
            reward,
            values: vec![0.0; len],
            advantages: vec![0.0; len],
            returns: vec![0.0; len],
        }
    }

    // ------------------------------------------------------------ buckets

    #[test]
    fn single_short_trajectory_lands_in_bucket_zero() {
        let spec = BucketSpec::default();
        let got = bucket_rewards(&[traj(5, 0.7)], spec);
        assert_eq!(got[0], Some((0.7, 1)));
        assert!(got[1..].iter().all(|b| b.is_none()));
    }

    #[test]
    fn bucket_mean_averages_its_members() {
        let spec = BucketSpec::default();
        let got = bucket_rewards(&[traj(9, 0.2), traj(10, 0.8)], spec);
        // both lengths fall in bucket 1 = [8, 16): mean (0.2+0.8)/2 = 0.5
        assert_eq!(got[1], Some((0.5, 2)));
    }

    #[test]
    fn overlong_responses_clamp_into_last_bucket() {
        let spec = BucketSpec { width: 8, count: 4 };
        let got = bucket_rewards(&[traj(999, 1.0)], spec);
        assert_eq!(got[3], Some((1.0, 1)));
    }

    #[test]
    fn bucket_counts_match_brute_force_histogram() {
        let spec = BucketSpec::default();
        let top = spec.width * spec.count;
        let mut r = crate::rng::stream(7, crate::rng::Domain::DataGen, &[99]);
        let lens: Vec<usize> = (0..1000).map(|_| crate::rng::uniform_range(&mut r, top)).collect();
        let trajs: Vec<Trajectory> = lens.iter().map(|&l| traj(l.max(1), 1.0)).collect();
        let got = bucket_rewards(&trajs, spec);
        let mut hist = vec![0usize; spec.count];
        for &l in &lens {
            hist[l.max(1) / spec.width] += 1;
        }
        for (b, h) in hist.iter().enumerate() {
            assert_eq!(got[b].map_or(0, |(_, c)| c), *h, "bucket {b}");
        }
        // partition: every trajectory counted exactly once
        let total: usize = got.iter().filter_map(|b| b.map(|(_, c)| c)).sum();
        assert_eq!(total, trajs.len());
    }

    // ---------------------------------------------------------- smoothing

    #[test]
    fn moving_avg_clamps_at_edges() {
        let s = moving_avg(&[1.0, 2.0, 3.0, 4.0, 5.0], 1);
        assert_eq!(s, vec![1.5, 2.0, 3.0, 4.0, 4.5]);
        assert_eq!(moving_avg(&[7.0, 9.0], 0), vec![7.0, 9.0]);
    }

    // ---------------------------------------------------------- detectors

    #[test]
    fn constant_series_does_not_collapse() {
        let s = vec![100.0; 40];
        let rep = detect_collapse(&s, 0.5, 4, 0.75).unwrap();
        assert!(!rep.collapsed);
        assert_eq!(rep.onset_step, None);
        assert_eq!(rep.trough_value, 100.0);
    }

    #[test]
    fn hard_drop_without_recovery_collapses() {
        // long flat head so radius-2 smoothing keeps the initial at 100
        let mut s = vec![100.0; 6];
        s.extend(vec![20.0; 14]);
        let rep = detect_collapse(&s, 0.5, 10, 0.75).unwrap();
        assert!(rep.collapsed);
        // smoothed series first dips under 50 at index 7:
        // smoothed[7] = (100 + 20·4)/5 = 36
        assert_eq!(rep.onset_step, Some(7));
        assert!((rep.trough_value - 20.0).abs() < 1e-12);
    }

    #[test]
    fn recovery_above_threshold_defeats_collapse() {
        let mut s = vec![100.0; 6];
        s.extend(vec![40.0; 6]);
        s.extend(vec![90.0; 8]); // recovers past 75% of initial
        let rep = detect_collapse(&s, 0.5, 10, 0.75).unwrap();
        assert!(!rep.collapsed);
    }

    #[test]
    fn drop_outside_the_window_does_not_count() {
        let mut s = vec![100.0; 30];
        s.extend(vec![20.0; 10]);
        let rep = detect_collapse(&s, 0.5, 5, 0.75).unwrap();
        assert!(!rep.collapsed);
    }

    #[test]
    fn empty_series_is_rejected() {
        assert!(detect_collapse(&[], 0.5, 1, 0.75).is_err());
    }

    proptest! {
        // raising drop_frac can only add qualifying onsets, never remove them
        #[test]
        fn collapse_verdict_is_monotone_in_drop_frac(
            series in proptest::collection::vec(1.0f64..100.0, 5..60),
            d1 in 0.05f64..0.95,
            bump in 0.01f64..0.5,
        ) {
            let d2 = (d1 + bump).min(1.0);
            let window = series.len().div_ceil(10).max(1);
            let lo = detect_collapse(&series, d1, window, 0.75).unwrap();
            let hi = detect_collapse(&series, d2, window, 0.75).unwrap();
            prop_assert!(!lo.collapsed || hi.collapsed,
                "collapsed at drop_frac {d1} but not at {d2}");
        }
    }

    #[test]
    fn v_shaped_series_is_hockey_stick() {
        let rep = detect_hockey_stick(&[1.0, 0.4, 0.2, 0.5, 1.1], 1, 0.05).unwrap();
        assert!(rep.shaped);
        assert_eq!(rep.min_step, 2);
        // smoothed: [0.7, 8/15, 11/30, 0.6, 0.8]
        assert!((rep.trough - 11.0 / 30.0).abs() < 1e-12);
        assert!((rep.initial - 0.7).abs() < 1e-12);
        assert!((rep.final_value - 0.8).abs() < 1e-12);
    }

    #[test]
    fn monotone_series_are_not_hockey_sticks() {
        let inc: Vec<f64> = (0..20).map(|i| i as f64).collect();
        assert!(!detect_hockey_stick(&inc, 2, 0.05).unwrap().shaped);
        let dec: Vec<f64> = (0..20).map(|i| -(i as f64)).collect();
        let rep = detect_hockey_stick(&dec, 2, 0.05).unwrap();
        assert!(!rep.shaped); // trough is the final value: no recovery
        assert_eq!(rep.min_step, 19);
    }

    #[test]
    fn short_series_is_rejected_by_hockey_detector() {
        let err = detect_hockey_stick(&[1.0, 2.0, 3.0], 2, 0.05).unwrap_err();
        assert!(err.to_string().contains("short"), "{err}");
    }

    #[test]
    fn detector_config_window_is_a_ceil_fraction() {
        let det = DetectorConfig::default();
        assert_eq!(det.window_steps(100), 10);
        assert_eq!(det.window_steps(101), 11);
        assert_eq!(det.window_steps(3), 1);
        assert!(DetectorConfig { drop_frac: 0.0, ..Default::default() }.validate().is_err());
        assert!(DetectorConfig { window_frac: 1.5, ..Default::default() }.validate().is_err());
    }

    // ------------------------------------------------------------ CSV I/O

    fn sample_metrics() -> Vec<StepMetrics> {
        vec![
            StepMetrics {
                step: 0,
                mean_len: 63.25,
                kl: 0.012,
                mean_reward: 0.5108256237659907,
                actor_loss: -0.001,
                value_loss: 0.25,
                clip_frac: 0.125,
                buckets: vec![None, Some(0.75), None, Some(-0.3)],
                kl_seq: 0.875,
            },
            StepMetrics {
                step: 1,
                mean_len: 60.0,
                kl: 0.025,
                mean_reward: 0.625,
                actor_loss: 0.002,
                value_loss: 0.125,
                clip_frac: 0.0,
                buckets: vec![Some(1.0), None, None, None],
                kl_seq: 1.5,
            },
        ]
    }

    #[test]
    fn metrics_csv_roundtrips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let rows = sample_metrics();
        write_metrics_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "step,mean_len,kl,mean_reward,actor_loss,value_loss,clip_frac,\
             bucket_0,bucket_1,bucket_2,bucket_3,kl_seq"
        );
        // absent buckets are empty cells, not zeros
        assert_eq!(
            lines.next().unwrap(),
            "0,63.25,0.012,0.5108256237659907,-0.001,0.25,0.125,,0.75,,-0.3,0.875"
        );
        let back = read_metrics_csv(&path).unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn malformed_csv_reports_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(
            &path,
            format!("{}\n0,1,2,3,4,5,not_a_number,,1\n", metrics_csv_header(1)),
        )
        .unwrap();
        let err = read_metrics_csv(&path).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        std::fs::write(&path, "step,who,knows\n").unwrap();
        assert!(read_metrics_csv(&path).is_err());
    }

    // -------------------------------------------------------------- sweep

    fn run_with(name: &str, lens: &[f64], rewards: &[f64], kl: f64) -> RunSeries {
        let metrics = lens
            .iter()
            .zip(rewards)
            .enumerate()
            .map(|(i, (&l, &r))| StepMetrics {
                step: i,
                mean_len: l,
                kl,
                mean_reward: r,
                actor_loss: 0.0,
                value_loss: 0.0,
                clip_frac: 0.0,
                buckets: vec![None; 4],
                kl_seq: kl,
            })
            .collect();
        RunSeries::new(name, metrics, None).unwrap()
    }

    #[test]
    fn identical_runs_get_identical_columns() {
        let lens = vec![60.0; 12];
        let rewards: Vec<f64> = (0..12).map(|i| 0.1 * i as f64).collect();
        let a = run_with("a", &lens, &rewards, 0.02);
        let b = run_with("b", &lens, &rewards, 0.02);
        let t = compare_sweep(&[(0.3, &a), (0.7, &b)], &DetectorConfig::default()).unwrap();
        assert_eq!(t.alphas, vec![0.3, 0.7]);
        assert_eq!(t.final_mean_len[0], t.final_mean_len[1]);
        assert_eq!(t.final_mean_reward[0], t.final_mean_reward[1]);
        assert_eq!(t.collapsed[0], t.collapsed[1]);
        assert_eq!(t.mean_kl[0], t.mean_kl[1]);
    }

    #[test]
    fn sweep_sorts_ratios_and_sizes_the_table() {
        let lens = vec![60.0; 12];
        let rewards: Vec<f64> = (0..12).map(|i| 0.1 * i as f64).collect();
        let runs: Vec<RunSeries> = (1..=9)
            .map(|i| run_with(&format!("r{i}"), &lens, &rewards, 0.01))
            .collect();
        let keyed: Vec<(f64, &RunSeries)> = (1..=9)
            .rev() // deliberately unsorted input
            .map(|i| (i as f64 / 10.0, &runs[i - 1]))
            .collect();
        let t = compare_sweep(&keyed, &DetectorConfig::default()).unwrap();
        assert_eq!(t.alphas.len(), 9);
        assert!(t.alphas.windows(2).all(|w| w[0] < w[1]));
        let csv = t.to_csv();
        let header = csv.lines().next().unwrap();
        assert_eq!(header.split(',').count(), 10); // metric + 9 ratio columns
        assert!(header.starts_with("metric,alpha_0.1,alpha_0.2"));
        assert_eq!(csv.lines().count(), 7); // header + 6 metric rows
        let text = t.to_text();
        assert!(text.lines().count() == 7 && text.contains("final_mean_len"));
    }

    #[test]
    fn sweep_rejects_duplicates_and_empty_runs() {
        let lens = vec![60.0; 12];
        let rewards = vec![0.5; 12];
        let a = run_with("a", &lens, &rewards, 0.02);
        let b = run_with("b", &lens, &rewards, 0.02);
        let err =
            compare_sweep(&[(0.3, &a), (0.3, &b)], &DetectorConfig::default()).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");

        let empty = RunSeries::new("hollow", Vec::new(), None).unwrap();
        let err = compare_sweep(&[(0.1, &a), (0.2, &empty)], &DetectorConfig::default())
            .unwrap_err();
        assert!(err.to_string().contains("hollow"), "{err}");

        assert!(compare_sweep(&[(0.5, &a)], &DetectorConfig::default()).is_err());
    }

    #[test]
    fn run_series_requires_increasing_steps() {
        let mut m = sample_metrics();
        m[1].step = 0;
        assert!(RunSeries::new("dup", m, None).is_err());
    }
}
