//! Utilization and ratio-tail diagnostics, windowed aggregation and the
//! per-update metric row.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::replay::VersionGap;
use crate::stats::{mean, median, nearest_rank, population_std};

/// One sample's contribution to a policy update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContributionRecord {
    pub ratio: f64,
    pub multiplier: f64,
    pub advantage: f64,
    pub gap: VersionGap,
}

impl ContributionRecord {
    /// `u = |m * A|`.
    pub fn contribution(&self) -> f64 {
        (self.multiplier * self.advantage).abs()
    }
}

/// Thresholds for the utilization fractions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtilizationThresholds {
    /// Absolute near-zero cut on `u`. When absent, `1e-3` times the median
    /// of the nonzero contributions in the batch.
    #[serde(default)]
    pub tau_u: Option<f64>,
    /// Suppression cut on `|m|`.
    #[serde(default = "default_tau_m")]
    pub tau_m: f64,
}

fn default_tau_m() -> f64 {
    1e-2
}

/// Relative factor used for the default near-zero cut.
pub const TAU_U_RELATIVE: f64 = 1e-3;

impl Default for UtilizationThresholds {
    fn default() -> Self {
        Self {
            tau_u: None,
            tau_m: default_tau_m(),
        }
    }
}

impl UtilizationThresholds {
    /// The near-zero cut to use for contributions `u`.
    pub fn resolve_tau_u(&self, u: &[f64]) -> f64 {
        self.tau_u.unwrap_or_else(|| {
            let nonzero: Vec<f64> = u.iter().copied().filter(|v| *v > 0.0).collect();
            median(&nonzero).map_or(0.0, |m| TAU_U_RELATIVE * m)
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UtilizationReport {
    pub near_zero_frac: f64,
    pub dead_frac: f64,
    pub suppressed_frac: f64,
    /// Share of total contribution carried by stale samples.
    pub share_old: f64,
    /// Effective sample size of the stale samples' normalised contributions;
    /// absent when there are no stale samples or they contribute nothing.
    pub ess_old: Option<f64>,
    pub ess_old_normalized: Option<f64>,
    pub n_old: usize,
    pub d95: f64,
    pub tau_u: f64,
}

/// Sum in ascending order so results do not depend on batch order.
fn sorted_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.into_iter().sum()
}

pub fn utilization(
    batch: &[ContributionRecord],
    thresholds: &UtilizationThresholds,
    t_old: u64,
) -> Result<UtilizationReport> {
    if batch.is_empty() {
        return Err(domain("utilization of an empty batch"));
    }
    if thresholds.tau_u.is_some_and(|t| !(t > 0.0)) || !(thresholds.tau_m >= 0.0) {
        return Err(domain("tau_u must be positive and tau_m nonnegative"));
    }
    let n = batch.len() as f64;
    let u: Vec<f64> = batch.iter().map(ContributionRecord::contribution).collect();
    let tau_u = thresholds.resolve_tau_u(&u);
    let frac = |count: usize| count as f64 / n;

    let dead = batch.iter().filter(|r| r.multiplier == 0.0).count();
    let suppressed = batch
        .iter()
        .filter(|r| r.multiplier.abs() > 0.0 && r.multiplier.abs() <= thresholds.tau_m)
        .count();
    let near_zero = u.iter().filter(|&&v| v <= tau_u).count();

    let is_old = |r: &ContributionRecord| r.gap.get() >= t_old;
    let old_u: Vec<f64> = batch
        .iter()
        .zip(&u)
        .filter(|(r, _)| is_old(r))
        .map(|(_, v)| *v)
        .collect();
    let total = sorted_sum(u.iter().copied());
    let old_total = sorted_sum(old_u.iter().copied());
    let share_old = if total > 0.0 { old_total / total } else { 0.0 };
    let ess_old = (old_total > 0.0).then(|| 1.0 / sorted_sum(old_u.iter().map(|v| (v / old_total).powi(2))));

    let ratios: Vec<f64> = batch.iter().map(|r| r.ratio).collect();
    Ok(UtilizationReport {
        near_zero_frac: frac(near_zero),
        dead_frac: frac(dead),
        suppressed_frac: frac(suppressed),
        share_old,
        ess_old,
        ess_old_normalized: ess_old.map(|e| e / old_u.len() as f64),
        n_old: old_u.len(),
        d95: tail_drift(&ratios)?,
        tau_u,
    })
}

/// Nearest-rank 0.95 quantile of `|ln rho|`.
pub fn tail_drift(ratios: &[f64]) -> Result<f64> {
    if ratios.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
        return Err(domain("ratios must be positive and finite"));
    }
    let abs_log: Vec<f64> = ratios.iter().map(|r| r.ln().abs()).collect();
    nearest_rank(&abs_log, 0.95).ok_or_else(|| domain("tail drift of an empty batch"))
}

/// Default trailing window: the last 20% of environment steps.
pub const DEFAULT_WINDOW_FRAC: f64 = 0.2;

/// Mean of the values whose step is at least `(1 - window_frac) * max_step`.
pub fn window_mean(series: &[(u64, f64)], window_frac: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&window_frac) {
        return Err(domain(format!("window fraction must lie in [0, 1], got {window_frac}")));
    }
    let max_step = series
        .iter()
        .map(|(s, _)| *s)
        .max()
        .ok_or_else(|| domain("window mean of an empty series"))?;
    let cut = (1.0 - window_frac) * max_step as f64;
    let values: Vec<f64> = series
        .iter()
        .filter(|(s, _)| *s as f64 >= cut)
        .map(|(_, v)| *v)
        .collect();
    Ok(mean(&values).expect("max point is always inside the window"))
}

/// Mean and population standard deviation across tasks.
pub fn cross_task_aggregate(per_task: &[f64]) -> Result<(f64, f64)> {
    match (mean(per_task), population_std(per_task)) {
        (Some(m), Some(s)) => Ok((m, s)),
        _ => Err(domain("aggregate over zero tasks")),
    }
}

/// One row of the per-update metric stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub env_steps: u64,
    pub method: String,
    pub sigma: Option<f64>,
    pub old_frac: f64,
    pub old_gap_p95: f64,
    pub d95: f64,
    pub dead_frac: f64,
    pub suppressed_frac: f64,
    pub near_zero_frac: f64,
    pub share_old: f64,
    pub ess_old_norm: Option<f64>,
    pub kl_to_behavior: f64,
    pub avg_return: Option<f64>,
}

pub const METRIC_COLUMNS: [&str; 14] = [
    "step",
    "env_steps",
    "method",
    "sigma",
    "old_frac",
    "old_gap_p95",
    "d95",
    "dead_frac",
    "suppressed_frac",
    "near_zero_frac",
    "share_old",
    "ess_old_norm",
    "kl_to_behavior",
    "avg_return",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricRow {
    pub fn write_header<W: Write>(mut out: W) -> Result<()> {
        writeln!(out, "{}", METRIC_COLUMNS.join(","))?;
        Ok(())
    }

    /// Writes the row with shortest round-trip float formatting; absent
    /// values become empty fields.
    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.env_steps,
            self.method,
            opt(self.sigma),
            self.old_frac,
            self.old_gap_p95,
            self.d95,
            self.dead_frac,
            self.suppressed_frac,
            self.near_zero_frac,
            self.share_old,
            opt(self.ess_old_norm),
            self.kl_to_behavior,
            opt(self.avg_return),
        )?;
        Ok(())
    }
}
