//! Geweke-statistic batch procedure deciding chain stationarity.
//!
//! For a window of `M` iterations starting at offset `w * B`, every
//! monitored coordinate gets a z-score comparing the mean of the first 10%
//! of the window against the mean of its last 50%, standardized by plain
//! sample variances. The window is stationary when the summed squared
//! z-scores fall below `epsilon * P`. The driver advances `B` by one every
//! `w` iterations until the check passes.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::stem::ChainHistory;

pub const GEWEKE_FRAC_FIRST: f64 = 0.10;
pub const GEWEKE_FRAC_LAST: f64 = 0.50;

/// Outcome of one stationarity check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GewekeReport {
    /// Per-coordinate z-scores over the window.
    pub z: Vec<f64>,
    /// Sum of squared z-scores.
    pub statistic: f64,
    /// `epsilon * P` with `P` the number of monitored coordinates.
    pub threshold: f64,
    pub stationary: bool,
    /// Batch counter `B`; the window is `[w*B, w*B + M)` (0-based).
    pub batch_index: usize,
    pub window_start: usize,
    pub window_len: usize,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() < 2 {
        0.0
    } else {
        xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
    };
    (mean, var)
}

/// Standardized mean difference between the first `frac_first` and last
/// `frac_last` portions of `series`. A series whose two windows are both
/// exactly constant scores zero by convention.
pub fn geweke_z(series: &[f64], frac_first: f64, frac_last: f64) -> Result<f64> {
    if series.len() < 20 {
        return Err(Error::InvalidInput(format!(
            "geweke_z needs at least 20 points, got {}",
            series.len()
        )));
    }
    if !(0.0..=1.0).contains(&frac_first)
        || !(0.0..=1.0).contains(&frac_last)
        || frac_first + frac_last > 1.0
    {
        return Err(Error::InvalidInput(
            "window fractions must be in [0, 1] and sum to at most 1".into(),
        ));
    }
    let n = series.len();
    let n_first = ((n as f64 * frac_first).floor() as usize).max(1);
    let n_last = ((n as f64 * frac_last).floor() as usize).max(1);
    let (m1, v1) = mean_var(&series[..n_first]);
    let (m2, v2) = mean_var(&series[n - n_last..]);
    if v1 == 0.0 && v2 == 0.0 {
        return Ok(0.0);
    }
    Ok((m1 - m2) / (v1 / n_first as f64 + v2 / n_last as f64).sqrt())
}

/// Checks the window `[w*B, w*B + M)` of the chain for stationarity.
pub fn stationarity_check(
    history: &ChainHistory,
    m: usize,
    b: usize,
    w: usize,
    epsilon: f64,
) -> Result<GewekeReport> {
    if m < 20 {
        return Err(Error::InvalidConfig(format!(
            "batch size M must be at least 20, got {m}"
        )));
    }
    if epsilon <= 0.0 {
        return Err(Error::InvalidConfig("epsilon must be positive".into()));
    }
    let start = w * b;
    if start + m > history.len() {
        return Err(Error::InvalidInput(format!(
            "window [{start}, {}) exceeds chain length {}",
            start + m,
            history.len()
        )));
    }
    let p = history.index().len();
    let mut z = Vec::with_capacity(p);
    let mut statistic = 0.0;
    for coord in 0..p {
        let series = history.coordinate_window(coord, start, m);
        let zp = geweke_z(&series, GEWEKE_FRAC_FIRST, GEWEKE_FRAC_LAST)?;
        statistic += zp * zp;
        z.push(zp);
    }
    let threshold = epsilon * p as f64;
    Ok(GewekeReport {
        z,
        statistic,
        threshold,
        stationary: statistic < threshold,
        batch_index: b,
        window_start: start,
        window_len: m,
    })
}
