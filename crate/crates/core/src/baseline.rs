//! Empirical change-point pipeline: treatment detection from consecutive
//! viral-load pairs, rebound trimming, random assignment for non-detected
//! subjects, and the baseline model fit.
//!
//! The baseline treats its empirical change points as known (frozen latent
//! change points), replaces censored values with half the detection limit
//! on the natural scale, and fits the remaining parameters with the same
//! StEM engine sampling only the effect blocks. Its output doubles as the
//! canonical initializer for the full fit.

use nalgebra::DVector;
use rand::distr::OpenClosed01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{
    LatentTransform, LatentState, ModelSpec, ObservationRecord, SubjectData, Theta,
};
use crate::samplers::{GibbsConfig, SweepPlan};
use crate::stem::{pool_estimates, stem_run_with_plan, Pooled, StemConfig, StemInit, StemRun};

/// Knobs for the empirical detector.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Log1PlusConfig {
    /// Maximum gap (years) for the drop criterion; three months by default.
    pub window_width: f64,
    /// Required drop in log10 units within the window.
    pub drop_threshold: f64,
    /// Non-detected subjects get a change point drawn uniformly within this
    /// many years past their last report.
    pub nondetected_horizon: f64,
}

impl Default for Log1PlusConfig {
    fn default() -> Self {
        Self {
            window_width: 0.25,
            drop_threshold: 1.0,
            nondetected_horizon: 1.0,
        }
    }
}

impl Log1PlusConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.window_width > 0.0) {
            return Err(Error::InvalidConfig("window_width must be positive".into()));
        }
        if !(self.drop_threshold > 0.0) {
            return Err(Error::InvalidConfig(
                "drop_threshold must be positive".into(),
            ));
        }
        if !(self.nondetected_horizon > 0.0) {
            return Err(Error::InvalidConfig(
                "nondetected_horizon must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// A detected treatment-start pair: record indices and the change point at
/// the pair's first reporting time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArtDetection {
    pub first: usize,
    pub second: usize,
    pub change_point: f64,
}

/// Scans consecutive record pairs in time order and returns the first pair
/// where either the value drops by more than the threshold within the
/// window, or a detectable value is followed by a censored one (the latter
/// with no gap restriction).
pub fn detect_art(subject: &SubjectData, cfg: &Log1PlusConfig) -> Option<ArtDetection> {
    let records = subject.records();
    for j in 0..records.len() - 1 {
        let r0 = &records[j];
        let r1 = &records[j + 1];
        let drop_hit =
            r1.time - r0.time <= cfg.window_width && r0.value - r1.value > cfg.drop_threshold;
        let censor_hit = !r0.censored && r1.censored;
        if drop_hit || censor_hit {
            return Some(ArtDetection {
                first: j,
                second: j + 1,
                change_point: r0.time,
            });
        }
    }
    None
}

/// Keeps everything up to and including the detecting pair, then extends
/// record by record until viral rebound: a value larger than its
/// predecessor, or an undetectable-to-detectable flip.
pub fn trim_to_rebound(subject: &SubjectData, detection: &ArtDetection) -> SubjectData {
    let records = subject.records();
    let mut keep: Vec<ObservationRecord> = records[..=detection.second].to_vec();
    for k in detection.second + 1..records.len() {
        let prev = &records[k - 1];
        let cur = &records[k];
        let rebound = cur.value > prev.value || (prev.censored && !cur.censored);
        if rebound {
            break;
        }
        keep.push(cur.clone());
    }
    SubjectData::new(subject.id.clone(), keep).expect("trimmed prefix keeps the detecting pair")
}

/// Change point for a subject with no detection: a uniform draw in
/// `(last report, last report + horizon]`.
pub fn assign_nondetected_changepoint<R: Rng + ?Sized>(
    subject: &SubjectData,
    cfg: &Log1PlusConfig,
    rng: &mut R,
) -> f64 {
    let u: f64 = rng.sample(OpenClosed01);
    subject.last_time() + u * cfg.nondetected_horizon
}

/// Per-subject empirical change point.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalChangePoint {
    pub id: String,
    pub time: f64,
    pub detected: bool,
}

#[derive(Debug, Clone)]
pub struct BaselineFit {
    /// Pooled estimates of the baseline model.
    pub pooled: Pooled,
    pub run: StemRun,
    pub change_points: Vec<EmpiricalChangePoint>,
    /// Parameters and warm latent states for the full StEM fit on the
    /// original (untrimmed, censored) data.
    pub stem_init: StemInit,
}

/// Change points below this are floored before the log transform; a
/// detection at t = 0 would otherwise map to an infinite latent value.
const MIN_CHANGEPOINT_YEARS: f64 = 1.0 / 365.25;

fn latent_changepoint(time: f64) -> f64 {
    time.max(MIN_CHANGEPOINT_YEARS).ln()
}

/// Inverse of a latent transform, clamping the domain where needed.
fn to_latent(natural: f64, transform: LatentTransform) -> f64 {
    match transform {
        LatentTransform::Identity => natural,
        LatentTransform::Exponential => natural.max(1e-6).ln(),
    }
}

/// Moment-based starting parameters from the empirically split segments.
/// Crude by design; the chain refines them.
fn empirical_theta_init(
    data: &[SubjectData],
    change_points: &[EmpiricalChangePoint],
    spec: &ModelSpec,
) -> Theta {
    let mut pre_slopes = Vec::new();
    let mut first_post = Vec::new();
    let mut last_post = Vec::new();
    let mut slow_rates = Vec::new();

    for (subject, cp) in data.iter().zip(change_points) {
        let pre: Vec<&ObservationRecord> = subject
            .records()
            .iter()
            .filter(|r| r.time < cp.time)
            .collect();
        let post: Vec<&ObservationRecord> = subject
            .records()
            .iter()
            .filter(|r| r.time >= cp.time)
            .collect();
        if pre.len() >= 2 {
            // Least-squares slope against (t - cp).
            let n = pre.len() as f64;
            let mx = pre.iter().map(|r| r.time - cp.time).sum::<f64>() / n;
            let my = pre.iter().map(|r| r.value).sum::<f64>() / n;
            let sxx: f64 = pre.iter().map(|r| (r.time - cp.time - mx).powi(2)).sum();
            if sxx > 0.0 {
                let sxy: f64 = pre
                    .iter()
                    .map(|r| (r.time - cp.time - mx) * (r.value - my))
                    .sum();
                pre_slopes.push(sxy / sxx);
            }
        }
        if let (Some(f), Some(l)) = (post.first(), post.last()) {
            first_post.push(f.value);
            last_post.push(l.value);
        }
        if post.len() >= 2 {
            let a = post[post.len() - 2];
            let b = post[post.len() - 1];
            let dt = b.time - a.time;
            if dt > 0.0 {
                let rate = std::f64::consts::LN_10 * (a.value - b.value) / dt;
                slow_rates.push(rate.clamp(0.05, 3.0));
            }
        }
    }

    let median = |xs: &mut Vec<f64>, fallback: f64| -> f64 {
        if xs.is_empty() {
            return fallback;
        }
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        xs[xs.len() / 2]
    };
    let slope = median(&mut pre_slopes, 0.0);
    let v_start = median(&mut first_post, 4.5);
    let v_end = median(&mut last_post, 1.8).min(v_start - 0.5);
    let slow = median(&mut slow_rates, 0.2);

    let ln10 = std::f64::consts::LN_10;
    let beta_nat: Vec<f64> = match spec.post {
        crate::model::PostSegment::BiExponential => {
            // Fast phase carries the level at the change point, slow phase
            // the tail; a fast decay of ~25/yr empties in about a month.
            vec![(ln10 * v_start).exp(), 25.0, (ln10 * v_end).exp(), slow]
        }
        crate::model::PostSegment::OneCompartment => {
            vec![(ln10 * v_end).exp(), (ln10 * v_start).exp(), 5.0]
        }
    };
    let beta = DVector::from_iterator(
        beta_nat.len(),
        beta_nat
            .iter()
            .zip(&spec.post_transforms)
            .map(|(&b, t)| to_latent(b, *t)),
    );
    let alpha = DVector::from_iterator(
        spec.pre_dim(),
        std::iter::once(to_latent(slope, spec.pre_transforms[0])),
    );

    let n = change_points.len() as f64;
    let taus: Vec<f64> = change_points
        .iter()
        .map(|c| latent_changepoint(c.time))
        .collect();
    let tau_mean = taus.iter().sum::<f64>() / n;
    let tau_var = (taus.iter().map(|t| (t - tau_mean).powi(2)).sum::<f64>() / n).max(0.04);

    Theta {
        alpha,
        beta,
        tau_mean,
        tau_var,
        a_cov: nalgebra::DMatrix::from_diagonal(&DVector::from_element(spec.pre_dim(), 0.01)),
        b_cov: nalgebra::DMatrix::from_diagonal(&DVector::from_element(spec.post_dim(), 0.25)),
        sigma_e2: 0.25,
    }
}

/// The full baseline pipeline. Detection and trimming run per subject, the
/// change points freeze into latent values, censored records become
/// pseudo-observed at half the detection limit
/// (`d + log10(0.5)` in log10 units), and the effect blocks are fit by the
/// frozen-change-point StEM run.
pub fn baseline_fit(
    data: &[SubjectData],
    cfg: &Log1PlusConfig,
    spec: &ModelSpec,
    stem_cfg: &StemConfig,
    gibbs_cfg: &GibbsConfig,
) -> Result<BaselineFit> {
    cfg.validate()?;
    if data.len() < 2 {
        return Err(Error::DegenerateSample(format!(
            "baseline fit needs at least 2 subjects, got {}",
            data.len()
        )));
    }
    if spec.tau_transform != LatentTransform::Exponential {
        return Err(Error::InvalidConfig(
            "the empirical baseline assumes a log-scale change point".into(),
        ));
    }

    // Stream 0 of the master seed drives the per-subject random
    // assignments; subject sweeps use streams 1.. inside the engine.
    let mut rng = ChaCha8Rng::seed_from_u64(gibbs_cfg.rng_seed);
    rng.set_stream(0);

    let half_limit = (0.5f64).log10();
    let mut change_points = Vec::with_capacity(data.len());
    let mut fit_data = Vec::with_capacity(data.len());
    for subject in data {
        let (trimmed, cp) = match detect_art(subject, cfg) {
            Some(det) => (
                trim_to_rebound(subject, &det),
                EmpiricalChangePoint {
                    id: subject.id.clone(),
                    time: det.change_point,
                    detected: true,
                },
            ),
            None => (
                subject.clone(),
                EmpiricalChangePoint {
                    id: subject.id.clone(),
                    time: assign_nondetected_changepoint(subject, cfg, &mut rng),
                    detected: false,
                },
            ),
        };
        // Half-limit imputation: the censored rows enter the baseline fit
        // as if observed.
        let records: Vec<ObservationRecord> = trimmed
            .records()
            .iter()
            .map(|r| {
                if r.censored {
                    ObservationRecord::observed(
                        r.time,
                        r.detection_limit + half_limit,
                        r.detection_limit,
                    )
                } else {
                    r.clone()
                }
            })
            .collect();
        fit_data.push(SubjectData::new(trimmed.id.clone(), records)?);
        change_points.push(cp);
    }

    let theta0 = empirical_theta_init(&fit_data, &change_points, spec);
    let latents0: Vec<LatentState> = change_points
        .iter()
        .map(|cp| {
            LatentState::new(
                latent_changepoint(cp.time),
                theta0.alpha.clone(),
                theta0.beta.clone(),
            )
        })
        .collect();

    let init = StemInit {
        theta: theta0,
        latents: latents0.clone(),
    };
    let run = stem_run_with_plan(
        &fit_data,
        &init,
        spec,
        stem_cfg,
        gibbs_cfg,
        SweepPlan::frozen_changepoint(),
    )?;
    debug_assert!(run
        .final_latents
        .iter()
        .zip(&latents0)
        .all(|(a, b)| a.tau == b.tau && a.imputed == b.imputed));

    let m = stem_cfg.batch_size_m.min(run.history.len());
    let pooled = pool_estimates(&run.history, m)?;

    // Warm start for the full fit: empirical change points, final baseline
    // effect draws, half-limit imputations on the original censored rows.
    let theta_init = pooled.theta()?;
    let latents: Vec<LatentState> = data
        .iter()
        .zip(&run.final_latents)
        .zip(&change_points)
        .map(|((subject, warm), cp)| {
            let mut s = LatentState::new(
                latent_changepoint(cp.time),
                warm.pre.clone(),
                warm.post.clone(),
            );
            for (j, r) in subject.records().iter().enumerate() {
                if r.censored {
                    s.imputed.insert(j, r.detection_limit + half_limit);
                }
            }
            s
        })
        .collect();

    Ok(BaselineFit {
        pooled,
        run,
        change_points,
        stem_init: StemInit {
            theta: theta_init,
            latents,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cfg() -> Log1PlusConfig {
        Log1PlusConfig::default()
    }

    fn subject(records: Vec<ObservationRecord>) -> SubjectData {
        SubjectData::new("s", records).unwrap()
    }

    #[test]
    fn detects_a_big_drop_within_the_window() {
        let s = subject(vec![
            ObservationRecord::observed(0.1, 5.0, 2.0),
            ObservationRecord::observed(0.2, 3.5, 2.0),
        ]);
        let det = detect_art(&s, &cfg()).unwrap();
        assert_eq!((det.first, det.second), (0, 1));
        assert_abs_diff_eq!(det.change_point, 0.1, epsilon = 1e-15);
    }

    #[test]
    fn ignores_a_small_drop() {
        let s = subject(vec![
            ObservationRecord::observed(0.1, 5.0, 2.0),
            ObservationRecord::observed(0.2, 4.5, 2.0),
        ]);
        assert!(detect_art(&s, &cfg()).is_none());
    }

    #[test]
    fn ignores_a_big_drop_outside_the_window() {
        let s = subject(vec![
            ObservationRecord::observed(0.1, 5.0, 2.0),
            ObservationRecord::observed(0.5, 3.5, 2.0),
        ]);
        assert!(detect_art(&s, &cfg()).is_none());
    }

    #[test]
    fn detects_a_censoring_transition_at_any_gap() {
        let s = subject(vec![
            ObservationRecord::observed(0.1, 2.4, 2.0),
            ObservationRecord::censored_at(1.2, 2.0),
        ]);
        let det = detect_art(&s, &cfg()).unwrap();
        assert_abs_diff_eq!(det.change_point, 0.1, epsilon = 1e-15);
    }

    #[test]
    fn censored_to_censored_is_not_a_transition() {
        let s = subject(vec![
            ObservationRecord::censored_at(0.1, 2.0),
            ObservationRecord::censored_at(0.5, 2.0),
        ]);
        assert!(detect_art(&s, &cfg()).is_none());
    }

    fn detected(records: Vec<ObservationRecord>) -> (SubjectData, ArtDetection) {
        let s = SubjectData::new("t", records).unwrap();
        let det = detect_art(&s, &cfg()).unwrap();
        (s, det)
    }

    #[test]
    fn trim_keeps_a_monotone_tail() {
        let (s, det) = detected(vec![
            ObservationRecord::observed(0.1, 5.0, 2.0),
            ObservationRecord::observed(0.2, 3.5, 2.0),
            ObservationRecord::observed(0.5, 3.0, 2.0),
            ObservationRecord::censored_at(0.9, 2.0),
            ObservationRecord::censored_at(1.4, 2.0),
        ]);
        let trimmed = trim_to_rebound(&s, &det);
        assert_eq!(trimmed.len(), 5);
    }

    #[test]
    fn trim_stops_before_a_larger_value() {
        let (s, det) = detected(vec![
            ObservationRecord::observed(0.1, 5.0, 2.0),
            ObservationRecord::observed(0.2, 3.5, 2.0),
            ObservationRecord::observed(0.5, 3.0, 2.0),
            ObservationRecord::observed(0.9, 3.4, 2.0),
        ]);
        let trimmed = trim_to_rebound(&s, &det);
        assert_eq!(trimmed.len(), 3);
        assert_abs_diff_eq!(trimmed.records()[2].value, 3.0, epsilon = 1e-15);
    }

    #[test]
    fn trim_stops_before_an_undetectable_to_detectable_flip() {
        let (s, det) = detected(vec![
            ObservationRecord::observed(0.1, 5.0, 2.0),
            ObservationRecord::observed(0.2, 3.5, 2.0),
            ObservationRecord::censored_at(0.6, 2.0),
            // Lower than the limit value, but a flip back to detectable.
            ObservationRecord::observed(1.0, 1.5, 2.0),
        ]);
        let trimmed = trim_to_rebound(&s, &det);
        assert_eq!(trimmed.len(), 3);
    }

    #[test]
    fn trim_never_reorders_or_invents_records() {
        let (s, det) = detected(vec![
            ObservationRecord::observed(0.1, 5.0, 2.0),
            ObservationRecord::observed(0.2, 3.5, 2.0),
            ObservationRecord::observed(0.7, 2.8, 2.0),
            ObservationRecord::observed(1.1, 2.9, 2.0),
            ObservationRecord::observed(1.5, 2.0, 2.0),
        ]);
        let trimmed = trim_to_rebound(&s, &det);
        assert_eq!(trimmed.records(), &s.records()[..trimmed.len()]);
    }

    #[test]
    fn nondetected_assignment_stays_in_range_and_replays() {
        use rand::SeedableRng;
        let s = subject(vec![
            ObservationRecord::observed(0.5, 4.0, 2.0),
            ObservationRecord::observed(2.0, 4.2, 2.0),
        ]);
        let c = cfg();
        let mut r1 = ChaCha8Rng::seed_from_u64(77);
        let mut r2 = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..1000 {
            let t = assign_nondetected_changepoint(&s, &c, &mut r1);
            assert!(t > 2.0 && t <= 3.0);
            assert_eq!(t, assign_nondetected_changepoint(&s, &c, &mut r2));
        }
        let tight = Log1PlusConfig {
            nondetected_horizon: 1e-9,
            ..c
        };
        let t = assign_nondetected_changepoint(&s, &tight, &mut r1);
        assert_abs_diff_eq!(t, 2.0, epsilon = 1e-8);
    }
}
