//! Synthetic surveillance-style data: exponential reporting times, model
//! trajectories with log-normal effects, and random left-censoring below a
//! detection limit.

use nalgebra::{DMatrix, DVector};
use rand::distr::OpenClosed01;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{
    eval_mean, LatentState, ModelSpec, ObservationRecord, SubjectData, Theta,
};

/// One benchmark scenario: data-generation knobs plus the generating truth.
#[derive(Debug, Clone)]
pub struct SimScenario {
    pub n_subjects: usize,
    /// Reporting-rate parameter: inter-report gaps are Exp(xi).
    pub xi: f64,
    /// Observation horizon in years.
    pub horizon: f64,
    /// Overall fraction of records to censor (drawn from below-limit ones).
    pub censor_rate: f64,
    pub detection_limit_log10: f64,
    pub theta_true: Theta,
    pub n_replicates: usize,
    pub rng_seed: u64,
}

impl SimScenario {
    /// Desk-scale defaults with the published fit as the generating truth.
    pub fn desk_default(spec: &ModelSpec) -> Self {
        Self {
            n_subjects: 100,
            xi: 1.45,
            horizon: 3.0,
            censor_rate: 0.0,
            detection_limit_log10: 200f64.log10(),
            theta_true: default_truth(spec),
            n_replicates: 10,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_subjects < 2 {
            return Err(Error::InvalidConfig("n_subjects must be at least 2".into()));
        }
        if !(self.xi > 0.0) {
            return Err(Error::InvalidConfig("xi must be positive".into()));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::InvalidConfig("horizon must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.censor_rate) {
            return Err(Error::InvalidConfig(
                "censor_rate must lie in [0, 1)".into(),
            ));
        }
        if self.n_replicates < 1 {
            return Err(Error::InvalidConfig(
                "n_replicates must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Projects a symmetric matrix onto the positive-definite cone by clipping
/// eigenvalues from below.
fn clip_spd(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let clipped = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|l| l.max(floor)),
    );
    &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose()
}

/// The published parameter estimates used as generating truth. The reported
/// post-effect covariance is indefinite after rounding, so its eigenvalues
/// are clipped at 0.01 (entry changes stay below the table's print
/// precision).
pub fn default_truth(spec: &ModelSpec) -> Theta {
    match spec.post {
        crate::model::PostSegment::BiExponential => {
            let b_raw = DMatrix::from_row_slice(
                4,
                4,
                &[
                    1.10 * 1.10, -0.12, 0.45, 1.05,
                    -0.12, 0.75 * 0.75, 0.21, 0.66,
                    0.45, 0.21, 0.54 * 0.54, 0.76,
                    1.05, 0.66, 0.76, 1.41 * 1.41,
                ],
            );
            Theta {
                alpha: DVector::from_row_slice(&[0.14]),
                beta: DVector::from_row_slice(&[10.72, 4.59, 4.21, -1.64]),
                tau_mean: -1.15,
                tau_var: 1.97 * 1.97,
                a_cov: DMatrix::from_diagonal(&DVector::from_row_slice(&[0.02 * 0.02])),
                b_cov: clip_spd(&b_raw, 0.01),
                sigma_e2: 0.46 * 0.46,
            }
        }
        crate::model::PostSegment::OneCompartment => Theta {
            alpha: DVector::from_row_slice(&[0.14]),
            beta: DVector::from_row_slice(&[4.2, 10.5, 2.0]),
            tau_mean: -1.15,
            tau_var: 1.97 * 1.97,
            a_cov: DMatrix::from_diagonal(&DVector::from_row_slice(&[0.02 * 0.02])),
            b_cov: DMatrix::from_diagonal(&DVector::from_row_slice(&[0.5, 0.5, 0.3])),
            sigma_e2: 0.46 * 0.46,
        },
    }
}

#[inline]
fn exp_draw<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.sample(OpenClosed01);
    -u.ln() / rate
}

/// Reporting times: the first report and every inter-report gap are Exp(xi)
/// draws, truncated at the horizon. Subjects with fewer than two reports
/// inside the horizon are redrawn whole.
pub fn gen_reporting_times<R: Rng + ?Sized>(xi: f64, horizon: f64, rng: &mut R) -> Vec<f64> {
    loop {
        let mut times = Vec::new();
        let mut t = exp_draw(xi, rng);
        while t <= horizon {
            times.push(t);
            t += exp_draw(xi, rng);
        }
        if times.len() >= 2 {
            return times;
        }
    }
}

/// One subject: latent effects from their priors (Gaussian on the latent
/// scale; exponential-tagged effects are log-normal on the natural scale),
/// model mean at each time, Gaussian noise on top. Returns the data and the
/// ground-truth latent state.
pub fn gen_subject<R: Rng + ?Sized>(
    id: impl Into<String>,
    theta: &Theta,
    times: &[f64],
    detection_limit: f64,
    spec: &ModelSpec,
    rng: &mut R,
) -> Result<(SubjectData, LatentState)> {
    if times.is_empty() {
        return Err(Error::InvalidInput("no reporting times".into()));
    }
    let tau = theta.tau_mean + theta.tau_var.sqrt() * rng.sample::<f64, _>(StandardNormal);
    let pre = mvn_draw(&theta.alpha, &theta.a_cov, rng)?;
    let post = mvn_draw(&theta.beta, &theta.b_cov, rng)?;
    let state = LatentState::new(tau, pre, post);

    let sd = theta.sigma_e2.sqrt();
    let mut records = Vec::with_capacity(times.len());
    for &t in times {
        let mu = eval_mean(t, &state, spec)?;
        let noise: f64 = rng.sample(StandardNormal);
        records.push(ObservationRecord::observed(
            t,
            mu + sd * noise,
            detection_limit,
        ));
    }
    Ok((SubjectData::new(id, records)?, state))
}

fn mvn_draw<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::SingularMatrix {
            tag: "generator covariance".into(),
        })?;
    let z = DVector::from_iterator(
        mean.len(),
        (0..mean.len()).map(|_| rng.sample::<f64, _>(StandardNormal)),
    );
    Ok(mean + chol.l() * z)
}

/// One full dataset plus the ground-truth latents, pre-censoring.
pub fn gen_dataset<R: Rng + ?Sized>(
    scenario: &SimScenario,
    spec: &ModelSpec,
    rng: &mut R,
) -> Result<(Vec<SubjectData>, Vec<LatentState>)> {
    scenario.validate()?;
    let width = scenario.n_subjects.to_string().len();
    let mut subjects = Vec::with_capacity(scenario.n_subjects);
    let mut truths = Vec::with_capacity(scenario.n_subjects);
    for i in 0..scenario.n_subjects {
        let times = gen_reporting_times(scenario.xi, scenario.horizon, rng);
        let (subject, truth) = gen_subject(
            format!("s{:0width$}", i + 1, width = width),
            &scenario.theta_true,
            &times,
            scenario.detection_limit_log10,
            spec,
            rng,
        )?;
        subjects.push(subject);
        truths.push(truth);
    }
    Ok((subjects, truths))
}

/// What `apply_censoring` actually did.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct CensoringOutcome {
    pub target_rate: f64,
    pub achieved_rate: f64,
    pub n_censored: usize,
    pub n_records: usize,
    /// True when the below-limit pool was too small to hit the target; the
    /// whole pool was censored instead.
    pub shortfall: bool,
}

/// Marks a uniformly random subset of below-limit records as censored so
/// the overall censored fraction matches `target_rate` (rounded to the
/// nearest record). Records at or above the limit are never flagged.
pub fn apply_censoring<R: Rng + ?Sized>(
    subjects: &mut [SubjectData],
    limit: f64,
    target_rate: f64,
    rng: &mut R,
) -> Result<CensoringOutcome> {
    if !(0.0..1.0).contains(&target_rate) {
        return Err(Error::InvalidConfig(
            "censoring target must lie in [0, 1)".into(),
        ));
    }
    let mut pool = Vec::new();
    let mut n_records = 0usize;
    for (si, s) in subjects.iter().enumerate() {
        for (ri, r) in s.records().iter().enumerate() {
            n_records += 1;
            if r.value < limit {
                pool.push((si, ri));
            }
        }
    }
    let n_target = (target_rate * n_records as f64).round() as usize;
    let (chosen, shortfall): (Vec<(usize, usize)>, bool) = if n_target >= pool.len() {
        (pool.clone(), n_target > pool.len())
    } else {
        let idx = rand::seq::index::sample(rng, pool.len(), n_target);
        (idx.iter().map(|i| pool[i]).collect(), false)
    };
    let n_censored = chosen.len();
    for (si, ri) in chosen {
        let rec = &mut subjects[si].records_mut()[ri];
        rec.censored = true;
        rec.value = limit;
        rec.detection_limit = limit;
    }
    Ok(CensoringOutcome {
        target_rate,
        achieved_rate: n_censored as f64 / n_records as f64,
        n_censored,
        n_records,
        shortfall,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn reporting_gaps_have_the_right_mean() {
        // A horizon much longer than 1/xi makes the truncation bias on the
        // retained gaps negligible, exposing the raw exponential increments.
        let mut r = rng(1);
        let xi = 1.45;
        let mut gaps = Vec::new();
        while gaps.len() < 100_000 {
            let times = gen_reporting_times(xi, 1000.0, &mut r);
            gaps.push(times[0]);
            for w in times.windows(2) {
                gaps.push(w[1] - w[0]);
            }
        }
        let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
        assert!((mean - 1.0 / xi).abs() < 0.01, "mean gap {mean}");
    }

    #[test]
    fn reporting_times_are_increasing_and_bounded() {
        let mut r = rng(2);
        for _ in 0..500 {
            let times = gen_reporting_times(1.45, 3.0, &mut r);
            assert!(times.len() >= 2);
            assert!(times.iter().all(|&t| t > 0.0 && t <= 3.0));
            for w in times.windows(2) {
                assert!(w[1] > w[0]);
            }
        }
    }

    #[test]
    fn noiseless_subject_sits_on_the_mean_curve() {
        let spec = ModelSpec::hiv();
        let mut theta = default_truth(&spec);
        theta.sigma_e2 = 1e-30;
        theta.tau_var = 1e-30;
        theta.a_cov[(0, 0)] = 1e-30;
        theta.b_cov = DMatrix::identity(4, 4) * 1e-30;
        let mut r = rng(3);
        let times = [0.3, 0.9, 1.4, 2.2];
        let (subject, truth) = gen_subject("s", &theta, &times, 2.3, &spec, &mut r).unwrap();
        let pop = LatentState::new(theta.tau_mean, theta.alpha.clone(), theta.beta.clone());
        for rec in subject.records() {
            let mu = eval_mean(rec.time, &pop, &spec).unwrap();
            assert_abs_diff_eq!(rec.value, mu, epsilon = 1e-6);
        }
        assert_abs_diff_eq!(truth.tau, theta.tau_mean, epsilon = 1e-6);
    }

    #[test]
    fn latent_change_points_average_to_truth() {
        let spec = ModelSpec::hiv();
        let theta = default_truth(&spec);
        let mut r = rng(4);
        let n = 10_000;
        let times = [0.5, 1.5];
        let mean: f64 = (0..n)
            .map(|i| {
                gen_subject(format!("s{i}"), &theta, &times, 2.3, &spec, &mut r)
                    .unwrap()
                    .1
                    .tau
            })
            .sum::<f64>()
            / n as f64;
        let tol = 3.0 * theta.tau_var.sqrt() / (n as f64).sqrt();
        assert!((mean - theta.tau_mean).abs() < tol, "mean {mean}");
    }

    #[test]
    fn default_truth_is_positive_definite() {
        let spec = ModelSpec::hiv();
        let theta = default_truth(&spec);
        assert!(theta.validate(&spec).is_ok());
        // Clipping stayed within print precision of the published entries.
        assert_abs_diff_eq!(theta.b_cov[(0, 0)], 1.21, epsilon = 0.011);
        assert_abs_diff_eq!(theta.b_cov[(2, 3)], 0.76, epsilon = 0.011);
    }

    #[test]
    fn censoring_zero_target_changes_nothing() {
        let spec = ModelSpec::hiv();
        let scenario = SimScenario {
            n_subjects: 20,
            rng_seed: 9,
            ..SimScenario::desk_default(&spec)
        };
        let mut r = rng(scenario.rng_seed);
        let (mut subjects, _) = gen_dataset(&scenario, &spec, &mut r).unwrap();
        let before = subjects.clone();
        let out = apply_censoring(&mut subjects, scenario.detection_limit_log10, 0.0, &mut r)
            .unwrap();
        assert_eq!(out.n_censored, 0);
        assert_eq!(subjects, before);
    }

    #[test]
    fn censoring_hits_the_target_when_the_pool_allows() {
        let spec = ModelSpec::hiv();
        let scenario = SimScenario {
            n_subjects: 200,
            rng_seed: 10,
            ..SimScenario::desk_default(&spec)
        };
        let mut r = rng(scenario.rng_seed);
        let (mut subjects, _) = gen_dataset(&scenario, &spec, &mut r).unwrap();
        let out = apply_censoring(&mut subjects, scenario.detection_limit_log10, 0.3, &mut r)
            .unwrap();
        assert!(!out.shortfall);
        assert_abs_diff_eq!(out.achieved_rate, 0.3, epsilon = 1.0 / out.n_records as f64);
        // Censored records carry the limit; nothing above the limit flagged.
        for s in &subjects {
            for rec in s.records() {
                if rec.censored {
                    assert_eq!(rec.value, scenario.detection_limit_log10);
                }
            }
        }
    }

    #[test]
    fn censoring_shortfall_is_reported_not_fatal() {
        let mut subjects = vec![SubjectData::new(
            "hi",
            vec![
                ObservationRecord::observed(0.1, 5.0, 2.3),
                ObservationRecord::observed(0.9, 5.5, 2.3),
            ],
        )
        .unwrap()];
        let mut r = rng(11);
        let out = apply_censoring(&mut subjects, 2.3, 0.3, &mut r).unwrap();
        assert_eq!(out.n_censored, 0);
        assert_eq!(out.achieved_rate, 0.0);
        assert!(out.shortfall);
    }
}
