//! Random-number machinery for the imputation step: truncated-normal draws
//! for censored values, prior-proposal rejection sampling for the latent
//! blocks, and the per-subject Gibbs sweep.
//!
//! Each latent block (change point, pre-effects, post-effects) is drawn from
//! its full conditional `prior x likelihood` by proposing from the Gaussian
//! prior and accepting with probability `likelihood / xi`, where `xi` bounds
//! the likelihood from above (the prior cancels between proposal and
//! target). The per-subject likelihood here is the observed-data factor:
//! Gaussian densities at uncensored records and `Phi((d - mu)/sigma)` at
//! censored ones, so `xi = (2 pi sigma_e^2)^{-m/2}` with `m` the uncensored
//! count is a valid envelope. Censored values are then refreshed from their
//! exact truncated-normal conditionals, completing the sweep.

use nalgebra::DVector;
use rand::distr::OpenClosed01;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gauss::{log_std_cdf, std_quantile, LN_2PI};
use crate::model::{
    LatentState, LatentTransform, ModelSpec, PostSegment, PreSegment, SubjectData, Theta,
};

/// Knobs for the per-subject Gibbs sweep.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GibbsConfig {
    pub sweeps_per_iteration: usize,
    pub max_rejection_attempts: u64,
    pub rng_seed: u64,
}

impl Default for GibbsConfig {
    fn default() -> Self {
        Self {
            sweeps_per_iteration: 1,
            max_rejection_attempts: 100_000,
            rng_seed: 0,
        }
    }
}

impl GibbsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sweeps_per_iteration < 1 {
            return Err(Error::InvalidConfig(
                "sweeps_per_iteration must be at least 1".into(),
            ));
        }
        if self.max_rejection_attempts < 1 {
            return Err(Error::InvalidConfig(
                "max_rejection_attempts must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Which latent block a rejection draw targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentBlock {
    Tau,
    Pre,
    Post,
}

impl LatentBlock {
    pub fn tag(self) -> &'static str {
        match self {
            LatentBlock::Tau => "tau",
            LatentBlock::Pre => "pre",
            LatentBlock::Post => "post",
        }
    }
}

/// Which blocks a sweep updates; the baseline fit freezes the change point
/// and the imputed values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SweepPlan {
    pub update_tau: bool,
    pub update_pre: bool,
    pub update_post: bool,
    pub update_imputed: bool,
}

impl Default for SweepPlan {
    fn default() -> Self {
        Self {
            update_tau: true,
            update_pre: true,
            update_post: true,
            update_imputed: true,
        }
    }
}

impl SweepPlan {
    pub fn frozen_changepoint() -> Self {
        Self {
            update_tau: false,
            update_pre: true,
            update_post: true,
            update_imputed: false,
        }
    }
}

/// One draw from N(mu, sigma^2) restricted to `(-inf, upper]`, by inverting
/// the Gaussian CDF at a uniform point of the truncated mass.
pub fn sample_truncated_normal_upper<R: Rng + ?Sized>(
    mu: f64,
    sigma: f64,
    upper: f64,
    rng: &mut R,
) -> f64 {
    let p_upper = 0.5 * statrs::function::erf::erfc(-((upper - mu) / sigma) / std::f64::consts::SQRT_2);
    let u: f64 = rng.sample(OpenClosed01);
    let x = mu + sigma * std_quantile(u * p_upper);
    x.min(upper)
}

/// Upper bound `xi` for the per-subject likelihood factor:
/// `(2 pi sigma_e^2)^{-m/2}` with `m` uncensored records, since each
/// Gaussian density is at most `(2 pi sigma_e^2)^{-1/2}` and each censoring
/// probability is at most 1.
pub fn likelihood_sup_bound(subject: &SubjectData, sigma_e2: f64) -> Result<f64> {
    Ok(log_likelihood_sup_bound(subject, sigma_e2)?.exp())
}

fn log_likelihood_sup_bound(subject: &SubjectData, sigma_e2: f64) -> Result<f64> {
    if !(sigma_e2 > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "sigma_e2 must be positive, got {sigma_e2}"
        )));
    }
    let m = subject.n_uncensored() as f64;
    Ok(-0.5 * m * (LN_2PI + sigma_e2.ln()))
}

/// Pre-segment curve with transforms applied.
#[derive(Clone, Copy)]
enum PreCurve {
    Linear { slope: f64 },
}

impl PreCurve {
    fn build(pre: &DVector<f64>, spec: &ModelSpec) -> Option<Self> {
        match spec.pre {
            PreSegment::Linear => {
                let slope = spec.pre_transforms[0].apply(pre[0]);
                slope.is_finite().then_some(PreCurve::Linear { slope })
            }
        }
    }

    #[inline]
    fn at(self, s_minus: f64) -> f64 {
        match self {
            PreCurve::Linear { slope } => slope * s_minus,
        }
    }
}

/// Post-segment curve in log space: `log10` of a sum of decaying
/// exponentials, parameterized by log base values and natural-scale rates.
#[derive(Clone, Copy)]
enum PostCurve {
    Bi { lb1: f64, r2: f64, lb3: f64, r4: f64 },
    One { lb1: f64, lb2: f64, r3: f64 },
}

#[inline]
fn log_base(latent: f64, transform: LatentTransform) -> f64 {
    match transform {
        LatentTransform::Exponential => latent,
        LatentTransform::Identity => latent.ln(),
    }
}

impl PostCurve {
    fn build(post: &DVector<f64>, spec: &ModelSpec) -> Option<Self> {
        let t = &spec.post_transforms;
        match spec.post {
            PostSegment::BiExponential => {
                let c = PostCurve::Bi {
                    lb1: log_base(post[0], t[0]),
                    r2: t[1].apply(post[1]),
                    lb3: log_base(post[2], t[2]),
                    r4: t[3].apply(post[3]),
                };
                match c {
                    PostCurve::Bi { lb1, r2, lb3, r4 }
                        if !lb1.is_nan() && r2.is_finite() && !lb3.is_nan() && r4.is_finite() =>
                    {
                        Some(c)
                    }
                    _ => None,
                }
            }
            PostSegment::OneCompartment => {
                let c = PostCurve::One {
                    lb1: log_base(post[0], t[0]),
                    lb2: log_base(post[1], t[1]),
                    r3: t[2].apply(post[2]),
                };
                match c {
                    PostCurve::One { lb1, lb2, r3 }
                        if !lb1.is_nan() && !lb2.is_nan() && r3.is_finite() =>
                    {
                        Some(c)
                    }
                    _ => None,
                }
            }
        }
    }

    #[inline]
    fn log10_at(self, s_plus: f64) -> f64 {
        let (x, y) = match self {
            PostCurve::Bi { lb1, r2, lb3, r4 } => (lb1 - r2 * s_plus, lb3 - r4 * s_plus),
            PostCurve::One { lb1, lb2, r3 } => (lb1, lb2 - r3 * s_plus),
        };
        let (hi, lo) = if x >= y { (x, y) } else { (y, x) };
        if hi == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        (hi + (lo - hi).exp().ln_1p()) / std::f64::consts::LN_10
    }
}

/// Natural-scale change point, or None when the transform overflows.
#[inline]
fn tau_natural(tau: f64, spec: &ModelSpec) -> Option<f64> {
    let t = spec.tau_transform.apply(tau);
    t.is_finite().then_some(t)
}

/// Accumulates `ln(likelihood / xi)` record by record. Every record term is
/// nonpositive, so the scan can stop as soon as the running sum falls below
/// the acceptance threshold.
struct AcceptScan<'a> {
    subject: &'a SubjectData,
    sd: f64,
    inv_two_var: f64,
}

impl<'a> AcceptScan<'a> {
    fn new(subject: &'a SubjectData, sigma_e2: f64) -> Self {
        Self {
            subject,
            sd: sigma_e2.sqrt(),
            inv_two_var: 0.5 / sigma_e2,
        }
    }

    /// Returns whether `ln u <= ln(likelihood / xi)` for the candidate mean
    /// function, stopping early once impossible.
    fn accept<F: FnMut(usize, &crate::model::ObservationRecord) -> f64>(
        &self,
        ln_u: f64,
        mut mu_at: F,
    ) -> bool {
        let mut deficit = 0.0;
        for (j, r) in self.subject.records().iter().enumerate() {
            let mu = mu_at(j, r);
            if !mu.is_finite() {
                return false;
            }
            deficit += if r.censored {
                log_std_cdf((r.detection_limit - mu) / self.sd)
            } else {
                let z = r.value - mu;
                -z * z * self.inv_two_var
            };
            if deficit < ln_u {
                return false;
            }
        }
        true
    }
}

fn stall(subject: &SubjectData, block: LatentBlock, attempts: u64) -> Error {
    Error::SamplerStall {
        subject: subject.id.clone(),
        block: block.tag(),
        attempts,
    }
}

/// Draws `block` from its full conditional given the data and every other
/// block, writing the accepted value into `state`. Returns the number of
/// proposals consumed. Proposals that drive the mean non-finite are
/// rejected like any other zero-likelihood candidate.
pub fn rejection_sample_block<R: Rng + ?Sized>(
    block: LatentBlock,
    subject: &SubjectData,
    state: &mut LatentState,
    theta: &Theta,
    spec: &ModelSpec,
    cfg: &GibbsConfig,
    rng: &mut R,
) -> Result<u64> {
    let scan = AcceptScan::new(subject, theta.sigma_e2);
    let max = cfg.max_rejection_attempts;

    match block {
        LatentBlock::Tau => {
            let pre = PreCurve::build(&state.pre, spec).ok_or_else(|| Error::NonFiniteMean {
                time: f64::NAN,
                latent: "pre[0]".into(),
                value: f64::NAN,
            })?;
            let post = PostCurve::build(&state.post, spec).ok_or_else(|| Error::NonFiniteMean {
                time: f64::NAN,
                latent: "post".into(),
                value: f64::NAN,
            })?;
            let sd_tau = theta.tau_var.sqrt();
            for attempt in 1..=max {
                let z: f64 = rng.sample(StandardNormal);
                let cand = theta.tau_mean + sd_tau * z;
                let ln_u = uniform_ln(rng);
                if let Some(tn) = tau_natural(cand, spec) {
                    if scan.accept(ln_u, |_, r| {
                        let s = r.time - tn;
                        pre.at(s.min(0.0)) + post.log10_at(s.max(0.0))
                    }) {
                        state.tau = cand;
                        return Ok(attempt);
                    }
                }
            }
            Err(stall(subject, block, max))
        }
        LatentBlock::Pre => {
            let tn = tau_natural(state.tau, spec).ok_or_else(|| Error::NonFiniteMean {
                time: f64::NAN,
                latent: "tau".into(),
                value: f64::NAN,
            })?;
            let post = PostCurve::build(&state.post, spec).ok_or_else(|| Error::NonFiniteMean {
                time: f64::NAN,
                latent: "post".into(),
                value: f64::NAN,
            })?;
            // The post-segment contribution and the signed offsets are fixed
            // while this block moves; cache them per record.
            let fixed: Vec<(f64, f64)> = subject
                .records()
                .iter()
                .map(|r| {
                    let s = r.time - tn;
                    (s.min(0.0), post.log10_at(s.max(0.0)))
                })
                .collect();
            let chol = theta
                .a_cov
                .clone()
                .cholesky()
                .ok_or_else(|| Error::SingularMatrix { tag: "A".into() })?;
            let l = chol.l();
            let dim = state.pre.len();
            let mut cand = DVector::zeros(dim);
            for attempt in 1..=max {
                draw_mvn(&mut cand, &theta.alpha, &l, rng);
                let ln_u = uniform_ln(rng);
                if let Some(curve) = PreCurve::build(&cand, spec) {
                    if scan.accept(ln_u, |j, _| {
                        let (s_minus, h) = fixed[j];
                        curve.at(s_minus) + h
                    }) {
                        state.pre.copy_from(&cand);
                        return Ok(attempt);
                    }
                }
            }
            Err(stall(subject, block, max))
        }
        LatentBlock::Post => {
            let tn = tau_natural(state.tau, spec).ok_or_else(|| Error::NonFiniteMean {
                time: f64::NAN,
                latent: "tau".into(),
                value: f64::NAN,
            })?;
            let pre = PreCurve::build(&state.pre, spec).ok_or_else(|| Error::NonFiniteMean {
                time: f64::NAN,
                latent: "pre[0]".into(),
                value: f64::NAN,
            })?;
            let fixed: Vec<(f64, f64)> = subject
                .records()
                .iter()
                .map(|r| {
                    let s = r.time - tn;
                    (s.max(0.0), pre.at(s.min(0.0)))
                })
                .collect();
            let chol = theta
                .b_cov
                .clone()
                .cholesky()
                .ok_or_else(|| Error::SingularMatrix { tag: "B".into() })?;
            let l = chol.l();
            let dim = state.post.len();
            let mut cand = DVector::zeros(dim);
            for attempt in 1..=max {
                draw_mvn(&mut cand, &theta.beta, &l, rng);
                let ln_u = uniform_ln(rng);
                if let Some(curve) = PostCurve::build(&cand, spec) {
                    if scan.accept(ln_u, |j, _| {
                        let (s_plus, g) = fixed[j];
                        g + curve.log10_at(s_plus)
                    }) {
                        state.post.copy_from(&cand);
                        return Ok(attempt);
                    }
                }
            }
            Err(stall(subject, block, max))
        }
    }
}

#[inline]
fn uniform_ln<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.sample(OpenClosed01);
    u.ln()
}

fn draw_mvn<R: Rng + ?Sized>(
    out: &mut DVector<f64>,
    mean: &DVector<f64>,
    chol_l: &nalgebra::DMatrix<f64>,
    rng: &mut R,
) {
    let dim = out.len();
    out.copy_from(mean);
    // out += L z, accumulated column by column to avoid a temporary.
    for j in 0..dim {
        let z: f64 = rng.sample(StandardNormal);
        for i in j..dim {
            out[i] += chol_l[(i, j)] * z;
        }
    }
}

/// One full Gibbs cycle for a subject: change point, pre-effects,
/// post-effects, then every censored value from its truncated-normal
/// conditional. Runs `sweeps_per_iteration` cycles and reports the total
/// number of rejection proposals consumed. Uncensored record values are
/// never touched.
pub fn gibbs_sweep<R: Rng + ?Sized>(
    subject: &SubjectData,
    state: &mut LatentState,
    theta: &Theta,
    spec: &ModelSpec,
    cfg: &GibbsConfig,
    rng: &mut R,
) -> Result<u64> {
    gibbs_sweep_with(subject, state, theta, spec, cfg, SweepPlan::default(), rng)
}

/// `gibbs_sweep` with some blocks held fixed.
pub fn gibbs_sweep_with<R: Rng + ?Sized>(
    subject: &SubjectData,
    state: &mut LatentState,
    theta: &Theta,
    spec: &ModelSpec,
    cfg: &GibbsConfig,
    plan: SweepPlan,
    rng: &mut R,
) -> Result<u64> {
    let mut attempts = 0;
    let sd_e = theta.sigma_e2.sqrt();
    for _ in 0..cfg.sweeps_per_iteration {
        if plan.update_tau {
            attempts += rejection_sample_block(
                LatentBlock::Tau,
                subject,
                state,
                theta,
                spec,
                cfg,
                rng,
            )?;
        }
        if plan.update_pre {
            attempts += rejection_sample_block(
                LatentBlock::Pre,
                subject,
                state,
                theta,
                spec,
                cfg,
                rng,
            )?;
        }
        if plan.update_post {
            attempts += rejection_sample_block(
                LatentBlock::Post,
                subject,
                state,
                theta,
                spec,
                cfg,
                rng,
            )?;
        }
        if plan.update_imputed {
            for (j, r) in subject.records().iter().enumerate() {
                if r.censored {
                    let mu =
                        crate::model::eval_mean_latent(r.time, state.tau, &state.pre, &state.post, spec)?;
                    let draw = sample_truncated_normal_upper(mu, sd_e, r.detection_limit, rng);
                    state.imputed.insert(j, draw);
                }
            }
        }
    }
    Ok(attempts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ObservationRecord;
    use approx::assert_abs_diff_eq;
    use nalgebra::{dvector, DMatrix};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn theta() -> Theta {
        Theta {
            alpha: dvector![0.15],
            beta: dvector![2.3, 1.0, 0.7, -0.7],
            tau_mean: -0.6,
            tau_var: 0.25,
            a_cov: DMatrix::from_diagonal(&dvector![0.04]),
            b_cov: DMatrix::from_diagonal(&dvector![0.3, 0.2, 0.2, 0.3]),
            sigma_e2: 0.25,
        }
    }

    fn subject() -> SubjectData {
        // Values near the mean curve implied by `theta()`, so rejection
        // sampling accepts at a healthy rate.
        SubjectData::new(
            "s",
            vec![
                ObservationRecord::observed(0.2, 1.1, 0.0),
                ObservationRecord::observed(0.9, 0.6, 0.0),
            ],
        )
        .unwrap()
    }

    #[test]
    fn truncated_mean_at_zero_upper() {
        let mut r = rng(7);
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|_| sample_truncated_normal_upper(0.0, 1.0, 0.0, &mut r))
            .sum::<f64>()
            / n as f64;
        // Closed-form truncated-normal mean: -phi(0)/Phi(0) = -sqrt(2/pi).
        assert_abs_diff_eq!(mean, -0.7978845608028654, epsilon = 0.01);
    }

    #[test]
    fn truncated_draws_respect_support() {
        let mut r = rng(8);
        for _ in 0..10_000 {
            assert!(sample_truncated_normal_upper(1.5, 2.0, 0.7, &mut r) <= 0.7);
        }
        // Deep truncation still yields finite values below the bound.
        for _ in 0..1_000 {
            let x = sample_truncated_normal_upper(10.0, 1.0, -5.0, &mut r);
            assert!(x.is_finite() && x <= -5.0);
        }
    }

    #[test]
    fn truncation_far_above_mean_is_negligible() {
        let mut r = rng(9);
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|_| sample_truncated_normal_upper(5.0, 1.0, 10.0, &mut r))
            .sum::<f64>()
            / n as f64;
        assert_abs_diff_eq!(mean, 5.0, epsilon = 0.02);
    }

    #[test]
    fn sup_bound_values() {
        let all_censored = SubjectData::new(
            "c",
            vec![
                ObservationRecord::censored_at(0.1, 2.0),
                ObservationRecord::censored_at(0.5, 2.0),
            ],
        )
        .unwrap();
        assert_abs_diff_eq!(
            likelihood_sup_bound(&all_censored, 0.5).unwrap(),
            1.0,
            epsilon = 1e-12
        );

        let one = SubjectData::new(
            "o",
            vec![
                ObservationRecord::observed(0.1, 3.0, 2.0),
                ObservationRecord::censored_at(0.5, 2.0),
            ],
        )
        .unwrap();
        let s2 = 1.0 / (2.0 * std::f64::consts::PI);
        assert_abs_diff_eq!(likelihood_sup_bound(&one, s2).unwrap(), 1.0, epsilon = 1e-12);

        assert_abs_diff_eq!(
            likelihood_sup_bound(&subject(), 1.0).unwrap(),
            0.15915494309189535,
            epsilon = 1e-12
        );
        assert!(likelihood_sup_bound(&subject(), 0.0).is_err());
    }

    /// Kolmogorov-Smirnov one-sample statistic against a normal CDF, with
    /// the asymptotic p-value.
    fn ks_pvalue_normal(draws: &mut [f64], mu: f64, sd: f64) -> f64 {
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = draws.len() as f64;
        let norm = statrs::distribution::Normal::new(mu, sd).unwrap();
        use statrs::distribution::ContinuousCDF;
        let mut d: f64 = 0.0;
        for (i, &x) in draws.iter().enumerate() {
            let f = norm.cdf(x);
            d = d.max((f - i as f64 / n).abs()).max(((i + 1) as f64 / n - f).abs());
        }
        let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
        2.0 * (1..100)
            .map(|k| {
                let k = k as f64;
                (-1.0f64).powi(k as i32 - 1) * (-2.0 * k * k * lambda * lambda).exp()
            })
            .sum::<f64>()
    }

    #[test]
    fn flat_likelihood_recovers_the_prior() {
        // All records censored with an enormous detection limit: every
        // censoring probability is 1, the likelihood is flat, and the
        // conditional equals the prior.
        let spec = ModelSpec::hiv();
        let th = theta();
        let subj = SubjectData::new(
            "flat",
            vec![
                ObservationRecord::censored_at(0.3, 1e6),
                ObservationRecord::censored_at(1.1, 1e6),
            ],
        )
        .unwrap();
        let cfg = GibbsConfig::default();
        let mut r = rng(11);
        let mut state = LatentState::prior_init(&subj, &th);

        let n = 10_000;
        let mut tau_draws = Vec::with_capacity(n);
        let mut total_attempts = 0;
        for _ in 0..n {
            total_attempts +=
                rejection_sample_block(LatentBlock::Tau, &subj, &mut state, &th, &spec, &cfg, &mut r)
                    .unwrap();
            tau_draws.push(state.tau);
        }
        // Flat likelihood accepts every proposal.
        assert_eq!(total_attempts, n as u64);
        let p = ks_pvalue_normal(&mut tau_draws, th.tau_mean, th.tau_var.sqrt());
        assert!(p > 0.01, "KS p-value {p} too small");

        let mut b1_draws = Vec::with_capacity(n);
        for _ in 0..n {
            rejection_sample_block(LatentBlock::Post, &subj, &mut state, &th, &spec, &cfg, &mut r)
                .unwrap();
            b1_draws.push(state.post[0]);
        }
        let p1 = ks_pvalue_normal(&mut b1_draws, th.beta[0], th.b_cov[(0, 0)].sqrt());
        assert!(p1 > 0.01, "KS p-value {p1} too small for post block");
    }

    #[test]
    fn likelihood_never_exceeds_its_bound() {
        let spec = ModelSpec::hiv();
        let th = theta();
        let subj = subject();
        let ln_xi = super::log_likelihood_sup_bound(&subj, th.sigma_e2).unwrap();
        let mut r = rng(3);
        let mut state = LatentState::prior_init(&subj, &th);
        for _ in 0..2_000 {
            // Random latent configurations from a broad distribution.
            state.tau = -2.0 + 4.0 * r.random::<f64>();
            state.pre[0] = -0.5 + r.random::<f64>();
            for i in 0..4 {
                state.post[i] = -1.0 + 4.0 * r.random::<f64>();
            }
            let mut ll = 0.0;
            for rec in subj.records() {
                let mu = crate::model::eval_mean_latent(
                    rec.time, state.tau, &state.pre, &state.post, &spec,
                )
                .unwrap();
                ll += if rec.censored {
                    crate::model::log_censored_contribution(rec.detection_limit, mu, th.sigma_e2)
                        .unwrap()
                } else {
                    crate::model::log_obs_density(rec.value, mu, th.sigma_e2).unwrap()
                };
            }
            assert!(ll <= ln_xi + 1e-12);
        }
    }

    #[test]
    fn sweep_preserves_uncensored_values_and_updates_imputations() {
        let spec = ModelSpec::hiv();
        let th = theta();
        let subj = SubjectData::new(
            "mix",
            vec![
                ObservationRecord::observed(0.2, 1.0, 0.0),
                ObservationRecord::censored_at(1.0, 0.8),
                ObservationRecord::observed(1.8, 0.3, 0.0),
            ],
        )
        .unwrap();
        let before = subj.clone();
        let cfg = GibbsConfig::default();
        let mut state = LatentState::prior_init(&subj, &th);
        let mut r = rng(5);
        gibbs_sweep(&subj, &mut state, &th, &spec, &cfg, &mut r).unwrap();
        assert_eq!(subj, before);
        let imputed = state.imputed[&1];
        assert!(imputed <= 0.8);
        assert_eq!(state.imputed.len(), 1);
    }

    #[test]
    fn sweep_without_censoring_keeps_imputations_empty() {
        let spec = ModelSpec::hiv();
        let th = theta();
        let subj = subject();
        let cfg = GibbsConfig::default();
        let mut state = LatentState::prior_init(&subj, &th);
        let mut r = rng(6);
        gibbs_sweep(&subj, &mut state, &th, &spec, &cfg, &mut r).unwrap();
        assert!(state.imputed.is_empty());
    }

    #[test]
    fn sweeps_replay_deterministically() {
        let spec = ModelSpec::hiv();
        let th = theta();
        let subj = subject();
        let cfg = GibbsConfig::default();

        let mut s1 = LatentState::prior_init(&subj, &th);
        let mut r1 = rng(42);
        for _ in 0..50 {
            gibbs_sweep(&subj, &mut s1, &th, &spec, &cfg, &mut r1).unwrap();
        }
        let mut s2 = LatentState::prior_init(&subj, &th);
        let mut r2 = rng(42);
        for _ in 0..50 {
            gibbs_sweep(&subj, &mut s2, &th, &spec, &cfg, &mut r2).unwrap();
        }
        assert_eq!(s1, s2);
    }

    #[test]
    fn exhausted_attempts_surface_as_a_stall() {
        let spec = ModelSpec::hiv();
        let mut th = theta();
        th.sigma_e2 = 1e-8; // likelihood almost a point mass: nothing accepts
        let subj = subject();
        let cfg = GibbsConfig {
            max_rejection_attempts: 50,
            ..GibbsConfig::default()
        };
        let mut state = LatentState::prior_init(&subj, &th);
        let mut r = rng(12);
        let err = rejection_sample_block(
            LatentBlock::Post,
            &subj,
            &mut state,
            &th,
            &spec,
            &cfg,
            &mut r,
        )
        .unwrap_err();
        match err {
            Error::SamplerStall {
                subject, block, attempts,
            } => {
                assert_eq!(subject, "s");
                assert_eq!(block, "post");
                assert_eq!(attempts, 50);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn frozen_plan_leaves_tau_and_imputations_alone() {
        let spec = ModelSpec::hiv();
        let th = theta();
        let subj = SubjectData::new(
            "mix",
            vec![
                ObservationRecord::observed(0.2, 1.0, 0.0),
                ObservationRecord::censored_at(1.0, 0.8),
            ],
        )
        .unwrap();
        let cfg = GibbsConfig::default();
        let mut state = LatentState::prior_init(&subj, &th);
        state.imputed.insert(1, 0.5);
        let tau0 = state.tau;
        let mut r = rng(13);
        gibbs_sweep_with(
            &subj,
            &mut state,
            &th,
            &spec,
            &cfg,
            SweepPlan::frozen_changepoint(),
            &mut r,
        )
        .unwrap();
        assert_eq!(state.tau, tau0);
        assert_eq!(state.imputed[&1], 0.5);
    }
}
