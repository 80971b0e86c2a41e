//! Segmented nonlinear mixed-effects model: domain types, mean functions,
//! latent-variable transforms, and the complete-data log-likelihood.
//!
//! The mean of a trajectory is `g((t - tau)^-, a) + h((t - tau)^+, b)`, a
//! pre-segment model before a subject-specific change point `tau` and a
//! (nonlinear) post-segment model after it. Random effects live on a
//! Gaussian latent scale throughout; effects that are positive on the
//! natural scale (log-normal) carry an exponential transform that is applied
//! only inside mean evaluation. This keeps every prior Gaussian, so the
//! closed-form M-step applies unchanged to the log-normal configuration.

use std::collections::BTreeMap;
use std::f64::consts::LN_10;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gauss::{log_std_cdf, log_std_pdf, LN_2PI};

/// One longitudinal measurement. For censored rows `value` holds the
/// detection limit (log10 scale), which stands in for the unobserved value.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationRecord {
    /// Years since diagnosis.
    pub time: f64,
    /// log10 viral-load units; equals `detection_limit` when censored.
    pub value: f64,
    pub censored: bool,
    /// Per-record detection limit, log10 units.
    pub detection_limit: f64,
}

impl ObservationRecord {
    pub fn observed(time: f64, value: f64, detection_limit: f64) -> Self {
        Self {
            time,
            value,
            censored: false,
            detection_limit,
        }
    }

    pub fn censored_at(time: f64, detection_limit: f64) -> Self {
        Self {
            time,
            value: detection_limit,
            censored: true,
            detection_limit,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.time.is_finite() && self.time >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "record time must be finite and nonnegative, got {}",
                self.time
            )));
        }
        if !self.detection_limit.is_finite() {
            return Err(Error::InvalidInput(
                "detection limit must be finite".into(),
            ));
        }
        if !self.value.is_finite() {
            return Err(Error::InvalidInput("record value must be finite".into()));
        }
        if self.censored && self.value != self.detection_limit {
            return Err(Error::InvalidInput(format!(
                "censored record at t = {} must carry its detection limit as value",
                self.time
            )));
        }
        Ok(())
    }
}

/// One individual's time-ordered records.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectData {
    pub id: String,
    records: Vec<ObservationRecord>,
}

impl SubjectData {
    /// Requires strictly increasing times and at least two records.
    pub fn new(id: impl Into<String>, records: Vec<ObservationRecord>) -> Result<Self> {
        let id = id.into();
        if records.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "subject `{id}` has {} record(s); at least 2 required",
                records.len()
            )));
        }
        for r in &records {
            r.validate()?;
        }
        for w in records.windows(2) {
            if !(w[1].time > w[0].time) {
                return Err(Error::InvalidInput(format!(
                    "subject `{id}` times not strictly increasing at t = {}",
                    w[1].time
                )));
            }
        }
        Ok(Self { id, records })
    }

    pub fn records(&self) -> &[ObservationRecord] {
        &self.records
    }

    /// Crate-internal mutation hook for censoring and ingest repair; callers
    /// must uphold the ordering and censoring invariants.
    pub(crate) fn records_mut(&mut self) -> &mut [ObservationRecord] {
        &mut self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_uncensored(&self) -> usize {
        self.records.iter().filter(|r| !r.censored).count()
    }

    pub fn last_time(&self) -> f64 {
        self.records.last().map(|r| r.time).unwrap_or(0.0)
    }
}

/// Mean function for the segment before the change point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PreSegment {
    /// `g(s, a) = a * s` with `s = (t - tau)^- <= 0`.
    Linear,
}

/// Mean function for the segment after the change point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PostSegment {
    /// `h(s, b) = log10(b1 e^{-b2 s} + b3 e^{-b4 s})`, two-phase decay.
    BiExponential,
    /// `h(s, b) = log10(b1 + b2 e^{-b3 s})`, one-compartment alternative.
    OneCompartment,
}

/// How a latent Gaussian coordinate maps to the natural scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatentTransform {
    Identity,
    /// Natural value is `exp(latent)`; the latent prior stays Gaussian, so
    /// the natural-scale effect is log-normal.
    Exponential,
}

impl LatentTransform {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            LatentTransform::Identity => x,
            LatentTransform::Exponential => x.exp(),
        }
    }
}

/// Declarative description of the segmented mean structure.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelSpec {
    pub pre: PreSegment,
    pub post: PostSegment,
    pub tau_transform: LatentTransform,
    pub pre_transforms: Vec<LatentTransform>,
    pub post_transforms: Vec<LatentTransform>,
}

impl ModelSpec {
    /// The viral-load application model: linear pre-segment with a Gaussian
    /// slope, bi-exponential post-segment and change point both log-normal.
    pub fn hiv() -> Self {
        Self {
            pre: PreSegment::Linear,
            post: PostSegment::BiExponential,
            tau_transform: LatentTransform::Exponential,
            pre_transforms: vec![LatentTransform::Identity],
            post_transforms: vec![LatentTransform::Exponential; 4],
        }
    }

    pub fn pre_dim(&self) -> usize {
        match self.pre {
            PreSegment::Linear => 1,
        }
    }

    pub fn post_dim(&self) -> usize {
        match self.post {
            PostSegment::BiExponential => 4,
            PostSegment::OneCompartment => 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pre_transforms.len() != self.pre_dim() {
            return Err(Error::InvalidConfig(format!(
                "pre-segment takes {} latent(s), {} transform tags given",
                self.pre_dim(),
                self.pre_transforms.len()
            )));
        }
        if self.post_transforms.len() != self.post_dim() {
            return Err(Error::InvalidConfig(format!(
                "post-segment takes {} latent(s), {} transform tags given",
                self.post_dim(),
                self.post_transforms.len()
            )));
        }
        Ok(())
    }
}

/// Full parameter vector of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Theta {
    /// Pre-segment fixed effects (latent scale).
    pub alpha: DVector<f64>,
    /// Post-segment fixed effects (latent scale).
    pub beta: DVector<f64>,
    /// Change-point mean, latent scale.
    pub tau_mean: f64,
    /// Change-point variance, latent scale.
    pub tau_var: f64,
    /// Pre-segment random-effect covariance.
    pub a_cov: DMatrix<f64>,
    /// Post-segment random-effect covariance (unstructured).
    pub b_cov: DMatrix<f64>,
    /// Residual variance.
    pub sigma_e2: f64,
}

impl Theta {
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if self.alpha.len() != spec.pre_dim() || self.beta.len() != spec.post_dim() {
            return Err(Error::InvalidParameter(format!(
                "fixed-effect dimensions ({}, {}) do not match the model ({}, {})",
                self.alpha.len(),
                self.beta.len(),
                spec.pre_dim(),
                spec.post_dim()
            )));
        }
        if !(self.tau_var > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "tau_var must be positive, got {}",
                self.tau_var
            )));
        }
        if !(self.sigma_e2 > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "sigma_e2 must be positive, got {}",
                self.sigma_e2
            )));
        }
        check_spd(&self.a_cov, "A")?;
        check_spd(&self.b_cov, "B")?;
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.alpha.iter().all(|x| x.is_finite())
            && self.beta.iter().all(|x| x.is_finite())
            && self.tau_mean.is_finite()
            && self.tau_var.is_finite()
            && self.a_cov.iter().all(|x| x.is_finite())
            && self.b_cov.iter().all(|x| x.is_finite())
            && self.sigma_e2.is_finite()
    }
}

pub(crate) fn check_spd(m: &DMatrix<f64>, tag: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::SingularMatrix {
            tag: format!("{tag} is not square"),
        });
    }
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-10 * (1.0 + m[(i, j)].abs()) {
                return Err(Error::SingularMatrix {
                    tag: format!("{tag} is not symmetric"),
                });
            }
        }
    }
    if m.clone().cholesky().is_none() {
        return Err(Error::SingularMatrix { tag: tag.into() });
    }
    Ok(())
}

/// Per-subject imputed quantities: the change point, both random-effect
/// blocks (all latent scale), and imputed values for censored records keyed
/// by record index.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub tau: f64,
    pub pre: DVector<f64>,
    pub post: DVector<f64>,
    pub imputed: BTreeMap<usize, f64>,
}

impl LatentState {
    pub fn new(tau: f64, pre: DVector<f64>, post: DVector<f64>) -> Self {
        Self {
            tau,
            pre,
            post,
            imputed: BTreeMap::new(),
        }
    }

    /// Prior means of all latent blocks; imputations at half the limit on
    /// the natural scale (`d + log10(0.5)` in log10 units).
    pub fn prior_init(subject: &SubjectData, theta: &Theta) -> Self {
        let mut state = Self::new(theta.tau_mean, theta.alpha.clone(), theta.beta.clone());
        for (j, r) in subject.records().iter().enumerate() {
            if r.censored {
                state
                    .imputed
                    .insert(j, r.detection_limit + (0.5f64).log10());
            }
        }
        state
    }

    /// The record's value with censored entries replaced by their imputations.
    pub fn completed_value(&self, subject: &SubjectData, j: usize) -> Result<f64> {
        let r = &subject.records()[j];
        if !r.censored {
            return Ok(r.value);
        }
        self.imputed
            .get(&j)
            .copied()
            .ok_or_else(|| Error::MissingImputation {
                subject: subject.id.clone(),
                record: j,
            })
    }
}

/// Natural-scale view of a latent state.
#[derive(Debug, Clone, PartialEq)]
pub struct NaturalLatents {
    pub tau: f64,
    pub pre: DVector<f64>,
    pub post: DVector<f64>,
}

/// Applies each tagged transform; identity entries pass through, exponential
/// entries come back strictly positive.
pub fn latent_to_natural(state: &LatentState, spec: &ModelSpec) -> NaturalLatents {
    NaturalLatents {
        tau: spec.tau_transform.apply(state.tau),
        pre: DVector::from_iterator(
            state.pre.len(),
            state
                .pre
                .iter()
                .zip(&spec.pre_transforms)
                .map(|(&x, t)| t.apply(x)),
        ),
        post: DVector::from_iterator(
            state.post.len(),
            state
                .post
                .iter()
                .zip(&spec.post_transforms)
                .map(|(&x, t)| t.apply(x)),
        ),
    }
}

/// `ln(e^x + e^y)` without overflow.
#[inline]
fn log_sum_exp2(x: f64, y: f64) -> f64 {
    let (hi, lo) = if x >= y { (x, y) } else { (y, x) };
    if hi == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// Log of a post-segment base value: the latent itself under the
/// exponential tag, `ln` of the natural value otherwise.
#[inline]
fn log_base(latent: f64, transform: LatentTransform) -> f64 {
    match transform {
        LatentTransform::Exponential => latent,
        LatentTransform::Identity => latent.ln(), // NaN for negatives, caught by the caller
    }
}

/// Noiseless model mean at time `t` for the given latent coordinates.
///
/// The post segment is evaluated in log space,
/// `log10(b1 e^{-b2 s} + b3 e^{-b4 s}) = lse(ln b1 - b2 s, ln b3 - b4 s) / ln 10`,
/// so base values like `e^{10.7}` never materialize on the natural scale.
pub fn eval_mean_latent(
    t: f64,
    tau: f64,
    pre: &DVector<f64>,
    post: &DVector<f64>,
    spec: &ModelSpec,
) -> Result<f64> {
    let bad = |latent: &str, value: f64| Error::NonFiniteMean {
        time: t,
        latent: latent.to_string(),
        value,
    };

    let tau_nat = spec.tau_transform.apply(tau);
    if !tau_nat.is_finite() {
        return Err(bad("tau", tau_nat));
    }
    let s = t - tau_nat;
    let s_minus = s.min(0.0);
    let s_plus = s.max(0.0);

    let g = match spec.pre {
        PreSegment::Linear => {
            let slope = spec.pre_transforms[0].apply(pre[0]);
            if !slope.is_finite() {
                return Err(bad("pre[0]", slope));
            }
            slope * s_minus
        }
    };

    let h = match spec.post {
        PostSegment::BiExponential => {
            let lb1 = log_base(post[0], spec.post_transforms[0]);
            let lb3 = log_base(post[2], spec.post_transforms[2]);
            let r2 = spec.post_transforms[1].apply(post[1]);
            let r4 = spec.post_transforms[3].apply(post[3]);
            if lb1.is_nan() {
                return Err(bad("post[0]", lb1));
            }
            if lb3.is_nan() {
                return Err(bad("post[2]", lb3));
            }
            if !r2.is_finite() {
                return Err(bad("post[1]", r2));
            }
            if !r4.is_finite() {
                return Err(bad("post[3]", r4));
            }
            log_sum_exp2(lb1 - r2 * s_plus, lb3 - r4 * s_plus) / LN_10
        }
        PostSegment::OneCompartment => {
            let lb1 = log_base(post[0], spec.post_transforms[0]);
            let lb2 = log_base(post[1], spec.post_transforms[1]);
            let r3 = spec.post_transforms[2].apply(post[2]);
            if lb1.is_nan() {
                return Err(bad("post[0]", lb1));
            }
            if lb2.is_nan() {
                return Err(bad("post[1]", lb2));
            }
            if !r3.is_finite() {
                return Err(bad("post[2]", r3));
            }
            log_sum_exp2(lb1, lb2 - r3 * s_plus) / LN_10
        }
    };

    let mean = g + h;
    if !mean.is_finite() {
        return Err(bad("mean", mean));
    }
    Ok(mean)
}

/// Noiseless model mean at time `t` under `latents`.
pub fn eval_mean(t: f64, latents: &LatentState, spec: &ModelSpec) -> Result<f64> {
    eval_mean_latent(t, latents.tau, &latents.pre, &latents.post, spec)
}

/// Gaussian log-density of an uncensored observation.
pub fn log_obs_density(y: f64, mu: f64, sigma_e2: f64) -> Result<f64> {
    if !(sigma_e2 > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "sigma_e2 must be positive, got {sigma_e2}"
        )));
    }
    let sd = sigma_e2.sqrt();
    Ok(log_std_pdf((y - mu) / sd) - sd.ln())
}

/// Log-contribution of a left-censored observation:
/// `ln Phi((d - mu) / sigma_e)`, the probability of falling below the limit.
pub fn log_censored_contribution(d: f64, mu: f64, sigma_e2: f64) -> Result<f64> {
    if !(sigma_e2 > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "sigma_e2 must be positive, got {sigma_e2}"
        )));
    }
    Ok(log_std_cdf((d - mu) / sigma_e2.sqrt()))
}

/// Four-part breakdown of the complete-data log-likelihood: change-point
/// prior, pre-effect prior, post-effect prior, and the residual term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoglikParts {
    pub change_point: f64,
    pub pre_effects: f64,
    pub post_effects: f64,
    pub residual: f64,
}

impl LoglikParts {
    pub fn total(&self) -> f64 {
        self.change_point + self.pre_effects + self.post_effects + self.residual
    }
}

/// Complete-data log-likelihood over all subjects; priors are evaluated on
/// the latent scale, the residual part uses completed (imputed) values.
///
/// Constant conventions follow the source display: the change-point and
/// residual parts carry no `2 pi` constant, the effect-block parts carry
/// `-n ln(2 pi)` each.
pub fn complete_data_loglik(
    theta: &Theta,
    latents: &[LatentState],
    data: &[SubjectData],
    spec: &ModelSpec,
) -> Result<LoglikParts> {
    if latents.len() != data.len() {
        return Err(Error::InvalidInput(format!(
            "{} latent states for {} subjects",
            latents.len(),
            data.len()
        )));
    }
    theta.validate(spec)?;
    let n = data.len() as f64;

    let a_chol = theta
        .a_cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::SingularMatrix { tag: "A".into() })?;
    let b_chol = theta
        .b_cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::SingularMatrix { tag: "B".into() })?;
    let ln_det_a = 2.0 * a_chol.l().diagonal().map(f64::ln).sum();
    let ln_det_b = 2.0 * b_chol.l().diagonal().map(f64::ln).sum();

    let mut change_point = 0.0;
    let mut quad_a = 0.0;
    let mut quad_b = 0.0;
    let mut residual = 0.0;
    let sd_e = theta.sigma_e2.sqrt();

    for (state, subject) in latents.iter().zip(data) {
        let dt = state.tau - theta.tau_mean;
        change_point += -theta.tau_var.sqrt().ln() - dt * dt / (2.0 * theta.tau_var);

        let da = &state.pre - &theta.alpha;
        quad_a += da.dot(&a_chol.solve(&da));
        let db = &state.post - &theta.beta;
        quad_b += db.dot(&b_chol.solve(&db));

        for (j, r) in subject.records().iter().enumerate() {
            let y = state.completed_value(subject, j)?;
            let mu = eval_mean(r.time, state, spec)?;
            let res = y - mu;
            residual += -sd_e.ln() - res * res / (2.0 * theta.sigma_e2);
        }
    }

    Ok(LoglikParts {
        change_point,
        pre_effects: -n * LN_2PI - 0.5 * n * ln_det_a - 0.5 * quad_a,
        post_effects: -n * LN_2PI - 0.5 * n * ln_det_b - 0.5 * quad_b,
        residual,
    })
}
