//! The stochastic EM loop: alternate the per-subject Gibbs imputation with
//! the closed-form M-step, monitor the parameter chain for stationarity,
//! and pool the tail of the chain into point estimates and standard errors.

use std::collections::VecDeque;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::convergence::{stationarity_check, GewekeReport};
use crate::error::{Error, Result};
use crate::fisher;
use crate::model::{eval_mean, LatentState, ModelSpec, SubjectData, Theta};
use crate::params::ParamIndex;
use crate::samplers::{gibbs_sweep_with, GibbsConfig, SweepPlan};

/// Knobs for the StEM iteration and pooling.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StemConfig {
    /// Batch size `M`: the window checked for stationarity and pooled.
    pub batch_size_m: usize,
    /// The window advances by `w` iterations between checks.
    pub window_w: usize,
    /// Stationary when the summed squared Geweke z stays below `epsilon * P`.
    pub epsilon: f64,
    pub max_iterations: usize,
    /// Monte Carlo draws for per-subject posterior-mean prediction.
    pub posterior_mean_draws: usize,
}

impl Default for StemConfig {
    fn default() -> Self {
        Self {
            batch_size_m: 300,
            window_w: 10,
            epsilon: 1.5,
            max_iterations: 5000,
            posterior_mean_draws: 100,
        }
    }
}

impl StemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size_m < 2 {
            return Err(Error::InvalidConfig(
                "batch_size_m must be at least 2".into(),
            ));
        }
        if self.window_w < 1 {
            return Err(Error::InvalidConfig("window_w must be at least 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig("epsilon must be positive".into()));
        }
        if self.max_iterations < self.batch_size_m {
            return Err(Error::InvalidConfig(format!(
                "max_iterations ({}) must cover at least one batch of {}",
                self.max_iterations, self.batch_size_m
            )));
        }
        Ok(())
    }
}

/// Append-only record of the parameter chain: one `Theta`, one monitored
/// coordinate row, and (when available) one per-iteration SE row per
/// iteration.
#[derive(Debug, Clone)]
pub struct ChainHistory {
    index: ParamIndex,
    thetas: Vec<Theta>,
    rows: Vec<DVector<f64>>,
    ses: Vec<Option<DVector<f64>>>,
}

impl ChainHistory {
    pub fn new(index: ParamIndex) -> Self {
        Self {
            index,
            thetas: Vec::new(),
            rows: Vec::new(),
            ses: Vec::new(),
        }
    }

    /// A history carrying only coordinate rows (no thetas, no SEs); enough
    /// for stationarity checks on synthetic chains.
    pub fn from_rows(index: ParamIndex, rows: Vec<DVector<f64>>) -> Self {
        let n = rows.len();
        Self {
            index,
            thetas: Vec::new(),
            rows,
            ses: vec![None; n],
        }
    }

    pub fn push(&mut self, theta: Theta, row: DVector<f64>, se: Option<DVector<f64>>) {
        debug_assert_eq!(row.len(), self.index.len());
        self.thetas.push(theta);
        self.rows.push(row);
        self.ses.push(se);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn index(&self) -> &ParamIndex {
        &self.index
    }

    pub fn thetas(&self) -> &[Theta] {
        &self.thetas
    }

    pub fn rows(&self) -> &[DVector<f64>] {
        &self.rows
    }

    pub fn ses(&self) -> &[Option<DVector<f64>>] {
        &self.ses
    }

    /// Values of one coordinate over the window `[start, start + len)`.
    pub fn coordinate_window(&self, coord: usize, start: usize, len: usize) -> Vec<f64> {
        self.rows[start..start + len]
            .iter()
            .map(|r| r[coord])
            .collect()
    }
}

/// Why the loop stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// The Geweke batch procedure declared the window stationary.
    Stationary { batch: usize },
    /// The iteration budget ran out before stationarity.
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct StemRun {
    pub history: ChainHistory,
    /// Latent states after the final sweep.
    pub final_latents: Vec<LatentState>,
    pub stop: StopReason,
    /// Iteration count at which stationarity was declared.
    pub converged_at: Option<usize>,
    pub checks: Vec<GewekeReport>,
    /// Total rejection proposals consumed, a cost diagnostic.
    pub total_attempts: u64,
}

impl StemRun {
    pub fn converged(&self) -> bool {
        matches!(self.stop, StopReason::Stationary { .. })
    }
}

/// Initial parameters and per-subject latent states. The canonical source
/// is the empirical baseline fit.
#[derive(Debug, Clone)]
pub struct StemInit {
    pub theta: Theta,
    pub latents: Vec<LatentState>,
}

/// Closed-form maximizer of the complete-data log-likelihood: latent sample
/// means, n-divisor covariances, and the mean per-subject mean squared
/// residual.
pub fn m_step(latents: &[LatentState], data: &[SubjectData], spec: &ModelSpec) -> Result<Theta> {
    let n = latents.len();
    if n < 2 {
        return Err(Error::DegenerateSample(format!(
            "m_step needs at least 2 subjects, got {n}"
        )));
    }
    if data.len() != n {
        return Err(Error::InvalidInput(format!(
            "{} latent states for {} subjects",
            n,
            data.len()
        )));
    }
    let nf = n as f64;
    let p = spec.pre_dim();
    let q = spec.post_dim();

    let tau_mean = latents.iter().map(|s| s.tau).sum::<f64>() / nf;
    let tau_var = latents
        .iter()
        .map(|s| (s.tau - tau_mean).powi(2))
        .sum::<f64>()
        / nf;

    let mut alpha = DVector::zeros(p);
    let mut beta = DVector::zeros(q);
    for s in latents {
        alpha += &s.pre;
        beta += &s.post;
    }
    alpha /= nf;
    beta /= nf;

    let mut a_cov = nalgebra::DMatrix::zeros(p, p);
    let mut b_cov = nalgebra::DMatrix::zeros(q, q);
    for s in latents {
        let da = &s.pre - &alpha;
        a_cov.syger(1.0, &da, &da, 1.0);
        let db = &s.post - &beta;
        b_cov.syger(1.0, &db, &db, 1.0);
    }
    a_cov /= nf;
    b_cov /= nf;
    // syger fills one triangle; mirror it.
    for m in [&mut a_cov, &mut b_cov] {
        let d = m.nrows();
        for i in 0..d {
            for j in 0..i {
                m[(j, i)] = m[(i, j)];
            }
        }
    }

    let mut sigma_e2 = 0.0;
    for (s, subj) in latents.iter().zip(data) {
        let mut ssq = 0.0;
        for (j, r) in subj.records().iter().enumerate() {
            let y = s.completed_value(subj, j)?;
            let mu = eval_mean(r.time, s, spec)?;
            ssq += (y - mu) * (y - mu);
        }
        sigma_e2 += ssq / subj.len() as f64;
    }
    sigma_e2 /= nf;

    if !(tau_var > 0.0) {
        return Err(Error::SingularMatrix {
            tag: "sigma_tau2".into(),
        });
    }
    if !(sigma_e2 > 0.0) {
        return Err(Error::SingularMatrix {
            tag: "sigma_e2".into(),
        });
    }
    crate::model::check_spd(&a_cov, "A")?;
    crate::model::check_spd(&b_cov, "B")?;

    Ok(Theta {
        alpha,
        beta,
        tau_mean,
        tau_var,
        a_cov,
        b_cov,
        sigma_e2,
    })
}

/// Runs the StEM loop to stationarity (or the iteration cap), updating all
/// latent blocks each sweep.
pub fn stem_run(
    data: &[SubjectData],
    init: &StemInit,
    spec: &ModelSpec,
    stem_cfg: &StemConfig,
    gibbs_cfg: &GibbsConfig,
) -> Result<StemRun> {
    stem_run_with_plan(data, init, spec, stem_cfg, gibbs_cfg, SweepPlan::default())
}

/// `stem_run` with some latent blocks frozen (the baseline fit freezes the
/// change points and imputations and samples only the effect blocks).
pub fn stem_run_with_plan(
    data: &[SubjectData],
    init: &StemInit,
    spec: &ModelSpec,
    stem_cfg: &StemConfig,
    gibbs_cfg: &GibbsConfig,
    plan: SweepPlan,
) -> Result<StemRun> {
    spec.validate()?;
    stem_cfg.validate()?;
    gibbs_cfg.validate()?;
    init.theta.validate(spec)?;
    if stem_cfg.batch_size_m < 20 {
        return Err(Error::InvalidConfig(
            "batch_size_m must be at least 20 for the stationarity windows".into(),
        ));
    }
    if data.is_empty() {
        return Err(Error::InvalidInput("no subjects".into()));
    }
    if init.latents.len() != data.len() {
        return Err(Error::InvalidInput(format!(
            "{} initial latent states for {} subjects",
            init.latents.len(),
            data.len()
        )));
    }

    let index = ParamIndex::for_spec(spec);
    let mut history = ChainHistory::new(index.clone());
    let mut theta = init.theta.clone();
    let mut latents = init.latents.clone();

    // One deterministic ChaCha stream per subject (stream = ordinal + 1),
    // so parallel and serial sweeps agree bit for bit.
    let mut rngs: Vec<ChaCha8Rng> = (0..data.len())
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(gibbs_cfg.rng_seed);
            r.set_stream(i as u64 + 1);
            r
        })
        .collect();

    let m = stem_cfg.batch_size_m;
    let w = stem_cfg.window_w;
    let mut checks = Vec::new();
    let mut stop = StopReason::MaxIterations;
    let mut converged_at = None;
    let mut total_attempts: u64 = 0;

    // Latent snapshots for the last M iterations; per-iteration SEs are
    // recomputed for the pooled window only, after the loop.
    let mut window_states: VecDeque<Vec<LatentState>> = VecDeque::with_capacity(m + 1);

    for iteration in 1..=stem_cfg.max_iterations {
        let sweep_results: Vec<Result<u64>> = data
            .par_iter()
            .zip(latents.par_iter_mut())
            .zip(rngs.par_iter_mut())
            .map(|((subject, state), rng)| {
                gibbs_sweep_with(subject, state, &theta, spec, gibbs_cfg, plan, rng)
            })
            .collect();
        for r in sweep_results {
            total_attempts += r?;
        }

        theta = m_step(&latents, data, spec)?;
        if !theta.is_finite() {
            return Err(Error::Divergence {
                iteration,
                what: "non-finite parameter coordinate after M-step".into(),
            });
        }
        let row = index.theta_to_vec(&theta)?;
        history.push(theta.clone(), row, None);

        window_states.push_back(latents.clone());
        if window_states.len() > m {
            window_states.pop_front();
        }

        let len = history.len();
        if len >= m && (len - m) % w == 0 {
            let b = (len - m) / w;
            let report = stationarity_check(&history, m, b, w, stem_cfg.epsilon)?;
            let stationary = report.stationary;
            checks.push(report);
            if stationary {
                stop = StopReason::Stationary { batch: b };
                converged_at = Some(len);
                break;
            }
        }
    }

    // Fill in linearized SEs for the pooled window.
    let len = history.len();
    let first = len - window_states.len();
    let ses: Vec<Option<DVector<f64>>> = window_states
        .par_iter()
        .enumerate()
        .map(|(k, states)| {
            let th = &history.thetas()[first + k];
            fisher::linearized_se_monitor(th, states, data, spec).ok()
        })
        .collect();
    for (k, se) in ses.into_iter().enumerate() {
        history.ses[first + k] = se;
    }

    Ok(StemRun {
        history,
        final_latents: latents,
        stop,
        converged_at,
        checks,
        total_attempts,
    })
}

/// Pooled point estimates and standard errors over the last `m` chain
/// entries, coordinate-wise on the monitored scale:
/// est = mean, se = sqrt(mean within-iteration variance
/// + (1 + 1/M) * between-iteration variance).
#[derive(Debug, Clone)]
pub struct Pooled {
    pub index: ParamIndex,
    pub est: DVector<f64>,
    pub se: DVector<f64>,
    /// Iterations pooled (the last `m`).
    pub window: usize,
}

impl Pooled {
    pub fn theta(&self) -> Result<Theta> {
        self.index.vec_to_theta(&self.est)
    }

    /// Position of a named coordinate.
    pub fn coord(&self, name: &str) -> Option<usize> {
        self.index.names().iter().position(|n| n == name)
    }
}

pub fn pool_estimates(history: &ChainHistory, m: usize) -> Result<Pooled> {
    if m < 2 {
        return Err(Error::InvalidConfig(format!(
            "pooling needs M >= 2, got {m}"
        )));
    }
    if history.len() < m {
        return Err(Error::InvalidInput(format!(
            "chain has {} iterations, cannot pool {m}",
            history.len()
        )));
    }
    let p = history.index().len();
    let start = history.len() - m;
    let mf = m as f64;

    let mut est = DVector::zeros(p);
    for row in &history.rows()[start..] {
        est += row;
    }
    est /= mf;

    let mut within = DVector::zeros(p);
    for (k, se) in history.ses()[start..].iter().enumerate() {
        let se = se.as_ref().ok_or_else(|| {
            Error::InvalidInput(format!(
                "per-iteration SE missing at iteration {}",
                start + k + 1
            ))
        })?;
        within += se.component_mul(se);
    }
    within /= mf;

    let mut between = DVector::zeros(p);
    for row in &history.rows()[start..] {
        let d = row - &est;
        between += d.component_mul(&d);
    }
    between /= mf - 1.0;

    let se = DVector::from_iterator(
        p,
        (0..p).map(|i| (within[i] + (1.0 + 1.0 / mf) * between[i]).sqrt()),
    );

    Ok(Pooled {
        index: history.index().clone(),
        est,
        se,
        window: m,
    })
}

/// 95% day-scale confidence interval for a latent-scale change-point mean:
/// `exp(tau +- 1.96 se) * 365.25`.
pub fn changepoint_day_ci(tau: f64, se: f64) -> (f64, f64) {
    (
        (tau - 1.96 * se).exp() * 365.25,
        (tau + 1.96 * se).exp() * 365.25,
    )
}

/// Posterior-mean latent state for one subject: averages `n_draws` Gibbs
/// states coordinate-wise on the latent scale after a short warm-up. The
/// natural-scale change point is then `exp(mean latent tau)`, not the mean
/// of exponentials.
pub fn posterior_mean_latents<R: Rng + ?Sized>(
    subject: &SubjectData,
    theta: &Theta,
    spec: &ModelSpec,
    n_draws: usize,
    rng: &mut R,
) -> Result<LatentState> {
    if n_draws == 0 {
        return Err(Error::InvalidConfig(
            "posterior mean needs at least one draw".into(),
        ));
    }
    let cfg = GibbsConfig::default();
    let mut state = LatentState::prior_init(subject, theta);
    const WARMUP: usize = 50;
    for _ in 0..WARMUP {
        crate::samplers::gibbs_sweep(subject, &mut state, theta, spec, &cfg, rng)?;
    }
    let mut acc = LatentState::new(
        0.0,
        DVector::zeros(state.pre.len()),
        DVector::zeros(state.post.len()),
    );
    for (&k, _) in &state.imputed {
        acc.imputed.insert(k, 0.0);
    }
    for _ in 0..n_draws {
        crate::samplers::gibbs_sweep(subject, &mut state, theta, spec, &cfg, rng)?;
        acc.tau += state.tau;
        acc.pre += &state.pre;
        acc.post += &state.post;
        for (&k, &v) in &state.imputed {
            *acc.imputed.get_mut(&k).unwrap() += v;
        }
    }
    let nf = n_draws as f64;
    acc.tau /= nf;
    acc.pre /= nf;
    acc.post /= nf;
    for v in acc.imputed.values_mut() {
        *v /= nf;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ObservationRecord;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use nalgebra::dvector;

    fn spec() -> ModelSpec {
        ModelSpec::hiv()
    }

    fn subjects(n: usize) -> Vec<SubjectData> {
        (0..n)
            .map(|i| {
                SubjectData::new(
                    format!("s{i}"),
                    vec![
                        ObservationRecord::observed(0.2, 4.0 + 0.1 * i as f64, 2.0),
                        ObservationRecord::observed(1.1, 2.6, 2.0),
                        ObservationRecord::observed(2.3, 2.1, 2.0),
                    ],
                )
                .unwrap()
            })
            .collect()
    }

    fn latent(tau: f64, a: f64, b: [f64; 4]) -> LatentState {
        LatentState::new(tau, dvector![a], DVector::from_row_slice(&b))
    }

    #[test]
    fn m_step_closed_forms_on_small_sample() {
        // Five subjects so the 4x4 post-effect sample covariance has full
        // rank; deviations around the base sum to zero by construction.
        let data = subjects(5);
        let base = [2.0, 1.0, 0.5, -0.5];
        let devs = [
            [0.1, 0.0, 0.0, 0.0],
            [0.0, 0.1, 0.0, 0.0],
            [0.0, 0.0, 0.1, 0.0],
            [0.0, 0.0, 0.0, 0.1],
            [-0.1, -0.1, -0.1, -0.1],
        ];
        let taus = [-1.0, -2.0, -3.0, -2.0, -2.0];
        let avals = [0.1, 0.2, 0.3, 0.15, 0.25];
        let latents: Vec<LatentState> = (0..5)
            .map(|i| {
                let mut b = base;
                for k in 0..4 {
                    b[k] += devs[i][k];
                }
                latent(taus[i], avals[i], b)
            })
            .collect();
        let theta = m_step(&latents, &data, &spec()).unwrap();
        assert_abs_diff_eq!(theta.tau_mean, -2.0, epsilon = 1e-12);
        // n-divisor variance: (1 + 0 + 1 + 0 + 0) / 5.
        assert_abs_diff_eq!(theta.tau_var, 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(theta.alpha[0], 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(theta.a_cov[(0, 0)], 0.025 / 5.0, epsilon = 1e-12);
        for k in 0..4 {
            assert_abs_diff_eq!(theta.beta[k], base[k], epsilon = 1e-12);
            // Sigma dev dev' / n = 0.01 (I + ones) / 5.
            assert_abs_diff_eq!(theta.b_cov[(k, k)], 0.004, epsilon = 1e-12);
            assert_abs_diff_eq!(theta.b_cov[(k, (k + 1) % 4)], 0.002, epsilon = 1e-12);
        }
    }

    #[test]
    fn m_step_flags_identical_latents_as_singular() {
        let data = subjects(3);
        let one = latent(-1.0, 0.1, [2.0, 1.0, 0.5, -0.5]);
        let err = m_step(&vec![one.clone(), one.clone(), one], &data, &spec()).unwrap_err();
        assert!(matches!(err, Error::SingularMatrix { .. }));
    }

    #[test]
    fn m_step_needs_two_subjects() {
        let data = subjects(1);
        let latents = vec![latent(-1.0, 0.1, [2.0, 1.0, 0.5, -0.5])];
        assert!(matches!(
            m_step(&latents, &data, &spec()).unwrap_err(),
            Error::DegenerateSample(_)
        ));
    }

    fn constant_history(rows: Vec<DVector<f64>>, ses: Vec<Option<DVector<f64>>>) -> ChainHistory {
        let index = ParamIndex::from_names(
            (0..rows[0].len()).map(|i| format!("c{i}")).collect(),
        );
        let mut h = ChainHistory::from_rows(index, rows);
        h.ses = ses;
        h
    }

    #[test]
    fn pooling_constant_chain_returns_the_constant() {
        let rows = vec![dvector![3.0, -1.0]; 40];
        let ses = vec![Some(dvector![0.5, 0.2]); 40];
        let h = constant_history(rows, ses);
        let pooled = pool_estimates(&h, 40).unwrap();
        assert_abs_diff_eq!(pooled.est[0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pooled.se[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(pooled.se[1], 0.2, epsilon = 1e-12);
    }

    #[test]
    fn pooling_two_point_chain_matches_hand_arithmetic() {
        let rows = vec![dvector![0.0], dvector![2.0]];
        let ses = vec![Some(dvector![0.0]); 2];
        let h = constant_history(rows, ses);
        let pooled = pool_estimates(&h, 2).unwrap();
        assert_abs_diff_eq!(pooled.est[0], 1.0, epsilon = 1e-12);
        // sqrt((1 + 1/2) * ((0-1)^2 + (2-1)^2) / (2-1)) = sqrt(3)
        assert_relative_eq!(pooled.se[0], 3.0f64.sqrt(), max_relative = 1e-12);
    }

    #[test]
    fn pooling_rejects_small_m_and_short_chains() {
        let rows = vec![dvector![0.0], dvector![2.0]];
        let ses = vec![Some(dvector![0.0]); 2];
        let h = constant_history(rows, ses);
        assert!(matches!(
            pool_estimates(&h, 1).unwrap_err(),
            Error::InvalidConfig(_)
        ));
        assert!(matches!(
            pool_estimates(&h, 3).unwrap_err(),
            Error::InvalidInput(_)
        ));
    }

    #[test]
    fn pooling_is_affine_equivariant() {
        let rows: Vec<DVector<f64>> = (0..30).map(|i| dvector![0.1 * i as f64]).collect();
        let ses = vec![Some(dvector![0.3]); 30];
        let h = constant_history(rows.clone(), ses.clone());
        let pooled = pool_estimates(&h, 30).unwrap();

        let transformed: Vec<DVector<f64>> =
            rows.iter().map(|r| (r * -2.0).add_scalar(5.0)).collect();
        let ses2 = vec![Some(dvector![0.6]); 30];
        let h2 = constant_history(transformed, ses2);
        let pooled2 = pool_estimates(&h2, 30).unwrap();
        assert_relative_eq!(pooled2.est[0], -2.0 * pooled.est[0] + 5.0, max_relative = 1e-12);
        // within and between both scale by 4 = (-2)^2, so the SE doubles.
        assert_relative_eq!(pooled2.se[0], 2.0 * pooled.se[0], max_relative = 1e-12);
    }

    #[test]
    fn day_scale_ci_fixture() {
        let (lo, hi) = changepoint_day_ci(-1.15, 0.17);
        assert!((lo - 83.0).abs() < 1.0, "low end {lo}");
        assert!((hi - 161.0).abs() < 1.0, "high end {hi}");
    }
}
