//! Benchmark harness: runs both estimators over replicated synthetic
//! datasets and scores them against the generating truth.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::baseline::{baseline_fit, Log1PlusConfig};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::model::{ModelSpec, Theta};
use crate::params::ParamIndex;
use crate::samplers::GibbsConfig;
use crate::simgen::{apply_censoring, gen_dataset, CensoringOutcome, SimScenario};
use crate::stem::{pool_estimates, stem_run, StemConfig, StopReason};

/// Estimators the harness can score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Stem,
    Baseline,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::Stem => write!(f, "stem"),
            Method::Baseline => write!(f, "log1plus"),
        }
    }
}

/// Fixed-effect estimates and standard errors from one replicate, ordered
/// like the monitored fixed-effect coordinates (alpha, beta, tau).
#[derive(Debug, Clone)]
pub struct ReplicateEstimate {
    pub est: Vec<f64>,
    pub se: Vec<f64>,
}

/// One scored parameter: mean estimate, mean reported SE, across-replicate
/// SD, and the two accuracy summaries. `mse` and `bias_pct` are absent when
/// the true value is zero.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MetricsRow {
    pub parameter: String,
    pub est: f64,
    pub se: f64,
    pub sd: f64,
    pub mse: Option<f64>,
    pub bias_pct: Option<f64>,
}

/// Scores replicate estimates against the truth.
///
/// Per replicate s with true value t:
/// `MSE` averages `100 * sqrt((est_s - t)^2 + se_s) / |t|` and
/// `Bias%` averages `100 * (est_s - t) / t`.
pub fn compute_metrics(
    estimates: &[ReplicateEstimate],
    theta_true: &Theta,
    index: &ParamIndex,
) -> Result<Vec<MetricsRow>> {
    if estimates.is_empty() {
        return Err(Error::InvalidInput("no replicate estimates".into()));
    }
    let nf = index.n_fixed();
    for e in estimates {
        if e.est.len() != nf || e.se.len() != nf {
            return Err(Error::InvalidInput(format!(
                "replicate estimate has {} coordinates, expected {nf}",
                e.est.len()
            )));
        }
    }
    let truth = index.theta_to_vec(theta_true)?;
    let s = estimates.len() as f64;

    let mut rows = Vec::with_capacity(nf);
    for p in 0..nf {
        let t = truth[p];
        let est_mean = estimates.iter().map(|e| e.est[p]).sum::<f64>() / s;
        let se_mean = estimates.iter().map(|e| e.se[p]).sum::<f64>() / s;
        let sd = if estimates.len() < 2 {
            0.0
        } else {
            (estimates
                .iter()
                .map(|e| (e.est[p] - est_mean).powi(2))
                .sum::<f64>()
                / (s - 1.0))
                .sqrt()
        };
        let (mse, bias_pct) = if t == 0.0 {
            (None, None)
        } else {
            let mse = estimates
                .iter()
                .map(|e| 100.0 * ((e.est[p] - t).powi(2) + e.se[p]).sqrt() / t.abs())
                .sum::<f64>()
                / s;
            let bias = estimates
                .iter()
                .map(|e| 100.0 * (e.est[p] - t) / t)
                .sum::<f64>()
                / s;
            (Some(mse), Some(bias))
        };
        rows.push(MetricsRow {
            parameter: index.names()[p].clone(),
            est: est_mean,
            se: se_mean,
            sd,
            mse,
            bias_pct,
        });
    }
    Ok(rows)
}

/// Per-replicate outcome retained for the run manifest.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ReplicateReport {
    pub replicate: usize,
    pub seed: u64,
    pub censoring: Option<CensoringOutcome>,
    pub stem_iterations: Option<usize>,
    pub stem_converged: Option<bool>,
    pub baseline_iterations: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    pub censor_rate: f64,
    pub metrics: Vec<(Method, Vec<MetricsRow>)>,
    pub replicates: Vec<ReplicateReport>,
    pub n_failed: usize,
}

struct ReplicateOutcome {
    report: ReplicateReport,
    baseline: Option<ReplicateEstimate>,
    stem: Option<ReplicateEstimate>,
}

fn fixed_slice(pooled: &crate::stem::Pooled, nf: usize) -> ReplicateEstimate {
    ReplicateEstimate {
        est: pooled.est.iter().take(nf).copied().collect(),
        se: pooled.se.iter().take(nf).copied().collect(),
    }
}

fn run_replicate(
    r: usize,
    scenario: &SimScenario,
    spec: &ModelSpec,
    methods: &[Method],
    stem_cfg: &StemConfig,
    gibbs_cfg: &GibbsConfig,
    l1p_cfg: &Log1PlusConfig,
) -> ReplicateOutcome {
    let seed = derive_seed(scenario.rng_seed, r as u64);
    let mut report = ReplicateReport {
        replicate: r,
        seed,
        censoring: None,
        stem_iterations: None,
        stem_converged: None,
        baseline_iterations: None,
        error: None,
    };
    let nf = ParamIndex::for_spec(spec).n_fixed();

    let inner = (|| -> Result<(Option<ReplicateEstimate>, Option<ReplicateEstimate>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0));
        let (mut data, _truth) = gen_dataset(scenario, spec, &mut rng)?;
        let censoring = apply_censoring(
            &mut data,
            scenario.detection_limit_log10,
            scenario.censor_rate,
            &mut rng,
        )?;
        report.censoring = Some(censoring);

        // The baseline always runs: it initializes the full fit.
        let bl_gibbs = GibbsConfig {
            rng_seed: derive_seed(seed, 1),
            ..gibbs_cfg.clone()
        };
        let bl = baseline_fit(&data, l1p_cfg, spec, stem_cfg, &bl_gibbs)?;
        report.baseline_iterations = Some(bl.run.history.len());
        let baseline_est = methods
            .contains(&Method::Baseline)
            .then(|| fixed_slice(&bl.pooled, nf));

        let stem_est = if methods.contains(&Method::Stem) {
            let st_gibbs = GibbsConfig {
                rng_seed: derive_seed(seed, 2),
                ..gibbs_cfg.clone()
            };
            let run = stem_run(&data, &bl.stem_init, spec, stem_cfg, &st_gibbs)?;
            report.stem_iterations = Some(run.history.len());
            report.stem_converged = Some(matches!(run.stop, StopReason::Stationary { .. }));
            let pooled = pool_estimates(&run.history, stem_cfg.batch_size_m)?;
            Some(fixed_slice(&pooled, nf))
        } else {
            None
        };
        Ok((baseline_est, stem_est))
    })();

    match inner {
        Ok((baseline, stem)) => ReplicateOutcome {
            report,
            baseline,
            stem,
        },
        Err(e) => {
            report.error = Some(e.to_string());
            ReplicateOutcome {
                report,
                baseline: None,
                stem: None,
            }
        }
    }
}

/// Runs every replicate of a scenario (in parallel, each on its own derived
/// seed), scores the requested methods, and fails the scenario outright
/// when more than 20% of replicates error out.
pub fn run_scenario(
    scenario: &SimScenario,
    spec: &ModelSpec,
    methods: &[Method],
    stem_cfg: &StemConfig,
    gibbs_cfg: &GibbsConfig,
    l1p_cfg: &Log1PlusConfig,
) -> Result<ScenarioOutcome> {
    scenario.validate()?;
    spec.validate()?;
    let outcomes: Vec<ReplicateOutcome> = (0..scenario.n_replicates)
        .into_par_iter()
        .map(|r| run_replicate(r, scenario, spec, methods, stem_cfg, gibbs_cfg, l1p_cfg))
        .collect();

    let n_failed = outcomes.iter().filter(|o| o.report.error.is_some()).count();
    let budget = scenario.n_replicates as f64 * 0.2;
    if n_failed as f64 > budget {
        let first = outcomes
            .iter()
            .find_map(|o| o.report.error.clone())
            .unwrap_or_default();
        return Err(Error::ScenarioFailed(format!(
            "{n_failed}/{} replicates failed (budget 20%); first error: {first}",
            scenario.n_replicates
        )));
    }

    let index = ParamIndex::for_spec(spec);
    let mut metrics = Vec::new();
    for method in methods {
        let ests: Vec<ReplicateEstimate> = outcomes
            .iter()
            .filter_map(|o| match method {
                Method::Baseline => o.baseline.clone(),
                Method::Stem => o.stem.clone(),
            })
            .collect();
        if ests.is_empty() {
            return Err(Error::ScenarioFailed(format!(
                "no successful replicates for method {method}"
            )));
        }
        metrics.push((*method, compute_metrics(&ests, &scenario.theta_true, &index)?));
    }

    Ok(ScenarioOutcome {
        censor_rate: scenario.censor_rate,
        metrics,
        replicates: outcomes.into_iter().map(|o| o.report).collect(),
        n_failed,
    })
}
