//! Flat coordinate view of `Theta` used for trace emission, convergence
//! monitoring, pooling, and variance-component standard errors.
//!
//! Fixed effects are monitored on their own scale. Variance components use
//! an internal parameterization — log variances and `atanh` correlations —
//! which keeps coordinates scale-comparable near zero and the information
//! block well conditioned. Order: pre-segment fixed effects, post-segment
//! fixed effects, change-point mean, then `ln sigma_tau^2`, the pre-effect
//! covariance block, the post-effect covariance block, and `ln sigma_e^2`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{ModelSpec, Theta};

/// What a monitored coordinate is, for mapping estimates and standard
/// errors back to the natural scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoordKind {
    Fixed,
    LogVariance,
    AtanhCorrelation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamIndex {
    names: Vec<String>,
    kinds: Vec<CoordKind>,
    pre_dim: usize,
    post_dim: usize,
}

fn cov_block_names(prefix: &str, dim: usize, names: &mut Vec<String>, kinds: &mut Vec<CoordKind>) {
    if dim == 1 {
        names.push(format!("log_sigma_{prefix}2"));
        kinds.push(CoordKind::LogVariance);
        return;
    }
    for i in 0..dim {
        names.push(format!("log_{prefix}_var{}", i + 1));
        kinds.push(CoordKind::LogVariance);
    }
    for i in 0..dim {
        for j in (i + 1)..dim {
            names.push(format!("atanh_{prefix}_corr{}{}", i + 1, j + 1));
            kinds.push(CoordKind::AtanhCorrelation);
        }
    }
}

impl ParamIndex {
    /// An index over arbitrary named coordinates, all treated as
    /// fixed-effect-like (no internal transform). Used for synthetic chains
    /// and generic monitoring.
    pub fn from_names(names: Vec<String>) -> Self {
        let kinds = vec![CoordKind::Fixed; names.len()];
        Self {
            names,
            kinds,
            pre_dim: 0,
            post_dim: 0,
        }
    }

    pub fn for_spec(spec: &ModelSpec) -> Self {
        let (p, q) = (spec.pre_dim(), spec.post_dim());
        let mut names = Vec::new();
        let mut kinds = Vec::new();
        for i in 0..p {
            names.push(if p == 1 {
                "alpha".to_string()
            } else {
                format!("alpha{}", i + 1)
            });
            kinds.push(CoordKind::Fixed);
        }
        for i in 0..q {
            names.push(format!("beta{}", i + 1));
            kinds.push(CoordKind::Fixed);
        }
        names.push("tau".to_string());
        kinds.push(CoordKind::Fixed);

        names.push("log_sigma_tau2".to_string());
        kinds.push(CoordKind::LogVariance);
        cov_block_names("a", p, &mut names, &mut kinds);
        cov_block_names("b", q, &mut names, &mut kinds);
        names.push("log_sigma_e2".to_string());
        kinds.push(CoordKind::LogVariance);

        Self {
            names,
            kinds,
            pre_dim: p,
            post_dim: q,
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Number of fixed-effect coordinates (alpha, beta, tau).
    pub fn n_fixed(&self) -> usize {
        self.pre_dim + self.post_dim + 1
    }

    pub fn pre_dim(&self) -> usize {
        self.pre_dim
    }

    pub fn post_dim(&self) -> usize {
        self.post_dim
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn kind(&self, i: usize) -> CoordKind {
        self.kinds[i]
    }

    /// Natural-scale display name for a coordinate.
    pub fn natural_name(&self, i: usize) -> String {
        match self.kinds[i] {
            CoordKind::Fixed => self.names[i].clone(),
            CoordKind::LogVariance => self.names[i].trim_start_matches("log_").to_string(),
            CoordKind::AtanhCorrelation => self.names[i].trim_start_matches("atanh_").to_string(),
        }
    }

    /// Maps a monitored estimate and standard error back to the natural
    /// scale by the delta method.
    pub fn natural_est_se(&self, i: usize, est: f64, se: f64) -> (f64, f64) {
        match self.kinds[i] {
            CoordKind::Fixed => (est, se),
            CoordKind::LogVariance => {
                let v = est.exp();
                (v, v * se)
            }
            CoordKind::AtanhCorrelation => {
                let r = est.tanh();
                (r, (1.0 - r * r) * se)
            }
        }
    }

    pub fn theta_to_vec(&self, theta: &Theta) -> Result<DVector<f64>> {
        let mut v = Vec::with_capacity(self.len());
        v.extend(theta.alpha.iter().copied());
        v.extend(theta.beta.iter().copied());
        v.push(theta.tau_mean);
        v.push(pos_ln(theta.tau_var, "sigma_tau2")?);
        push_cov(&theta.a_cov, "A", &mut v)?;
        push_cov(&theta.b_cov, "B", &mut v)?;
        v.push(pos_ln(theta.sigma_e2, "sigma_e2")?);
        debug_assert_eq!(v.len(), self.len());
        Ok(DVector::from_vec(v))
    }

    pub fn vec_to_theta(&self, v: &DVector<f64>) -> Result<Theta> {
        if v.len() != self.len() {
            return Err(Error::InvalidInput(format!(
                "coordinate vector has length {}, expected {}",
                v.len(),
                self.len()
            )));
        }
        let (p, q) = (self.pre_dim, self.post_dim);
        let mut k = 0;
        let alpha = DVector::from_iterator(p, v.iter().skip(k).take(p).copied());
        k += p;
        let beta = DVector::from_iterator(q, v.iter().skip(k).take(q).copied());
        k += q;
        let tau_mean = v[k];
        k += 1;
        let tau_var = v[k].exp();
        k += 1;
        let (a_cov, used) = pop_cov(v, k, p);
        k += used;
        let (b_cov, used) = pop_cov(v, k, q);
        k += used;
        let sigma_e2 = v[k].exp();
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
}

fn pos_ln(x: f64, tag: &str) -> Result<f64> {
    if x > 0.0 {
        Ok(x.ln())
    } else {
        Err(Error::SingularMatrix { tag: tag.into() })
    }
}

const CORR_CAP: f64 = 1.0 - 1e-12;

fn push_cov(m: &DMatrix<f64>, tag: &str, out: &mut Vec<f64>) -> Result<()> {
    let d = m.nrows();
    for i in 0..d {
        out.push(pos_ln(m[(i, i)], tag)?);
    }
    for i in 0..d {
        for j in (i + 1)..d {
            let r = m[(i, j)] / (m[(i, i)] * m[(j, j)]).sqrt();
            out.push(r.clamp(-CORR_CAP, CORR_CAP).atanh());
        }
    }
    Ok(())
}

fn pop_cov(v: &DVector<f64>, start: usize, d: usize) -> (DMatrix<f64>, usize) {
    let sds: Vec<f64> = (0..d).map(|i| (v[start + i].exp()).sqrt()).collect();
    let mut m = DMatrix::zeros(d, d);
    for i in 0..d {
        m[(i, i)] = sds[i] * sds[i];
    }
    let mut k = start + d;
    for i in 0..d {
        for j in (i + 1)..d {
            let cov = v[k].tanh() * sds[i] * sds[j];
            m[(i, j)] = cov;
            m[(j, i)] = cov;
            k += 1;
        }
    }
    (m, k - start)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dvector;

    fn theta() -> Theta {
        Theta {
            alpha: dvector![0.14],
            beta: dvector![10.72, 4.59, 4.21, -1.64],
            tau_mean: -1.15,
            tau_var: 3.8809,
            a_cov: DMatrix::from_diagonal(&dvector![4e-4]),
            b_cov: DMatrix::from_fn(4, 4, |i, j| if i == j { 1.0 + i as f64 } else { 0.2 }),
            sigma_e2: 0.2116,
        }
    }

    #[test]
    fn coordinate_count_for_the_application_model() {
        let idx = ParamIndex::for_spec(&ModelSpec::hiv());
        // 6 fixed effects + 13 variance components.
        assert_eq!(idx.len(), 19);
        assert_eq!(idx.n_fixed(), 6);
        assert_eq!(idx.names()[0], "alpha");
        assert_eq!(idx.names()[5], "tau");
        assert_eq!(idx.names()[6], "log_sigma_tau2");
        assert_eq!(idx.names()[18], "log_sigma_e2");
    }

    #[test]
    fn round_trip_is_exact_up_to_float_noise() {
        let idx = ParamIndex::for_spec(&ModelSpec::hiv());
        let t = theta();
        let v = idx.theta_to_vec(&t).unwrap();
        let back = idx.vec_to_theta(&v).unwrap();
        assert_relative_eq!(back.tau_var, t.tau_var, max_relative = 1e-12);
        assert_relative_eq!(back.sigma_e2, t.sigma_e2, max_relative = 1e-12);
        for i in 0..4 {
            for j in 0..4 {
                assert_relative_eq!(back.b_cov[(i, j)], t.b_cov[(i, j)], max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn natural_mapping_applies_delta_method() {
        let idx = ParamIndex::for_spec(&ModelSpec::hiv());
        let (est, se) = idx.natural_est_se(6, (2.0f64).ln(), 0.5);
        assert_relative_eq!(est, 2.0, max_relative = 1e-12);
        assert_relative_eq!(se, 1.0, max_relative = 1e-12);
        let (e2, s2) = idx.natural_est_se(5, -1.15, 0.17);
        assert_eq!((e2, s2), (-1.15, 0.17));
    }

    #[test]
    fn singular_theta_is_rejected() {
        let idx = ParamIndex::for_spec(&ModelSpec::hiv());
        let mut t = theta();
        t.tau_var = 0.0;
        assert!(idx.theta_to_vec(&t).is_err());
    }
}
