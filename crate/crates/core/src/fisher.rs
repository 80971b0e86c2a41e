//! Standard errors from the Fisher information of the linearized model.
//!
//! The mean function is expanded to first order around each subject's
//! latent state (in practice the current draw or a posterior mean): with
//! `Z_i = d mu_i / d z` at that point, the marginal model is Gaussian with
//! design `X_i = Z_i` for the fixed effects and covariance
//! `V_i = Z_i Sigma Z_i' + sigma_e^2 I`, `Sigma = blockdiag(sigma_tau^2, A, B)`.
//! The information is block-diagonal: `sum_i X_i' V_i^-1 X_i` for the fixed
//! effects and `1/2 tr(V^-1 dV V^-1 dV)` for the variance components, the
//! latter taken on the internal parameterization (log variances, atanh
//! correlations) and mapped back by the delta method at reporting time.
//!
//! All derivatives are central finite differences with relative step 1e-6.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{eval_mean_latent, LatentState, ModelSpec, SubjectData, Theta};
use crate::params::ParamIndex;

const REL_STEP: f64 = 1e-6;

/// `d mu / d z` for one subject at the linearization point, rows indexed by
/// record, columns by latent coordinate in the order (tau, pre..., post...).
fn latent_jacobian(
    subject: &SubjectData,
    state: &LatentState,
    spec: &ModelSpec,
) -> Result<DMatrix<f64>> {
    let p = state.pre.len();
    let q = 1 + p + state.post.len();
    let n = subject.len();
    let mut jac = DMatrix::zeros(n, q);
    let mut scratch = state.clone();

    for k in 0..q {
        let read = |s: &LatentState| -> f64 {
            if k == 0 {
                s.tau
            } else if k <= p {
                s.pre[k - 1]
            } else {
                s.post[k - 1 - p]
            }
        };
        let write = |s: &mut LatentState, v: f64| {
            if k == 0 {
                s.tau = v;
            } else if k <= p {
                s.pre[k - 1] = v;
            } else {
                s.post[k - 1 - p] = v;
            }
        };
        let z0 = read(state);
        let h = REL_STEP * z0.abs().max(1.0);

        write(&mut scratch, z0 + h);
        for (j, r) in subject.records().iter().enumerate() {
            jac[(j, k)] =
                eval_mean_latent(r.time, scratch.tau, &scratch.pre, &scratch.post, spec)?;
        }
        write(&mut scratch, z0 - h);
        for (j, r) in subject.records().iter().enumerate() {
            let lo = eval_mean_latent(r.time, scratch.tau, &scratch.pre, &scratch.post, spec)?;
            jac[(j, k)] = (jac[(j, k)] - lo) / (2.0 * h);
        }
        write(&mut scratch, z0);
    }
    Ok(jac)
}

fn latent_cov(theta: &Theta) -> DMatrix<f64> {
    let p = theta.a_cov.nrows();
    let q = theta.b_cov.nrows();
    let d = 1 + p + q;
    let mut sigma = DMatrix::zeros(d, d);
    sigma[(0, 0)] = theta.tau_var;
    sigma.view_mut((1, 1), (p, p)).copy_from(&theta.a_cov);
    sigma
        .view_mut((1 + p, 1 + p), (q, q))
        .copy_from(&theta.b_cov);
    sigma
}

/// Fixed-effect information `sum_i Z_i' V_i^-1 Z_i` in latent order
/// (tau, pre..., post...). Valid for any positive semidefinite `Sigma`,
/// including zero.
pub fn fixed_information(
    theta: &Theta,
    latents: &[LatentState],
    data: &[SubjectData],
    spec: &ModelSpec,
) -> Result<DMatrix<f64>> {
    if latents.len() != data.len() {
        return Err(Error::InvalidInput(format!(
            "{} latent states for {} subjects",
            latents.len(),
            data.len()
        )));
    }
    if !(theta.sigma_e2 > 0.0) {
        return Err(Error::InvalidParameter("sigma_e2 must be positive".into()));
    }
    let sigma = latent_cov(theta);
    let d = sigma.nrows();
    let mut info = DMatrix::zeros(d, d);
    for (state, subject) in latents.iter().zip(data) {
        let z = latent_jacobian(subject, state, spec)?;
        let mut v = &z * &sigma * z.transpose();
        for i in 0..subject.len() {
            v[(i, i)] += theta.sigma_e2;
        }
        let chol = v.cholesky().ok_or_else(|| Error::SingularMatrix {
            tag: format!("V for subject `{}`", subject.id),
        })?;
        let vinv_z = chol.solve(&z);
        info += z.transpose() * vinv_z;
    }
    Ok(info)
}

/// Standard errors on the monitored scale plus the assembled information
/// matrix (monitor coordinate order, block-diagonal between the fixed
/// effects and the variance components).
#[derive(Debug, Clone)]
pub struct FisherOutput {
    pub index: ParamIndex,
    pub se: DVector<f64>,
    pub information: DMatrix<f64>,
}

pub fn fisher_information_linearized(
    theta: &Theta,
    latents: &[LatentState],
    data: &[SubjectData],
    spec: &ModelSpec,
) -> Result<FisherOutput> {
    let index = ParamIndex::for_spec(spec);
    let nf = index.n_fixed();
    let nv = index.len() - nf;
    let p = spec.pre_dim();

    let sigma = latent_cov(theta);
    let d = sigma.nrows();

    // Derivatives of (Sigma, sigma_e2) with respect to each internal
    // variance coordinate, by central differences through the coordinate
    // map itself.
    let vfull = index.theta_to_vec(theta)?;
    let mut dsigmas = Vec::with_capacity(nv);
    let mut dsig2s = Vec::with_capacity(nv);
    for u in 0..nv {
        let h = REL_STEP * vfull[nf + u].abs().max(1.0);
        let mut up = vfull.clone();
        up[nf + u] += h;
        let mut dn = vfull.clone();
        dn[nf + u] -= h;
        let tu = index.vec_to_theta(&up)?;
        let td = index.vec_to_theta(&dn)?;
        dsigmas.push((latent_cov(&tu) - latent_cov(&td)) / (2.0 * h));
        dsig2s.push((tu.sigma_e2 - td.sigma_e2) / (2.0 * h));
    }

    let mut info_ff: DMatrix<f64> = DMatrix::zeros(d, d);
    let mut info_vv: DMatrix<f64> = DMatrix::zeros(nv, nv);
    let mut scratch_m: Vec<DMatrix<f64>> = Vec::with_capacity(nv);

    for (state, subject) in latents.iter().zip(data) {
        let n = subject.len();
        let z = latent_jacobian(subject, state, spec)?;
        let mut v = &z * &sigma * z.transpose();
        for i in 0..n {
            v[(i, i)] += theta.sigma_e2;
        }
        let chol = v.cholesky().ok_or_else(|| Error::SingularMatrix {
            tag: format!("V for subject `{}`", subject.id),
        })?;
        let vinv_z = chol.solve(&z);
        info_ff += z.transpose() * &vinv_z;

        scratch_m.clear();
        for u in 0..nv {
            let mut w = &z * &dsigmas[u] * z.transpose();
            if dsig2s[u] != 0.0 {
                for i in 0..n {
                    w[(i, i)] += dsig2s[u];
                }
            }
            scratch_m.push(chol.solve(&w));
        }
        for u in 0..nv {
            for vv in u..nv {
                let mut tr = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        tr += scratch_m[u][(i, j)] * scratch_m[vv][(j, i)];
                    }
                }
                info_vv[(u, vv)] += 0.5 * tr;
            }
        }
    }
    for u in 0..nv {
        for vv in 0..u {
            info_vv[(u, vv)] = info_vv[(vv, u)];
        }
    }

    // Latent order (tau, pre, post) -> monitor order (alpha, beta, tau).
    let perm: Vec<usize> = (0..nf)
        .map(|i| if i < nf - 1 { i + 1 } else { 0 })
        .collect();

    let cov_ff = info_ff
        .clone()
        .cholesky()
        .ok_or_else(|| Error::SingularMatrix {
            tag: "fixed-effect information".into(),
        })?
        .inverse();
    let cov_vv = info_vv
        .clone()
        .cholesky()
        .ok_or_else(|| Error::SingularMatrix {
            tag: "variance-component information".into(),
        })?
        .inverse();

    let mut se = DVector::zeros(index.len());
    for i in 0..nf {
        se[i] = cov_ff[(perm[i], perm[i])].sqrt();
    }
    for u in 0..nv {
        se[nf + u] = cov_vv[(u, u)].sqrt();
    }

    let mut information = DMatrix::zeros(index.len(), index.len());
    for i in 0..nf {
        for j in 0..nf {
            information[(i, j)] = info_ff[(perm[i], perm[j])];
        }
    }
    for u in 0..nv {
        for vv in 0..nv {
            information[(nf + u, nf + vv)] = info_vv[(u, vv)];
        }
    }
    let _ = p;

    Ok(FisherOutput {
        index,
        se,
        information,
    })
}

/// Monitor-scale SE vector for one chain iteration.
pub(crate) fn linearized_se_monitor(
    theta: &Theta,
    latents: &[LatentState],
    data: &[SubjectData],
    spec: &ModelSpec,
) -> Result<DVector<f64>> {
    Ok(fisher_information_linearized(theta, latents, data, spec)?.se)
}
