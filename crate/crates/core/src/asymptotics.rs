//! Exact asymptotic expressions of the stepwise controller: the Gram-matrix
//! normalizer `D_t`, the regret expressions, and the regret/estimation
//! trade-off diagnostic.

use nalgebra::DMatrix;

use crate::controller::{schedule_factor, AlgoConfig, EstimatorState};
use crate::error::{LqacError, Result};
use crate::linalg;
use crate::lqr::{self, DareOptions, DareSolution, SystemParams};

/// Deterministic normalizer `D_t` with `D_t^{-1} Gram_t D_t^{-T} -> I`.
#[derive(Debug, Clone, PartialEq)]
pub struct AsymptoticNormalizer {
    /// Closed loop `A + BK`.
    pub l: DMatrix<f64>,
    pub c_t: DMatrix<f64>,
    pub d_t: DMatrix<f64>,
    pub t: usize,
    pub beta: f64,
    pub alpha: f64,
    pub tau: f64,
    pub sigma: f64,
}

impl AsymptoticNormalizer {
    /// Symmetric square root of `C_t`.
    pub fn c_t_sqrt(&self) -> DMatrix<f64> {
        linalg::sym_sqrt(&self.c_t)
    }

    /// `D_t^{-1} G D_t^{-T}`.
    pub fn normalize_gram(&self, gram: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let lu = self.d_t.clone().lu();
        let left = lu.solve(gram).ok_or(LqacError::SingularGram)?;
        let both = lu.solve(&left.transpose()).ok_or(LqacError::SingularGram)?;
        Ok(both.transpose())
    }
}

/// `sum_p L^p L^p'` and `sum_p L^p B B' L^p'`.
pub fn closed_loop_sums(
    params: &SystemParams,
    sol: &DareSolution,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let n = params.n();
    let l = &params.a + &params.b * &sol.k;
    let x1 = lqr::solve_discrete_lyapunov(&l, &DMatrix::identity(n, n))?;
    let x2 = lqr::solve_discrete_lyapunov(&l, &(&params.b * params.b.transpose()))?;
    Ok((l, x1, x2))
}

/// `C_t = t^(1-beta) log^(-alpha)(t) sigma^2 X1 + (tau^2/beta) X2` and
/// `D_t = t^(beta/2) log^(alpha/2)(t) [[I, 0], [K, I]] diag(C_t^(1/2), tau/sqrt(beta) I)`.
pub fn build_normalizer(
    params: &SystemParams,
    sol: &DareSolution,
    config: &AlgoConfig,
    t: usize,
) -> Result<AsymptoticNormalizer> {
    if t < 2 {
        return Err(LqacError::DomainError(format!(
            "normalizer needs t >= 2, got {t}"
        )));
    }
    let (n, d) = (params.n(), params.d());
    let (l, x1, x2) = closed_loop_sums(params, sol)?;
    let (beta, alpha, tau, sigma) = (config.beta, config.alpha, config.tau, params.sigma);
    let rate = schedule_factor(beta, alpha, t);
    let c_t = x1 * (sigma * sigma / rate) + x2 * (tau * tau / beta);

    let mut lower = DMatrix::identity(n + d, n + d);
    lower.view_mut((n, 0), (d, n)).copy_from(&sol.k);
    let mut diag = DMatrix::zeros(n + d, n + d);
    diag.view_mut((0, 0), (n, n))
        .copy_from(&linalg::sym_sqrt(&c_t));
    let input_scale = (tau * tau / beta).sqrt();
    for i in n..n + d {
        diag[(i, i)] = input_scale;
    }
    // t^(beta/2) log^(alpha/2)(t) = sqrt(t * rate)
    let d_t = lower * diag * (t as f64 * rate).sqrt();
    Ok(AsymptoticNormalizer {
        l,
        c_t,
        d_t,
        t,
        beta,
        alpha,
        tau,
        sigma,
    })
}

fn regret_scale(config: &AlgoConfig, horizon: usize) -> f64 {
    config.tau * config.tau / config.beta * schedule_factor(config.beta, config.alpha, horizon)
}

fn regret_trace(b: &DMatrix<f64>, p: &DMatrix<f64>, r: &DMatrix<f64>) -> f64 {
    (b.transpose() * p * b + r).trace()
}

/// `tau^2 / beta * Tr(B'PB + R) * T^(beta-1) log^alpha(T)`.
pub fn parametric_regret(
    params: &SystemParams,
    sol: &DareSolution,
    config: &AlgoConfig,
    horizon: usize,
) -> f64 {
    regret_scale(config, horizon) * regret_trace(&params.b, &sol.p, &params.r)
}

/// The regret expression with `P` and `B` replaced by the plug-in values
/// at the current estimates. `horizon` may lie beyond the estimator's step.
pub fn observable_regret(
    state: &EstimatorState,
    params: &SystemParams,
    config: &AlgoConfig,
    horizon: usize,
) -> Result<f64> {
    observable_regret_at(&state.a_hat, &state.b_hat, params, config, horizon)
}

/// [`observable_regret`] from a bare estimate pair.
pub fn observable_regret_at(
    a_hat: &DMatrix<f64>,
    b_hat: &DMatrix<f64>,
    params: &SystemParams,
    config: &AlgoConfig,
    horizon: usize,
) -> Result<f64> {
    if !linalg::all_finite(a_hat) || !linalg::all_finite(b_hat) {
        return Err(LqacError::NotStabilizable);
    }
    let sol = lqr::solve_dare_with(a_hat, b_hat, &params.q, &params.r, &DareOptions::default())?;
    Ok(regret_scale(config, horizon) * regret_trace(b_hat, &sol.p, &params.r))
}

/// `t * R(U, t) * Cov(vec(B_hat_t - B))` from a batch of runs: `regrets`
/// are average regrets at `t`, `b_errors` the matching `B_hat_t - B`. The
/// limit is `Tr(B'PB + R) sigma^2 I`.
pub fn tradeoff_product(
    regrets: &[f64],
    b_errors: &[DMatrix<f64>],
    t: usize,
) -> Result<DMatrix<f64>> {
    if regrets.len() != b_errors.len() || b_errors.len() < 2 {
        return Err(LqacError::InsufficientPoints {
            needed: 2,
            got: regrets.len().min(b_errors.len()),
        });
    }
    let m = b_errors.len() as f64;
    let dim = b_errors[0].len();
    let vecs: Vec<_> = b_errors.iter().map(linalg::vec).collect();
    let mean = vecs
        .iter()
        .fold(nalgebra::DVector::zeros(dim), |acc, v| acc + v)
        / m;
    let mut cov = DMatrix::zeros(dim, dim);
    for v in &vecs {
        let c = v - &mean;
        cov.ger(1.0, &c, &c, 1.0);
    }
    cov /= m - 1.0;
    let mean_regret = regrets.iter().sum::<f64>() / regrets.len() as f64;
    Ok(cov * (t as f64 * mean_regret))
}

/// Limit of [`tradeoff_product`].
pub fn tradeoff_limit(params: &SystemParams, sol: &DareSolution) -> DMatrix<f64> {
    let nd = params.n() * params.d();
    DMatrix::identity(nd, nd)
        * (regret_trace(&params.b, &sol.p, &params.r) * params.sigma * params.sigma)
}
