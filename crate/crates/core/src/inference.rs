//! Observable confidence regions for `[A, B]` and `K`, prediction regions
//! for the next state, and the chi-square quantiles that calibrate them.
//!
//! Every region is a quadratic form scaled by the known noise variance
//! `sigma^2`. The Gram matrix used here is the full one,
//! `sum_{i=0}^{t-1} z_i z_i'`, which has one more term than the Gram matrix
//! behind the gain applied at step `t`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_lr, ln_gamma};

use crate::controller::{schedule_factor, AlgoConfig, EstimatorSnapshot};
use crate::error::{LqacError, Result};
use crate::linalg;
use crate::lqr::{self, DareOptions, DareSolution, SystemParams};

/// `P(X <= x)` for `X ~ chi^2_dof`.
pub fn chi2_cdf(x: f64, dof: usize) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x.is_infinite() {
        return 1.0;
    }
    gamma_lr(dof as f64 / 2.0, x / 2.0)
}

fn chi2_pdf(x: f64, dof: usize) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let k = dof as f64 / 2.0;
    ((k - 1.0) * x.ln() - x / 2.0 - k * std::f64::consts::LN_2 - ln_gamma(k)).exp()
}

/// Inverse of [`chi2_cdf`]: Newton steps on the regularized incomplete
/// gamma function, falling back to bisection whenever a step leaves the
/// current bracket.
pub fn chi2_quantile(dof: usize, p: f64) -> Result<f64> {
    if dof == 0 {
        return Err(LqacError::DomainError("chi-square needs dof >= 1".into()));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(LqacError::DomainError(format!(
            "quantile level must lie in (0, 1), got {p}"
        )));
    }
    let k = dof as f64;
    // Wilson-Hilferty starting point.
    let z = statrs::distribution::ContinuousCDF::inverse_cdf(
        &statrs::distribution::Normal::standard(),
        p,
    );
    let h = 2.0 / (9.0 * k);
    let mut x = (k * (1.0 - h + z * h.sqrt()).powi(3)).max(1e-8);

    let (mut lo, mut hi) = (0.0, f64::INFINITY);
    for _ in 0..200 {
        let f = chi2_cdf(x, dof) - p;
        if f.abs() < 1e-14 {
            return Ok(x);
        }
        if f < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let dens = chi2_pdf(x, dof);
        let mut next = if dens > 0.0 { x - f / dens } else { f64::NAN };
        if !(next > lo && next < hi) {
            next = if hi.is_finite() {
                0.5 * (lo + hi)
            } else {
                2.0 * x.max(1.0)
            };
        }
        if (next - x).abs() <= 1e-15 * x.max(1.0) {
            return Ok(next);
        }
        x = next;
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    Ab,
    K,
    PredictFull,
    PredictNaive,
    PredictMean,
}

impl RegionKind {
    pub const ALL: [RegionKind; 5] = [
        RegionKind::Ab,
        RegionKind::K,
        RegionKind::PredictFull,
        RegionKind::PredictNaive,
        RegionKind::PredictMean,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RegionKind::Ab => "ab",
            RegionKind::K => "k",
            RegionKind::PredictFull => "pred_full",
            RegionKind::PredictNaive => "pred_naive",
            RegionKind::PredictMean => "pred_mean",
        }
    }

    pub fn parse(s: &str) -> Option<RegionKind> {
        RegionKind::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// `{Theta : tr((Theta - center) weight (Theta - center)') <= threshold}`.
/// Vector-valued regions use a one-row `center`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticRegion {
    pub center: DMatrix<f64>,
    pub weight: DMatrix<f64>,
    pub threshold: f64,
    pub dof: usize,
    pub level: f64,
}

impl QuadraticRegion {
    pub fn new(center: DMatrix<f64>, weight: DMatrix<f64>, dof: usize, level: f64) -> Result<Self> {
        if weight.shape() != (center.ncols(), center.ncols()) {
            return Err(LqacError::DimensionMismatch(format!(
                "region weight is {}x{}, center has {} columns",
                weight.nrows(),
                weight.ncols(),
                center.ncols()
            )));
        }
        Ok(QuadraticRegion {
            threshold: chi2_quantile(dof, level)?,
            center,
            weight,
            dof,
            level,
        })
    }

    pub fn statistic(&self, point: &DMatrix<f64>) -> f64 {
        let e = point - &self.center;
        (&e * &self.weight).component_mul(&e).sum().max(0.0)
    }

    pub fn contains(&self, point: &DMatrix<f64>) -> bool {
        self.statistic(point) <= self.threshold
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionOutcome {
    pub statistic: f64,
    pub threshold: f64,
    pub covered: bool,
    pub t: usize,
    pub kind: RegionKind,
    pub dof: usize,
}

impl RegionOutcome {
    pub fn new(kind: RegionKind, statistic: f64, dof: usize, level: f64, t: usize) -> Result<Self> {
        let threshold = chi2_quantile(dof, level)?;
        Ok(RegionOutcome {
            statistic,
            threshold,
            covered: statistic <= threshold,
            t,
            kind,
            dof,
        })
    }
}

fn inv_sigma_sq(sigma: f64) -> Result<f64> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(1.0 / (sigma * sigma))
    } else {
        Err(LqacError::DomainError(format!(
            "regions need sigma > 0, got {sigma}"
        )))
    }
}

/// Confidence region for `[A, B]` centered at the estimate.
pub fn ab_region(
    a_hat: &DMatrix<f64>,
    b_hat: &DMatrix<f64>,
    gram_full: &DMatrix<f64>,
    sigma: f64,
    level: f64,
) -> Result<QuadraticRegion> {
    let (n, d) = (a_hat.nrows(), b_hat.ncols());
    let weight = gram_full * inv_sigma_sq(sigma)?;
    QuadraticRegion::new(linalg::hstack(a_hat, b_hat), weight, n * (n + d), level)
}

/// `sigma^-2 tr([A_hat - A, B_hat - B] G [A_hat - A, B_hat - B]')`.
pub fn ab_region_statistic(
    a_hat: &DMatrix<f64>,
    b_hat: &DMatrix<f64>,
    gram_full: &DMatrix<f64>,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    sigma: f64,
    level: f64,
    t: usize,
) -> Result<RegionOutcome> {
    let (n, d) = (a.nrows(), b.ncols());
    if a_hat.shape() != (n, n)
        || b_hat.shape() != (n, d)
        || b.nrows() != n
        || gram_full.shape() != (n + d, n + d)
    {
        return Err(LqacError::DimensionMismatch(
            "ab_region_statistic: inconsistent shapes".into(),
        ));
    }
    let region = ab_region(a_hat, b_hat, gram_full, sigma, level)?;
    let stat = region.statistic(&linalg::hstack(a, b));
    RegionOutcome::new(RegionKind::Ab, stat, region.dof, level, t)
}

/// `W = J (G^{-1} (x) I_n) J'` for the gain Jacobian `J`. The Kronecker
/// factor acts on `vec(V)` as `vec(V G^{-1})`.
pub fn k_region_weight(jacobian: &DMatrix<f64>, gram_full: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = gram_full.nrows();
    let n = jacobian.ncols() / p;
    let nd = jacobian.nrows();
    let rows: Vec<DMatrix<f64>> = (0..nd)
        .map(|i| {
            let row: Vec<f64> = jacobian.row(i).iter().copied().collect();
            linalg::unvec(&row, n, p)
        })
        .collect();
    let chol = gram_full
        .clone()
        .cholesky()
        .ok_or(LqacError::SingularGram)?;
    let mut w = DMatrix::zeros(nd, nd);
    for (j, vj) in rows.iter().enumerate() {
        // V G^{-1} = (G^{-1} V')'
        let solved = chol.solve(&vj.transpose()).transpose();
        for (i, vi) in rows.iter().enumerate().take(j + 1) {
            let val = vi.dot(&solved);
            w[(i, j)] = val;
            w[(j, i)] = val;
        }
    }
    Ok(w)
}

/// `sigma^-2 vec(K_hat - K)' W^{-1} vec(K_hat - K)` with the Jacobian
/// evaluated at the estimates `(a_est, b_est)` that produced `k_hat`.
#[allow(clippy::too_many_arguments)]
pub fn k_region_statistic(
    a_est: &DMatrix<f64>,
    b_est: &DMatrix<f64>,
    k_hat: &DMatrix<f64>,
    gram_full: &DMatrix<f64>,
    params: &SystemParams,
    k_true: &DMatrix<f64>,
    level: f64,
    t: usize,
) -> Result<RegionOutcome> {
    let scale = inv_sigma_sq(params.sigma)?;
    if !linalg::all_finite(a_est) || !linalg::all_finite(b_est) {
        return Err(LqacError::NotStabilizable);
    }
    let sol = lqr::solve_dare_with(a_est, b_est, &params.q, &params.r, &DareOptions::default())?;
    let jac = lqr::gain_jacobian_with(a_est, b_est, &params.r, &sol.p, &sol.k)?;
    let w = k_region_weight(&jac.matrix, gram_full)?;
    let nd = w.nrows();
    // Reject weights whose condition number makes the solve meaningless.
    let eig = w.clone().symmetric_eigen().eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    if !(hi > 0.0) || lo <= 1e-14 * hi {
        return Err(LqacError::SingularWeight);
    }
    let chol = w.cholesky().ok_or(LqacError::SingularWeight)?;
    let e = linalg::vec(&(k_hat - k_true));
    let stat = e.dot(&chol.solve(&e)) * scale;
    RegionOutcome::new(RegionKind::K, stat.max(0.0), nd, level, t)
}

fn quad_inverse(gram_full: &DMatrix<f64>, z: &DVector<f64>) -> Result<f64> {
    let chol = gram_full
        .clone()
        .cholesky()
        .ok_or(LqacError::SingularGram)?;
    Ok(z.dot(&chol.solve(z)))
}

/// Prediction region for `x_{t+1}`: full uses the inflation
/// `(1 + z'G^{-1}z)^{-1}`, naive omits it.
#[allow(clippy::too_many_arguments)]
pub fn prediction_region_statistic(
    a_hat: &DMatrix<f64>,
    b_hat: &DMatrix<f64>,
    gram_full: &DMatrix<f64>,
    x: &DVector<f64>,
    u: &DVector<f64>,
    x_next: &DVector<f64>,
    sigma: f64,
    naive: bool,
    level: f64,
    t: usize,
) -> Result<RegionOutcome> {
    let scale = inv_sigma_sq(sigma)?;
    let resid = a_hat * x + b_hat * u - x_next;
    let z = linalg::stack_xu(x, u);
    let inflation = if naive {
        1.0
    } else {
        1.0 / (1.0 + quad_inverse(gram_full, &z)?)
    };
    let kind = if naive {
        RegionKind::PredictNaive
    } else {
        RegionKind::PredictFull
    };
    RegionOutcome::new(
        kind,
        scale * inflation * resid.norm_squared(),
        x.len(),
        level,
        t,
    )
}

/// Region for the conditional mean `A x_t + B u_t`.
#[allow(clippy::too_many_arguments)]
pub fn mean_prediction_statistic(
    a_hat: &DMatrix<f64>,
    b_hat: &DMatrix<f64>,
    gram_full: &DMatrix<f64>,
    x: &DVector<f64>,
    u: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    sigma: f64,
    level: f64,
    t: usize,
) -> Result<RegionOutcome> {
    let scale = inv_sigma_sq(sigma)?;
    let err = (a_hat - a) * x + (b_hat - b) * u;
    let q = quad_inverse(gram_full, &linalg::stack_xu(x, u))?;
    let stat = if q > 0.0 {
        scale * err.norm_squared() / q
    } else {
        0.0
    };
    RegionOutcome::new(RegionKind::PredictMean, stat, x.len(), level, t)
}

/// `sum_p L^p M L^p'` with `M = I`, or `M = I + (tau^2/sigma^2) BB'` in the
/// `beta = 1, alpha = 0` case.
fn prediction_state_sum(
    params: &SystemParams,
    sol: &DareSolution,
    config: &AlgoConfig,
) -> Result<DMatrix<f64>> {
    let n = params.n();
    let l = &params.a + &params.b * &sol.k;
    let mut m = DMatrix::identity(n, n);
    if config.beta == 1.0 && config.alpha == 0.0 {
        let s2 = params.sigma * params.sigma;
        if s2 == 0.0 {
            return Err(LqacError::DomainError("sigma must be positive".into()));
        }
        m += &params.b * params.b.transpose() * (config.tau * config.tau / s2);
    }
    lqr::solve_discrete_lyapunov(&l, &m)
}

/// `(x' X1^{-1} x + beta sigma^2 ||w||^2) / t * I_n`: the asymptotic
/// covariance of `(A_hat - A) x_t + (B_hat - B) u_t`.
pub fn parametric_prediction_variance(
    params: &SystemParams,
    sol: &DareSolution,
    config: &AlgoConfig,
    x: &DVector<f64>,
    w: &DVector<f64>,
    t: usize,
) -> Result<DMatrix<f64>> {
    let v = prediction_variance_scalar(params, sol, config, x, w)?;
    let n = params.n();
    Ok(DMatrix::identity(n, n) * (v / t.max(1) as f64))
}

fn prediction_variance_scalar(
    params: &SystemParams,
    sol: &DareSolution,
    config: &AlgoConfig,
    x: &DVector<f64>,
    w: &DVector<f64>,
) -> Result<f64> {
    let x1 = prediction_state_sum(params, sol, config)?;
    let chol = x1.cholesky().ok_or(LqacError::SingularGram)?;
    let s2 = params.sigma * params.sigma;
    Ok(x.dot(&chol.solve(x)) + config.beta * s2 * w.norm_squared())
}

/// Everything computed from one checkpoint snapshot, with `NaN` for
/// statistics that could not be evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotStatistics {
    pub t: usize,
    pub stat_ab: f64,
    pub stat_k: f64,
    pub stat_pred_full: f64,
    pub stat_pred_naive: f64,
    pub stat_pred_mean: f64,
    pub err_a: f64,
    pub err_b: f64,
    pub err_k: f64,
    /// `||A_hat - A + (B_hat - B) K||_F`.
    pub err_fast: f64,
    /// Prediction error `(A_hat - A) x + (B_hat - B) u` scaled by the inverse
    /// square root of its asymptotic variance.
    pub pred_standardized: Vec<f64>,
}

/// Region statistics and error norms for a snapshot.
pub fn snapshot_statistics(
    snap: &EstimatorSnapshot,
    params: &SystemParams,
    sol: &DareSolution,
    config: &AlgoConfig,
) -> SnapshotStatistics {
    let level = 0.95;
    let t = snap.t;
    let x = DVector::from_column_slice(&snap.x);
    let u = DVector::from_column_slice(&snap.u);
    let w = DVector::from_column_slice(&snap.w);
    let x_next = DVector::from_column_slice(&snap.x_next);
    let stat = |r: Result<RegionOutcome>| r.map(|o| o.statistic).unwrap_or(f64::NAN);
    let sigma = params.sigma;

    let stat_ab = stat(ab_region_statistic(
        &snap.a_hat,
        &snap.b_hat,
        &snap.gram,
        &params.a,
        &params.b,
        sigma,
        level,
        t,
    ));
    let stat_k = stat(k_region_statistic(
        &snap.a_prev,
        &snap.b_prev,
        &snap.k_hat,
        &snap.gram,
        params,
        &sol.k,
        level,
        t,
    ));
    let stat_pred_full = stat(prediction_region_statistic(
        &snap.a_hat,
        &snap.b_hat,
        &snap.gram,
        &x,
        &u,
        &x_next,
        sigma,
        false,
        level,
        t,
    ));
    let stat_pred_naive = stat(prediction_region_statistic(
        &snap.a_hat,
        &snap.b_hat,
        &snap.gram,
        &x,
        &u,
        &x_next,
        sigma,
        true,
        level,
        t,
    ));
    let stat_pred_mean = stat(mean_prediction_statistic(
        &snap.a_hat,
        &snap.b_hat,
        &snap.gram,
        &x,
        &u,
        &params.a,
        &params.b,
        sigma,
        level,
        t,
    ));

    let da = &snap.a_hat - &params.a;
    let db = &snap.b_hat - &params.b;
    let pred_err = &da * &x + &db * &u;
    let pred_standardized = match prediction_variance_scalar(params, sol, config, &x, &w) {
        Ok(v) if v > 0.0 => (pred_err * ((t as f64) / v).sqrt()).as_slice().to_vec(),
        _ => vec![f64::NAN; params.n()],
    };
    SnapshotStatistics {
        t,
        stat_ab,
        stat_k,
        stat_pred_full,
        stat_pred_naive,
        stat_pred_mean,
        err_a: da.norm(),
        err_b: db.norm(),
        err_k: (&snap.k_hat - &sol.k).norm(),
        err_fast: (&da + &db * &sol.k).norm(),
        pred_standardized,
    }
}

/// Threshold for a region kind at the given dimensions and level.
pub fn region_threshold(kind: RegionKind, n: usize, d: usize, level: f64) -> Result<f64> {
    chi2_quantile(region_dof(kind, n, d), level)
}

pub fn region_dof(kind: RegionKind, n: usize, d: usize) -> usize {
    match kind {
        RegionKind::Ab => n * (n + d),
        RegionKind::K => n * d,
        _ => n,
    }
}

/// Scaling of the estimation error used by the distributional checks:
/// `vec([A_hat - A, B_hat - B] D_t) / sigma`.
pub fn normalized_estimation_error(
    a_hat: &DMatrix<f64>,
    b_hat: &DMatrix<f64>,
    params: &SystemParams,
    d_t: &DMatrix<f64>,
) -> DVector<f64> {
    let e = linalg::hstack(&(a_hat - &params.a), &(b_hat - &params.b));
    linalg::vec(&(e * d_t)) / params.sigma
}

/// `t^{1/2} C_t^{-1/2}`-scaled fast-direction error components, whose
/// covariance tends to `sigma^2 I` when `C_t` is built with `sigma`.
pub fn fast_direction_scaled(
    a_hat: &DMatrix<f64>,
    b_hat: &DMatrix<f64>,
    params: &SystemParams,
    k: &DMatrix<f64>,
    c_t: &DMatrix<f64>,
    t: usize,
    beta: f64,
    alpha: f64,
) -> Result<DMatrix<f64>> {
    let fast = (a_hat - &params.a) + (b_hat - &params.b) * k;
    // Gram of the state block grows like t^beta log^alpha(t) C_t.
    let root = linalg::sym_sqrt(c_t);
    let scale = (t as f64 * schedule_factor(beta, alpha, t)).sqrt();
    Ok(fast * root * scale)
}
