//! Stepwise noisy certainty-equivalent control.
//!
//! At every step `t >= 2` the controller fits `[A, B]` by least squares on
//! the transitions `k = 0..=t-2`, plugs the fit into the Riccati equation,
//! falls back to the known stabilizing gain `K0` when the fit is not
//! stabilizable or when the state or gain is too large, and adds Gaussian
//! exploration noise with variance `tau^2 t^(beta-1) log^alpha(t)`.
//!
//! The estimator is driven by data only; [`SystemParams`] is used to
//! simulate the plant and the coupled oracle trajectory.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dynamics::{quad_form, RunRecord, TrajectoryStep};
use crate::error::{LqacError, Result};
use crate::linalg::{self, serde_rows};
use crate::lqr::{self, DareOptions, SystemParams, HAUTUS_RANK_TOL};

/// When the certainty-equivalent gain is recomputed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    #[default]
    Stepwise,
    /// Update at `t_1 = 2`, `t_{i+1} = ceil(ratio * t_i)`.
    Logarithmic { ratio: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgoConfig {
    pub beta: f64,
    pub alpha: f64,
    pub tau: f64,
    pub c_x: f64,
    pub c_k: f64,
    #[serde(with = "serde_rows")]
    pub k0: DMatrix<f64>,
    #[serde(default)]
    pub schedule: Schedule,
    pub horizon: usize,
    #[serde(default)]
    pub seed: u64,
    /// Initial state; zero when absent.
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    /// Fit on all transitions through `t-1` and skip the safety reset.
    /// Unproven variant, off by default.
    #[serde(default)]
    pub use_latest_estimate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigWarning {
    /// `(beta, alpha)` outside the range the asymptotic results cover.
    OutsideTheory(String),
    /// `C_K` does not exceed the norm of the true optimal gain.
    GainBoundTooSmall { c_k: f64, k_norm: f64 },
}

impl std::fmt::Display for ConfigWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConfigWarning::OutsideTheory(msg) => write!(f, "outside theory: {msg}"),
            ConfigWarning::GainBoundTooSmall { c_k, k_norm } => {
                write!(f, "C_K = {c_k} does not exceed ||K|| = {k_norm:.4}")
            }
        }
    }
}

impl AlgoConfig {
    pub fn x0(&self, n: usize) -> DVector<f64> {
        match &self.x0 {
            Some(v) => DVector::from_column_slice(v),
            None => DVector::zeros(n),
        }
    }

    /// Hard errors for unusable settings; soft warnings for settings the
    /// theory does not cover.
    pub fn validate(&self, params: &SystemParams) -> Result<Vec<ConfigWarning>> {
        let bad = |msg: String| Err(LqacError::InvalidConfig(msg));
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return bad(format!("beta must lie in (0, 1], got {}", self.beta));
        }
        if !self.alpha.is_finite() {
            return bad("alpha must be finite".into());
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be nonnegative, got {}", self.tau));
        }
        if !(self.c_x > 0.0) || !(self.c_k > 0.0) {
            return bad("C_x and C_K must be positive".into());
        }
        if self.horizon < 2 {
            return bad(format!("horizon must be at least 2, got {}", self.horizon));
        }
        let (n, d) = (params.n(), params.d());
        if self.k0.shape() != (d, n) {
            return Err(LqacError::DimensionMismatch(format!(
                "K0 must be {d}x{n}, got {}x{}",
                self.k0.nrows(),
                self.k0.ncols()
            )));
        }
        if let Some(x0) = &self.x0 {
            if x0.len() != n {
                return Err(LqacError::DimensionMismatch(format!(
                    "x0 must have {n} entries, got {}",
                    x0.len()
                )));
            }
        }
        if let Schedule::Logarithmic { ratio } = self.schedule {
            if !(ratio > 1.0) {
                return bad(format!(
                    "logarithmic update ratio must exceed 1, got {ratio}"
                ));
            }
        }
        let rho = lqr::spectral_radius(&(&params.a + &params.b * &self.k0));
        if rho >= 1.0 {
            return Err(LqacError::UnstableK0(rho));
        }

        let mut warnings = Vec::new();
        if self.beta < 0.5 {
            warnings.push(ConfigWarning::OutsideTheory(format!(
                "beta = {} < 1/2",
                self.beta
            )));
        } else if self.beta == 0.5 && self.alpha <= 1.5 {
            warnings.push(ConfigWarning::OutsideTheory(format!(
                "alpha = {} must exceed 3/2 when beta = 1/2",
                self.alpha
            )));
        } else if self.beta == 1.0 && self.alpha > 0.0 {
            warnings.push(ConfigWarning::OutsideTheory(format!(
                "alpha = {} must be <= 0 when beta = 1",
                self.alpha
            )));
        }
        if let Ok(sol) = lqr::solve_dare(params, lqr::DEFAULT_DARE_TOL, lqr::DEFAULT_DARE_MAX_ITER)
        {
            let k_norm = linalg::op_norm(&sol.k);
            if self.c_k <= k_norm {
                log::warn!("C_K = {} does not exceed ||K|| = {k_norm}", self.c_k);
                warnings.push(ConfigWarning::GainBoundTooSmall {
                    c_k: self.c_k,
                    k_norm,
                });
            }
        }
        Ok(warnings)
    }
}

/// `t^(beta-1) log^alpha(t)`, taken to be 1 at `t in {0, 1}`.
pub fn schedule_factor(beta: f64, alpha: f64, t: usize) -> f64 {
    if t < 2 {
        return 1.0;
    }
    let tf = t as f64;
    tf.powf(beta - 1.0) * tf.ln().powf(alpha)
}

/// Standard deviation multiplier of the exploration noise at step `t`.
pub fn exploration_scale(config: &AlgoConfig, t: usize) -> f64 {
    config.tau * schedule_factor(config.beta, config.alpha, t).sqrt()
}

/// `eta_t = tau sqrt(t^(beta-1) log^alpha(t)) w_t`.
pub fn exploration_noise(config: &AlgoConfig, t: usize, w: &DVector<f64>) -> DVector<f64> {
    w * exploration_scale(config, t)
}

/// `u = K0 x + tau w`, the input at steps 0 and 1.
pub fn initial_input(config: &AlgoConfig, x: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
    &config.k0 * x + w * config.tau
}

/// Running least-squares fit of `x_{k+1} ~ [A, B] [x_k; u_k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorState {
    pub gram: DMatrix<f64>,
    pub cross: DMatrix<f64>,
    /// Inverse of `gram`, maintained by rank-one updates once `gram` is
    /// nonsingular.
    pub gram_inv: Option<DMatrix<f64>>,
    pub a_hat: DMatrix<f64>,
    pub b_hat: DMatrix<f64>,
    pub k_hat: DMatrix<f64>,
    pub t: usize,
    pub reset_count: usize,
    /// Number of transitions absorbed.
    pub samples: usize,
    /// `sum ||x_{k+1}||^2`, for the residual variance.
    pub next_sq_sum: f64,
}

/// Relative eigenvalue floor before the Gram matrix counts as invertible.
const GRAM_RANK_TOL: f64 = 1e-10;
/// Relative eigenvalue floor above which the Gram inverse is formed and
/// propagated by rank-one updates. Below it the pseudo-inverse is used, which
/// keeps an ill-conditioned starting inverse from polluting the recursion.
const GRAM_SWITCH_TOL: f64 = 1e-6;

impl EstimatorState {
    pub fn new(n: usize, d: usize, k0: &DMatrix<f64>) -> Self {
        EstimatorState {
            gram: DMatrix::zeros(n + d, n + d),
            cross: DMatrix::zeros(n, n + d),
            gram_inv: None,
            a_hat: DMatrix::zeros(n, n),
            b_hat: DMatrix::zeros(n, d),
            k_hat: k0.clone(),
            t: 0,
            reset_count: 0,
            samples: 0,
            next_sq_sum: 0.0,
        }
    }

    pub fn n(&self) -> usize {
        self.cross.nrows()
    }

    pub fn d(&self) -> usize {
        self.cross.ncols() - self.cross.nrows()
    }

    /// `[A_hat, B_hat]`.
    pub fn theta(&self) -> DMatrix<f64> {
        linalg::hstack(&self.a_hat, &self.b_hat)
    }

    /// Absorb one transition `(z, x_next)`, `z = [x; u]`.
    ///
    /// While the Gram matrix is singular the minimum-norm solution
    /// `cross * pinv(gram)` is used.
    pub fn rls_update(&mut self, z: &DVector<f64>, x_next: &DVector<f64>) {
        let n = self.n();
        self.gram.ger(1.0, z, z, 1.0);
        self.cross.ger(1.0, x_next, z, 1.0);
        self.samples += 1;
        self.next_sq_sum += x_next.norm_squared();

        let theta = match &mut self.gram_inv {
            Some(inv) => {
                let gz = &*inv * z;
                let denom = 1.0 + z.dot(&gz);
                inv.ger(-1.0 / denom, &gz, &gz, 1.0);
                &self.cross * &*inv
            }
            None => {
                let eig = self.gram.clone().symmetric_eigen();
                let max = eig.eigenvalues.max();
                let min = eig.eigenvalues.min();
                if max > 0.0 && min > GRAM_SWITCH_TOL * max {
                    let inv = self
                        .gram
                        .clone()
                        .cholesky()
                        .map(|c| c.inverse())
                        .unwrap_or_else(|| pinv_from_eigen(&eig, max));
                    let theta = &self.cross * &inv;
                    self.gram_inv = Some(inv);
                    theta
                } else {
                    &self.cross * pinv_from_eigen(&eig, max)
                }
            }
        };
        self.a_hat.copy_from(&theta.columns(0, n));
        self.b_hat.copy_from(&theta.columns(n, theta.ncols() - n));
    }

    /// Residual variance estimate `RSS / (n (samples - (n + d)))`, when
    /// there are more samples than parameters per row.
    pub fn residual_variance(&self) -> Option<f64> {
        let n = self.n();
        let p = self.gram.nrows();
        if self.samples <= p {
            return None;
        }
        // RSS = sum ||x'||^2 - tr(theta cross')
        let theta = self.theta();
        let fitted = theta.component_mul(&self.cross).sum();
        let rss = (self.next_sq_sum - fitted).max(0.0);
        Some(rss / (n * (self.samples - p)) as f64)
    }
}

fn pinv_from_eigen(eig: &nalgebra::SymmetricEigen<f64, nalgebra::Dyn>, max: f64) -> DMatrix<f64> {
    let cutoff = GRAM_RANK_TOL * max.max(0.0);
    let inv_vals = eig
        .eigenvalues
        .map(|l| if l > cutoff && l > 0.0 { 1.0 / l } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose()
}

/// Certainty-equivalent gain at the current estimates: the Riccati gain if
/// the estimate is stabilizable and the iteration converges, otherwise
/// `None`. `warm` seeds the value iteration.
pub fn certainty_equivalent_gain(
    state: &EstimatorState,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    warm: Option<&DMatrix<f64>>,
) -> Option<lqr::DareSolution> {
    plug_in_dare(&state.a_hat, &state.b_hat, q, r, warm)
}

fn plug_in_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    warm: Option<&DMatrix<f64>>,
) -> Option<lqr::DareSolution> {
    if !linalg::all_finite(a) || !linalg::all_finite(b) {
        return None;
    }
    let opts = DareOptions {
        initial: warm,
        ..Default::default()
    };
    lqr::solve_dare_with(a, b, q, r, &opts).ok()
}

/// The safety check: `K0` if `||x_t|| > C_x log(t)` or `||K|| > C_K`.
/// Returns the gain to apply and whether the reset fired.
pub fn safety_check(
    config: &AlgoConfig,
    t: usize,
    x: &DVector<f64>,
    candidate: DMatrix<f64>,
) -> (DMatrix<f64>, bool) {
    let state_limit = config.c_x * (t as f64).ln();
    if x.norm() > state_limit || linalg::op_norm(&candidate) > config.c_k {
        (config.k0.clone(), true)
    } else {
        (candidate, false)
    }
}

/// Full gain computation for step `t = state.t`: certainty-equivalent gain
/// from the estimator (or `K0` if that fails), then the safety check.
pub fn compute_gain(
    state: &EstimatorState,
    config: &AlgoConfig,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    x: &DVector<f64>,
) -> DMatrix<f64> {
    let candidate = certainty_equivalent_gain(state, q, r, None)
        .map(|s| s.k)
        .unwrap_or_else(|| config.k0.clone());
    safety_check(config, state.t, x, candidate).0
}

/// What a gain rule sees at step `t >= 2`.
pub struct GainContext<'a> {
    pub t: usize,
    pub estimator: &'a EstimatorState,
    pub config: &'a AlgoConfig,
    pub q: &'a DMatrix<f64>,
    pub r: &'a DMatrix<f64>,
}

/// Produces the candidate gain before the safety check.
pub trait GainRule {
    /// `None` means fall back to `K0`.
    fn candidate(&mut self, ctx: &GainContext<'_>) -> Option<DMatrix<f64>>;

    /// Fit on transitions through `t-1` rather than `t-2` before calling
    /// [`GainRule::candidate`].
    fn uses_latest_data(&self) -> bool {
        false
    }

    /// Apply the state/gain-norm reset to `K0`.
    fn applies_safety_check(&self) -> bool {
        true
    }
}

/// Certainty equivalence, stepwise or on a geometric update grid.
pub struct CertaintyEquivalent {
    schedule: Schedule,
    latest: bool,
    next_update: usize,
    held: Option<DMatrix<f64>>,
    warm_p: Option<DMatrix<f64>>,
}

impl CertaintyEquivalent {
    pub fn new(config: &AlgoConfig) -> Self {
        CertaintyEquivalent {
            schedule: config.schedule,
            latest: config.use_latest_estimate,
            next_update: 2,
            held: None,
            warm_p: None,
        }
    }
}

impl GainRule for CertaintyEquivalent {
    fn candidate(&mut self, ctx: &GainContext<'_>) -> Option<DMatrix<f64>> {
        if let Schedule::Logarithmic { ratio } = self.schedule {
            if ctx.t < self.next_update {
                return self.held.clone();
            }
            self.next_update = ((ratio * ctx.t as f64).ceil() as usize).max(ctx.t + 1);
        }
        let sol = certainty_equivalent_gain(ctx.estimator, ctx.q, ctx.r, self.warm_p.as_ref());
        let k = sol.map(|s| {
            self.warm_p = Some(s.p);
            s.k
        });
        self.held = k.clone();
        k
    }

    fn uses_latest_data(&self) -> bool {
        self.latest
    }

    fn applies_safety_check(&self) -> bool {
        !self.latest
    }
}

/// Always proposes the same gain.
pub struct FixedGain(pub DMatrix<f64>);

impl GainRule for FixedGain {
    fn candidate(&mut self, _ctx: &GainContext<'_>) -> Option<DMatrix<f64>> {
        Some(self.0.clone())
    }
}

/// Thompson sampling with the Gaussian prior `vec(Theta) ~ N(vec(Theta_0), I)`.
///
/// The posterior after Gram matrix `S` and cross moment `C` is
/// `N(vec((Theta_0 + C)(I + S)^{-1}), (I + S)^{-1} (x) I_n)`; `C` equals
/// `Theta_hat S` for the least-squares fit.
pub struct ThompsonSampling {
    prior_mean: DMatrix<f64>,
    rng: ChaCha8Rng,
    warm_p: Option<DMatrix<f64>>,
}

impl ThompsonSampling {
    /// `prior_mean` is `[A, B]`; the published baseline centers the prior
    /// at the truth.
    pub fn new(prior_mean: DMatrix<f64>, seed: u64) -> Self {
        ThompsonSampling {
            prior_mean,
            rng: stream_rng(seed, NoiseStream::Thompson),
            warm_p: None,
        }
    }
}

/// Posterior mean and covariance factor `(I + S)^{-1}` for the Thompson
/// baseline.
pub fn thompson_posterior(
    prior_mean: &DMatrix<f64>,
    state: &EstimatorState,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let p = state.gram.nrows();
    let precision = DMatrix::<f64>::identity(p, p) + &state.gram;
    let cov = precision
        .cholesky()
        .expect("I + S is positive definite")
        .inverse();
    let mean = (prior_mean + &state.cross) * &cov;
    (mean, cov)
}

impl GainRule for ThompsonSampling {
    fn candidate(&mut self, ctx: &GainContext<'_>) -> Option<DMatrix<f64>> {
        let (mean, cov) = thompson_posterior(&self.prior_mean, ctx.estimator);
        let l = cov.cholesky()?.unpack();
        let (n, p) = mean.shape();
        let z = DMatrix::<f64>::from_fn(n, p, |_, _| self.rng.sample(StandardNormal));
        // vec(Z L') ~ N(0, (L L') (x) I_n)
        let draw = mean + z * l.transpose();
        let a = draw.columns(0, n).into_owned();
        let b = draw.columns(n, p - n).into_owned();
        let sol = plug_in_dare(&a, &b, ctx.q, ctx.r, self.warm_p.as_ref())?;
        self.warm_p = Some(sol.p.clone());
        Some(sol.k)
    }

    fn uses_latest_data(&self) -> bool {
        true
    }
}

/// Independent random streams of one run. Toggling the controller never
/// changes the system noise sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseStream {
    System,
    Exploration,
    Thompson,
}

pub fn stream_rng(seed: u64, stream: NoiseStream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(match stream {
        NoiseStream::System => 0,
        NoiseStream::Exploration => 1,
        NoiseStream::Thompson => 2,
    });
    rng
}

fn standard_normal(rng: &mut ChaCha8Rng, len: usize) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.sample(StandardNormal))
}

/// Estimator state and the step's data at a requested checkpoint `t`.
///
/// `a_hat`, `b_hat`, `gram` use transitions `k = 0..=t-1`; `a_prev`,
/// `b_prev` are the estimates one step earlier, from which `K_hat_t` was
/// computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSnapshot {
    pub t: usize,
    #[serde(with = "serde_rows")]
    pub a_hat: DMatrix<f64>,
    #[serde(with = "serde_rows")]
    pub b_hat: DMatrix<f64>,
    #[serde(with = "serde_rows")]
    pub a_prev: DMatrix<f64>,
    #[serde(with = "serde_rows")]
    pub b_prev: DMatrix<f64>,
    #[serde(with = "serde_rows")]
    pub gram: DMatrix<f64>,
    #[serde(with = "serde_rows")]
    pub k_hat: DMatrix<f64>,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub w: Vec<f64>,
    pub x_next: Vec<f64>,
    pub cost_cum: f64,
    pub cost_cum_oracle: f64,
    pub reset_count: usize,
    pub residual_variance: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Steps at which to take an [`EstimatorSnapshot`]; sorted ascending.
    pub checkpoints: Vec<usize>,
    /// Keep the full per-step log of both trajectories.
    pub record_trajectory: bool,
}

/// States beyond this norm are treated as divergence.
const DIVERGENCE_NORM: f64 = 1e150;

/// Algorithm driver shared by every gain rule.
pub fn run_with_rule(
    params: &SystemParams,
    config: &AlgoConfig,
    rule: &mut dyn GainRule,
    opts: &RunOptions,
) -> Result<RunRecord> {
    config.validate(params)?;
    let oracle = lqr::solve_dare(params, lqr::DEFAULT_DARE_TOL, lqr::DEFAULT_DARE_MAX_ITER)?;
    let (n, d) = (params.n(), params.d());
    let horizon = config.horizon;

    let mut eps_rng = stream_rng(config.seed, NoiseStream::System);
    let mut w_rng = stream_rng(config.seed, NoiseStream::Exploration);

    let mut record = RunRecord {
        seed: config.seed,
        horizon,
        costs: Vec::with_capacity(horizon + 1),
        optimal_costs: Vec::with_capacity(horizon + 1),
        steps: Vec::new(),
        optimal_steps: Vec::new(),
        snapshots: Vec::with_capacity(opts.checkpoints.len()),
        reset_count: 0,
        reset_times: Vec::new(),
        max_state_norm: 0.0,
        failure: None,
    };

    let mut est = EstimatorState::new(n, d, &config.k0);
    let mut x = config.x0(n);
    let mut x_opt = x.clone();
    let mut z_prev: Option<DVector<f64>> = None;
    let mut cost_cum = 0.0;
    let mut cost_cum_oracle = 0.0;
    let mut checkpoints = opts.checkpoints.iter().copied().peekable();
    let latest = rule.uses_latest_data();
    let safety = rule.applies_safety_check();

    for t in 0..=horizon {
        est.t = t;
        let take_snapshot = {
            while checkpoints.peek().is_some_and(|&c| c < t) {
                checkpoints.next();
            }
            checkpoints.peek() == Some(&t)
        };
        if latest {
            if let Some(z) = &z_prev {
                est.rls_update(z, &x);
            }
        }
        let (a_prev, b_prev) = if take_snapshot {
            (est.a_hat.clone(), est.b_hat.clone())
        } else {
            (DMatrix::zeros(0, 0), DMatrix::zeros(0, 0))
        };

        let w = standard_normal(&mut w_rng, d);
        let (k, eta) = if t < 2 {
            (config.k0.clone(), &w * config.tau)
        } else {
            let ctx = GainContext {
                t,
                estimator: &est,
                config,
                q: &params.q,
                r: &params.r,
            };
            let candidate = rule.candidate(&ctx).unwrap_or_else(|| config.k0.clone());
            let k = if safety {
                let (k, reset) = safety_check(config, t, &x, candidate);
                if reset {
                    record.reset_count += 1;
                    record.reset_times.push(t);
                }
                k
            } else {
                candidate
            };
            (k, exploration_noise(config, t, &w))
        };
        est.k_hat.copy_from(&k);
        est.reset_count = record.reset_count;

        let u = &k * &x + &eta;
        let u_opt = &oracle.k * &x_opt;
        let cost = quad_form(&params.q, &x) + quad_form(&params.r, &u);
        let cost_opt = quad_form(&params.q, &x_opt) + quad_form(&params.r, &u_opt);
        if t >= 1 {
            cost_cum += cost;
            cost_cum_oracle += cost_opt;
        }
        record.costs.push(cost);
        record.optimal_costs.push(cost_opt);

        if !latest {
            if let Some(z) = &z_prev {
                est.rls_update(z, &x);
            }
        }

        let eps = standard_normal(&mut eps_rng, n) * params.sigma;
        let x_next = &params.a * &x + &params.b * &u + &eps;
        let x_opt_next = &params.a * &x_opt + &params.b * &u_opt + &eps;

        if opts.record_trajectory {
            record.steps.push(TrajectoryStep {
                t,
                x: x.as_slice().to_vec(),
                u: u.as_slice().to_vec(),
                eta: eta.as_slice().to_vec(),
                w: w.as_slice().to_vec(),
                eps: eps.as_slice().to_vec(),
                stage_cost: cost,
            });
            record.optimal_steps.push(TrajectoryStep {
                t,
                x: x_opt.as_slice().to_vec(),
                u: u_opt.as_slice().to_vec(),
                eta: vec![],
                w: vec![],
                eps: eps.as_slice().to_vec(),
                stage_cost: cost_opt,
            });
        }

        if take_snapshot {
            record.snapshots.push(EstimatorSnapshot {
                t,
                a_hat: est.a_hat.clone(),
                b_hat: est.b_hat.clone(),
                a_prev,
                b_prev,
                gram: est.gram.clone(),
                k_hat: k.clone(),
                x: x.as_slice().to_vec(),
                u: u.as_slice().to_vec(),
                w: w.as_slice().to_vec(),
                x_next: x_next.as_slice().to_vec(),
                cost_cum,
                cost_cum_oracle,
                reset_count: record.reset_count,
                residual_variance: est.residual_variance(),
            });
        }

        let norm = x_next.norm();
        if !norm.is_finite() || norm > DIVERGENCE_NORM {
            record.failure = Some(format!("state diverged at step {}", t + 1));
            break;
        }
        record.max_state_norm = record.max_state_norm.max(x.norm()).max(norm);
        z_prev = Some(linalg::stack_xu(&x, &u));
        x = x_next;
        x_opt = x_opt_next;
    }
    Ok(record)
}

/// Certainty-equivalent control with the configured update schedule.
pub fn run_adaptive(
    params: &SystemParams,
    config: &AlgoConfig,
    opts: &RunOptions,
) -> Result<RunRecord> {
    let mut rule = CertaintyEquivalent::new(config);
    run_with_rule(params, config, &mut rule, opts)
}

/// Thompson-sampling baseline with the prior centered at the true `[A, B]`.
pub fn run_thompson(
    params: &SystemParams,
    config: &AlgoConfig,
    opts: &RunOptions,
) -> Result<RunRecord> {
    let mut rule = ThompsonSampling::new(linalg::hstack(&params.a, &params.b), config.seed);
    run_with_rule(params, config, &mut rule, opts)
}

/// Whether the estimate pair is stabilizable (Hautus test).
pub fn estimate_is_stabilizable(state: &EstimatorState) -> bool {
    lqr::is_stabilizable(&state.a_hat, &state.b_hat, HAUTUS_RANK_TOL)
}
