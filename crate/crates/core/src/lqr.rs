//! Deterministic LQR machinery: the discrete algebraic Riccati equation,
//! the optimal gain, stabilizability, discrete Lyapunov sums and the
//! derivative of the optimal gain with respect to the dynamics.

use nalgebra::{Complex, DMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{LqacError, Result};
use crate::linalg::{self, serde_rows};

pub const DEFAULT_DARE_TOL: f64 = 1e-10;
pub const DEFAULT_DARE_MAX_ITER: usize = 10_000;
/// Relative singular-value threshold for the Hautus rank test.
pub const HAUTUS_RANK_TOL: f64 = 1e-9;

/// True dynamics, costs and noise scale of `x_{t+1} = A x_t + B u_t + eps_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemParams {
    #[serde(with = "serde_rows")]
    pub a: DMatrix<f64>,
    #[serde(with = "serde_rows")]
    pub b: DMatrix<f64>,
    #[serde(with = "serde_rows")]
    pub q: DMatrix<f64>,
    #[serde(with = "serde_rows")]
    pub r: DMatrix<f64>,
    pub sigma: f64,
}

impl SystemParams {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        sigma: f64,
    ) -> Result<Self> {
        let params = SystemParams { a, b, q, r, sigma };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        check_dims(&self.a, &self.b, &self.q, &self.r)?;
        if !linalg::is_symmetric(&self.q, 1e-12) || !linalg::is_positive_definite(&self.q) {
            return Err(LqacError::InvalidConfig(
                "Q must be symmetric positive definite".into(),
            ));
        }
        if !linalg::is_symmetric(&self.r, 1e-12) || !linalg::is_positive_definite(&self.r) {
            return Err(LqacError::InvalidConfig(
                "R must be symmetric positive definite".into(),
            ));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(LqacError::InvalidConfig(format!(
                "sigma must be a finite nonnegative number, got {}",
                self.sigma
            )));
        }
        Ok(())
    }

    /// State dimension.
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    /// Input dimension.
    pub fn d(&self) -> usize {
        self.b.ncols()
    }

    /// Same costs and noise, different dynamics. Used for plug-in solves.
    pub fn with_dynamics(&self, a: DMatrix<f64>, b: DMatrix<f64>) -> SystemParams {
        SystemParams {
            a,
            b,
            q: self.q.clone(),
            r: self.r.clone(),
            sigma: self.sigma,
        }
    }
}

fn check_dims(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<()> {
    let n = a.nrows();
    if !a.is_square() || n == 0 {
        return Err(LqacError::DimensionMismatch(format!(
            "A must be square and nonempty, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if b.nrows() != n || b.ncols() == 0 {
        return Err(LqacError::DimensionMismatch(format!(
            "B must be {n}xd, got {}x{}",
            b.nrows(),
            b.ncols()
        )));
    }
    if q.shape() != (n, n) {
        return Err(LqacError::DimensionMismatch(format!(
            "Q must be {n}x{n}, got {}x{}",
            q.nrows(),
            q.ncols()
        )));
    }
    let d = b.ncols();
    if r.shape() != (d, d) {
        return Err(LqacError::DimensionMismatch(format!(
            "R must be {d}x{d}, got {}x{}",
            r.nrows(),
            r.ncols()
        )));
    }
    Ok(())
}

/// Stabilizing solution of the DARE together with its optimal gain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DareSolution {
    #[serde(with = "serde_rows")]
    pub p: DMatrix<f64>,
    #[serde(with = "serde_rows")]
    pub k: DMatrix<f64>,
    /// Frobenius norm of `F(P) - P`, `F` the Riccati map.
    pub residual: f64,
    pub iterations: usize,
}

/// Knobs for the Riccati value iteration.
#[derive(Debug, Clone)]
pub struct DareOptions<'a> {
    pub tol: f64,
    pub max_iter: usize,
    /// Starting iterate; `Q` when absent. Any PSD start converges for a
    /// stabilizable pair with `Q > 0`.
    pub initial: Option<&'a DMatrix<f64>>,
    /// Run the Hautus test before iterating.
    pub check_stabilizable: bool,
}

impl Default for DareOptions<'_> {
    fn default() -> Self {
        DareOptions {
            tol: DEFAULT_DARE_TOL,
            max_iter: DEFAULT_DARE_MAX_ITER,
            initial: None,
            check_stabilizable: true,
        }
    }
}

/// Solve `P = A'PA - A'PB (R + B'PB)^{-1} B'PA + Q` by value iteration from
/// `P0 = Q`, symmetrizing each iterate.
pub fn solve_dare(params: &SystemParams, tol: f64, max_iter: usize) -> Result<DareSolution> {
    check_dims(&params.a, &params.b, &params.q, &params.r)?;
    solve_dare_with(
        &params.a,
        &params.b,
        &params.q,
        &params.r,
        &DareOptions {
            tol,
            max_iter,
            ..Default::default()
        },
    )
}

/// Value iteration on raw matrices. Dimensions are assumed consistent.
pub fn solve_dare_with(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    opts: &DareOptions<'_>,
) -> Result<DareSolution> {
    if opts.check_stabilizable && !is_stabilizable(a, b, HAUTUS_RANK_TOL) {
        return Err(LqacError::NotStabilizable);
    }
    let at = a.transpose();
    let bt = b.transpose();
    let mut p = match opts.initial {
        Some(p0) => p0.clone(),
        None => q.clone(),
    };
    let mut residual = f64::INFINITY;
    for iter in 0..opts.max_iter {
        let pa = &p * a;
        let pb = &p * b;
        let s = r + &bt * &pb;
        let btpa = &bt * &pa;
        let chol = match s.cholesky() {
            Some(c) => c,
            None => break,
        };
        let g = chol.solve(&btpa);
        let mut next = &at * &pa - btpa.transpose() * g + q;
        linalg::symmetrize(&mut next);
        residual = (&next - &p).norm();
        if !residual.is_finite() {
            break;
        }
        if residual <= opts.tol {
            let k = optimal_gain(a, b, r, &p)?;
            let rho = spectral_radius(&(a + b * &k));
            if rho >= 1.0 {
                return Err(LqacError::NoConvergence {
                    residual,
                    iterations: iter,
                });
            }
            return Ok(DareSolution {
                p,
                k,
                residual,
                iterations: iter,
            });
        }
        p = next;
    }
    Err(LqacError::NoConvergence {
        residual,
        iterations: opts.max_iter,
    })
}

/// `K = -(R + B'PB)^{-1} B'PA`.
pub fn optimal_gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let d = b.ncols();
    if !a.is_square() || b.nrows() != n || r.shape() != (d, d) || p.shape() != (n, n) {
        return Err(LqacError::DimensionMismatch(
            "optimal_gain: inconsistent A, B, R, P".into(),
        ));
    }
    let bt = b.transpose();
    let s = r + &bt * p * b;
    let rhs = &bt * p * a;
    let g = match s.clone().cholesky() {
        Some(chol) => chol.solve(&rhs),
        None => s
            .lu()
            .solve(&rhs)
            .ok_or_else(|| LqacError::DomainError("R + B'PB is singular".into()))?,
    };
    Ok(-g)
}

/// Maximum modulus over the (complex) eigenvalues.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    assert!(m.is_square(), "spectral_radius needs a square matrix");
    match m.nrows() {
        0 => 0.0,
        1 => m[(0, 0)].abs(),
        2 => {
            // Closed form keeps the per-step controller path cheap.
            let (a, b, c, d) = (m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]);
            let tr = a + d;
            let det = a * d - b * c;
            let disc = 0.25 * tr * tr - det;
            if disc >= 0.0 {
                let s = disc.sqrt();
                (0.5 * tr + s).abs().max((0.5 * tr - s).abs())
            } else {
                det.max(0.0).sqrt()
            }
        }
        _ => eigenvalues(m).iter().map(|l| l.norm()).fold(0.0, f64::max),
    }
}

fn eigenvalues(m: &DMatrix<f64>) -> Vec<Complex<f64>> {
    m.clone().complex_eigenvalues().iter().cloned().collect()
}

/// Hautus test: for every eigenvalue `lambda` of `A` with `|lambda| >= 1`,
/// `[A - lambda I, B]` must have numerical rank `n`.
pub fn is_stabilizable(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
    let n = a.nrows();
    if !a.is_square() || b.nrows() != n {
        return false;
    }
    let eigs: Vec<Complex<f64>> = if n == 1 {
        vec![Complex::new(a[(0, 0)], 0.0)]
    } else {
        eigenvalues(a)
    };
    eigs.iter().filter(|l| l.norm() >= 1.0).all(|&lambda| {
        let m = DMatrix::<Complex<f64>>::from_fn(n, n + b.ncols(), |i, j| {
            if j < n {
                let diag = if i == j {
                    lambda
                } else {
                    Complex::new(0.0, 0.0)
                };
                Complex::new(a[(i, j)], 0.0) - diag
            } else {
                Complex::new(b[(i, j - n)], 0.0)
            }
        });
        let sv = m.svd(false, false).singular_values;
        let largest = sv.iter().cloned().fold(0.0_f64, f64::max);
        largest > 0.0 && sv.iter().filter(|&&s| s > tol * largest).count() >= n
    })
}

/// Solve `X = F X F' + M`, i.e. `X = sum_p F^p M (F^p)'`, by doubling:
/// `X <- X + F_k X F_k'`, `F_k <- F_k^2`.
pub fn solve_discrete_lyapunov(f: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !f.is_square() || m.shape() != f.shape() {
        return Err(LqacError::DimensionMismatch(format!(
            "Lyapunov: F is {}x{}, M is {}x{}",
            f.nrows(),
            f.ncols(),
            m.nrows(),
            m.ncols()
        )));
    }
    let rho = spectral_radius(f);
    if rho >= 1.0 {
        return Err(LqacError::NotStable(rho));
    }
    let mut x = m.clone();
    let mut fk = f.clone();
    for _ in 0..64 {
        let incr = &fk * &x * fk.transpose();
        let incr_norm = incr.norm();
        x += incr;
        if incr_norm <= f64::EPSILON * x.norm() || incr_norm == 0.0 {
            break;
        }
        fk = &fk * &fk;
    }
    if linalg::is_symmetric(m, 1e-14) {
        linalg::symmetrize(&mut x);
    }
    Ok(x)
}

/// Derivative of `vec(K)` with respect to `vec([A, B])`, an
/// `nd x n(n+d)` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GainJacobian {
    pub matrix: DMatrix<f64>,
    /// `A + BK` was numerically rank deficient; the full-rank guarantee
    /// does not apply to `matrix`.
    pub singular_closed_loop: bool,
}

/// Differentiate the DARE: for each unit direction `(dA, dB)` solve
/// `L' dP L - dP + (dA + dB K)' P L + L' P (dA + dB K) = 0` with `L = A + BK`,
/// then `dK = -(R + B'PB)^{-1} (dB' P L + B' P (dA + dB K) + B' dP L)`.
pub fn gain_jacobian(params: &SystemParams, sol: &DareSolution) -> Result<GainJacobian> {
    gain_jacobian_with(&params.a, &params.b, &params.r, &sol.p, &sol.k)
}

pub fn gain_jacobian_with(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
    k: &DMatrix<f64>,
) -> Result<GainJacobian> {
    let n = a.nrows();
    let d = b.ncols();
    if k.shape() != (d, n) || p.shape() != (n, n) {
        return Err(LqacError::DimensionMismatch(
            "gain_jacobian: P or K has the wrong shape".into(),
        ));
    }
    let l = a + b * k;
    if spectral_radius(&l) >= 1.0 {
        return Err(LqacError::NotStabilizable);
    }
    let singular_closed_loop = linalg::numerical_rank(&l, HAUTUS_RANK_TOL) < n;
    let lt = l.transpose();
    let bt = b.transpose();
    let s = r + &bt * p * b;
    let s_chol = s
        .cholesky()
        .ok_or_else(|| LqacError::DomainError("R + B'PB is not positive definite".into()))?;
    let pl = p * &l;

    let cols = n * (n + d);
    let mut jac = DMatrix::zeros(n * d, cols);
    let mut direction = DMatrix::zeros(n, n + d);
    for j in 0..cols {
        direction.fill(0.0);
        direction[(j % n, j / n)] = 1.0;
        let da = direction.columns(0, n).into_owned();
        let db = direction.columns(n, d).into_owned();
        let dl = &da + &db * k;
        let mut forcing = dl.transpose() * &pl;
        forcing += forcing.transpose();
        // dP = sum_i (L')^i forcing L^i
        let dp = solve_discrete_lyapunov(&lt, &forcing)?;
        let rhs = db.transpose() * &pl + &bt * p * &dl + &bt * &dp * &l;
        let dk = -s_chol.solve(&rhs);
        jac.column_mut(j).copy_from_slice(dk.as_slice());
    }
    Ok(GainJacobian {
        matrix: jac,
        singular_closed_loop,
    })
}
