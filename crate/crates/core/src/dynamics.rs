//! The linear system, its quadratic cost, and regret against a coupled
//! optimal-controller trajectory.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::controller::EstimatorSnapshot;
use crate::error::{LqacError, Result};
use crate::lqr::{DareSolution, SystemParams};

/// One logged step of a trajectory. `eta`, `w` are zero-length for the
/// oracle trajectory, which has no exploration noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub t: usize,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub eta: Vec<f64>,
    pub w: Vec<f64>,
    pub eps: Vec<f64>,
    pub stage_cost: f64,
}

/// Everything one simulated run produces.
///
/// `costs[t]` is the stage cost at step `t` for `t = 0..=horizon`; the
/// cost functional sums steps `1..=T`. The oracle controller `u = Kx` is
/// driven by the same `eps_t` draws and the same `x_0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub horizon: usize,
    pub costs: Vec<f64>,
    pub optimal_costs: Vec<f64>,
    /// Full step log, filled only when requested.
    pub steps: Vec<TrajectoryStep>,
    pub optimal_steps: Vec<TrajectoryStep>,
    pub snapshots: Vec<EstimatorSnapshot>,
    pub reset_count: usize,
    /// Steps `t >= 2` at which the safety reset to `K0` fired.
    pub reset_times: Vec<usize>,
    pub max_state_norm: f64,
    /// Set when the run stopped early (non-finite state).
    pub failure: Option<String>,
}

impl RunRecord {
    /// Last step index with a recorded cost.
    pub fn recorded_horizon(&self) -> usize {
        self.costs.len().saturating_sub(1)
    }

    pub fn cumulative_cost(&self, horizon: usize) -> Result<f64> {
        self.check_horizon(horizon)?;
        Ok(self.costs[1..=horizon].iter().sum())
    }

    pub fn optimal_cumulative_cost(&self, horizon: usize) -> Result<f64> {
        self.check_horizon(horizon)?;
        Ok(self.optimal_costs[1..=horizon].iter().sum())
    }

    fn check_horizon(&self, horizon: usize) -> Result<()> {
        let recorded = self.recorded_horizon();
        if horizon > recorded || horizon == 0 {
            return Err(LqacError::HorizonExceeded {
                requested: horizon,
                recorded,
            });
        }
        Ok(())
    }

    /// Fraction of steps in `[from, to]` at which the safety reset fired.
    pub fn reset_rate(&self, from: usize, to: usize) -> f64 {
        if to < from {
            return 0.0;
        }
        let hits = self
            .reset_times
            .iter()
            .filter(|&&t| t >= from && t <= to)
            .count();
        hits as f64 / (to - from + 1) as f64
    }
}

/// `A x + B u + eps`.
pub fn step_system(
    params: &SystemParams,
    x: &DVector<f64>,
    u: &DVector<f64>,
    eps: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n = params.n();
    if x.len() != n || u.len() != params.d() || eps.len() != n {
        return Err(LqacError::DimensionMismatch(format!(
            "step_system: x has {}, u has {}, eps has {} entries for n={n}, d={}",
            x.len(),
            u.len(),
            eps.len(),
            params.d()
        )));
    }
    Ok(&params.a * x + &params.b * u + eps)
}

/// `x'Qx + u'Ru`.
pub fn stage_cost(params: &SystemParams, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64> {
    if x.len() != params.n() || u.len() != params.d() {
        return Err(LqacError::DimensionMismatch(format!(
            "stage_cost: x has {}, u has {} entries",
            x.len(),
            u.len()
        )));
    }
    Ok(quad_form(&params.q, x) + quad_form(&params.r, u))
}

pub(crate) fn quad_form(m: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    (m * v).dot(v)
}

/// `(J(U, T) - J(U*, T))` with both sums over steps `1..=T`, divided by `T`.
pub fn average_regret(record: &RunRecord, horizon: usize) -> Result<f64> {
    let adaptive = record.cumulative_cost(horizon)?;
    let optimal = record.optimal_cumulative_cost(horizon)?;
    Ok((adaptive - optimal) / horizon as f64)
}

/// Long-run average cost of the optimal controller, `sigma^2 Tr(P)`.
pub fn optimal_average_cost(params: &SystemParams, sol: &DareSolution) -> f64 {
    params.sigma * params.sigma * sol.p.trace()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lqr::solve_dare;

    fn stable_paper() -> SystemParams {
        SystemParams::new(
            DMatrix::from_row_slice(2, 2, &[0.8, 0.1, 0.0, 0.8]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::identity(2, 2),
            DMatrix::identity(1, 1),
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn step_examples() {
        let p = stable_paper();
        let e1 = DVector::from_vec(vec![1.0, 0.0]);
        let zero_x = DVector::zeros(2);
        let zero_u = DVector::zeros(1);
        assert_eq!(step_system(&p, &zero_x, &zero_u, &e1).unwrap(), e1);

        let mut id = p.clone();
        id.a = DMatrix::identity(2, 2);
        id.b = DMatrix::zeros(2, 1);
        assert_eq!(step_system(&id, &e1, &zero_u, &zero_x).unwrap(), e1);

        let x = DVector::from_vec(vec![1.0, 1.0]);
        let u = DVector::from_vec(vec![1.0]);
        let next = step_system(&p, &x, &u, &zero_x).unwrap();
        assert!((next[0] - 0.9).abs() < 1e-15 && (next[1] - 1.8).abs() < 1e-15);

        assert!(matches!(
            step_system(&p, &DVector::zeros(3), &zero_u, &zero_x),
            Err(LqacError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn cost_examples() {
        let p = stable_paper();
        assert_eq!(
            stage_cost(&p, &DVector::zeros(2), &DVector::zeros(1)).unwrap(),
            0.0
        );
        let c = stage_cost(
            &p,
            &DVector::from_vec(vec![3.0, 4.0]),
            &DVector::from_vec(vec![2.0]),
        )
        .unwrap();
        assert_eq!(c, 29.0);

        let unstable = SystemParams::new(
            DMatrix::identity(3, 3) * 2.0,
            DMatrix::identity(3, 3),
            DMatrix::identity(3, 3) * 10.0,
            DMatrix::identity(3, 3),
            1.0,
        )
        .unwrap();
        let ones = DVector::from_element(3, 1.0);
        assert_eq!(stage_cost(&unstable, &ones, &ones).unwrap(), 33.0);
    }

    #[test]
    fn optimal_average_cost_examples() {
        let mut p = stable_paper();
        let sol = DareSolution {
            p: DMatrix::identity(2, 2),
            k: DMatrix::zeros(1, 2),
            residual: 0.0,
            iterations: 0,
        };
        assert_eq!(optimal_average_cost(&p, &sol), 2.0);
        p.sigma = 0.0;
        assert_eq!(optimal_average_cost(&p, &sol), 0.0);
        let p = stable_paper();
        let sol = solve_dare(&p, 1e-10, 10_000).unwrap();
        assert!(optimal_average_cost(&p, &sol) > 0.0);
    }

    fn record_with(costs: Vec<f64>, optimal: Vec<f64>) -> RunRecord {
        RunRecord {
            seed: 0,
            horizon: costs.len() - 1,
            costs,
            optimal_costs: optimal,
            steps: vec![],
            optimal_steps: vec![],
            snapshots: vec![],
            reset_count: 0,
            reset_times: vec![],
            max_state_norm: 0.0,
            failure: None,
        }
    }

    #[test]
    fn regret_sums_from_step_one() {
        let rec = record_with(vec![100.0, 3.0, 5.0], vec![50.0, 1.0, 2.0]);
        assert_eq!(average_regret(&rec, 1).unwrap(), 2.0);
        assert_eq!(average_regret(&rec, 2).unwrap(), 2.5);
        assert!(matches!(
            average_regret(&rec, 3),
            Err(LqacError::HorizonExceeded { .. })
        ));
    }

    #[test]
    fn reset_rate_counts_window() {
        let mut rec = record_with(vec![0.0; 11], vec![0.0; 11]);
        rec.reset_times = vec![2, 3, 9];
        assert!((rec.reset_rate(5, 10) - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(rec.reset_rate(10, 5), 0.0);
    }
}
