//! Seeded Monte-Carlo batches: run many independent trajectories, evaluate
//! the regions and error norms at checkpoints, and reduce them into
//! coverage curves, regret ratios and log-log slopes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asymptotics::{self, build_normalizer};
use crate::controller::{
    run_adaptive, run_thompson, AlgoConfig, EstimatorSnapshot, RunOptions, Schedule,
};
use crate::dynamics::RunRecord;
use crate::error::{LqacError, Result};
use crate::inference::{self, RegionKind, SnapshotStatistics};
use crate::lqr::{self, DareSolution, SystemParams};
use crate::stats;

/// Which plant to simulate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemSpec {
    StablePaper,
    UnstablePaperBadK0,
    UnstablePaperGoodK0,
    Custom { params: SystemParams },
}

impl SystemSpec {
    pub fn params(&self) -> SystemParams {
        match self {
            SystemSpec::StablePaper => stable_system(),
            SystemSpec::UnstablePaperBadK0 | SystemSpec::UnstablePaperGoodK0 => unstable_system(),
            SystemSpec::Custom { params } => params.clone(),
        }
    }
}

/// `A = [[0.8, 0.1], [0, 0.8]]`, `B = [0; 1]`, `Q = I`, `R = 1`, `sigma = 1`.
pub fn stable_system() -> SystemParams {
    SystemParams {
        a: DMatrix::from_row_slice(2, 2, &[0.8, 0.1, 0.0, 0.8]),
        b: DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
        q: DMatrix::identity(2, 2),
        r: DMatrix::identity(1, 1),
        sigma: 1.0,
    }
}

/// Lower-bidiagonal `A` with 2 on the diagonal and 4 below, `B = I`,
/// `Q = 10 I`, `R = I`, `sigma = 1`.
pub fn unstable_system() -> SystemParams {
    SystemParams {
        a: DMatrix::from_row_slice(3, 3, &[2.0, 0.0, 0.0, 4.0, 2.0, 0.0, 0.0, 4.0, 2.0]),
        b: DMatrix::identity(3, 3),
        q: DMatrix::identity(3, 3) * 10.0,
        r: DMatrix::identity(3, 3),
        sigma: 1.0,
    }
}

pub fn unstable_bad_k0() -> DMatrix<f64> {
    DMatrix::identity(3, 3) * -1.5
}

pub fn unstable_good_k0() -> DMatrix<f64> {
    -DMatrix::from_row_slice(3, 3, &[1.5, 0.0, 0.0, 3.5, 1.5, 0.0, 0.0, 3.5, 1.5])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Stepwise,
    #[serde(alias = "log")]
    Logarithmic,
    Thompson,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Stepwise => "stepwise",
            Variant::Logarithmic => "log",
            Variant::Thompson => "thompson",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        match s {
            "stepwise" => Some(Variant::Stepwise),
            "log" | "logarithmic" => Some(Variant::Logarithmic),
            "thompson" => Some(Variant::Thompson),
            _ => None,
        }
    }
}

fn default_log_ratio() -> f64 {
    2.0
}

fn default_level() -> f64 {
    0.95
}

fn default_slope_window() -> (usize, usize) {
    (1_000, 10_000)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub system: SystemSpec,
    pub algo: AlgoConfig,
    pub variants: Vec<Variant>,
    pub n_runs: usize,
    pub checkpoints: Vec<usize>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub base_seed: u64,
    /// Growth factor of the update times for [`Variant::Logarithmic`].
    #[serde(default = "default_log_ratio")]
    pub log_ratio: f64,
    #[serde(default = "default_level")]
    pub level: f64,
    /// `[t_lo, t_hi]` for the log-log slope fits.
    #[serde(default = "default_slope_window")]
    pub slope_window: (usize, usize),
}

/// `{2^5, 2^6, ...} ∪ extra ∪ {horizon}`, restricted to `[2, horizon]`.
pub fn default_checkpoints(horizon: usize, extra: &[usize]) -> Vec<usize> {
    let mut cps: Vec<usize> = (5..usize::BITS)
        .map(|k| 1usize << k)
        .take_while(|&c| c <= horizon)
        .chain(extra.iter().copied())
        .chain(std::iter::once(horizon))
        .filter(|&c| c >= 2 && c <= horizon)
        .collect();
    cps.sort_unstable();
    cps.dedup();
    cps
}

impl ExperimentPlan {
    /// Built-in presets: `stable-paper`, `unstable-bad-k0`, `unstable-good-k0`.
    pub fn preset(name: &str) -> Option<ExperimentPlan> {
        let (system, k0, c_k, horizon) = match name {
            "stable-paper" => (SystemSpec::StablePaper, DMatrix::zeros(1, 2), 5.0, 10_000),
            "unstable-bad-k0" => (
                SystemSpec::UnstablePaperBadK0,
                unstable_bad_k0(),
                1000.0,
                5_000,
            ),
            "unstable-good-k0" => (
                SystemSpec::UnstablePaperGoodK0,
                unstable_good_k0(),
                1000.0,
                5_000,
            ),
            _ => return None,
        };
        let algo = AlgoConfig {
            beta: 0.5,
            alpha: 2.0,
            tau: 1.0,
            c_x: 1.0,
            c_k,
            k0,
            schedule: Schedule::Stepwise,
            horizon,
            seed: 0,
            x0: None,
            use_latest_estimate: false,
        };
        Some(ExperimentPlan {
            system,
            algo,
            variants: vec![Variant::Stepwise, Variant::Logarithmic],
            n_runs: 200,
            checkpoints: default_checkpoints(horizon, &[100, 200, 1_000, 10_000]),
            output_dir: None,
            base_seed: 0,
            log_ratio: default_log_ratio(),
            level: default_level(),
            slope_window: default_slope_window(),
        })
    }

    pub fn preset_names() -> &'static [&'static str] {
        &["stable-paper", "unstable-bad-k0", "unstable-good-k0"]
    }

    /// Change the horizon and rebuild the checkpoint grid with it.
    pub fn set_horizon(&mut self, horizon: usize) {
        self.algo.horizon = horizon;
        let extra: Vec<usize> = self
            .checkpoints
            .iter()
            .copied()
            .filter(|&c| c < horizon)
            .collect();
        self.checkpoints = default_checkpoints(horizon, &extra);
    }

    /// Structural checks plus the algorithm's own validation. Returns the
    /// algorithm's warnings.
    pub fn validate(&self) -> Result<Vec<crate::controller::ConfigWarning>> {
        let params = self.system.params();
        params.validate()?;
        if self.n_runs == 0 {
            return Err(LqacError::InvalidConfig("n_runs must be at least 1".into()));
        }
        if self.variants.is_empty() {
            return Err(LqacError::InvalidConfig("no variants selected".into()));
        }
        if self.checkpoints.is_empty() {
            return Err(LqacError::InvalidConfig("no checkpoints".into()));
        }
        if self.checkpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(LqacError::InvalidConfig(
                "checkpoints must be strictly increasing".into(),
            ));
        }
        if self.checkpoints[0] < 2 || *self.checkpoints.last().unwrap() > self.algo.horizon {
            return Err(LqacError::InvalidConfig(format!(
                "checkpoints must lie in [2, {}]",
                self.algo.horizon
            )));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(LqacError::InvalidConfig(format!(
                "level must lie in (0, 1), got {}",
                self.level
            )));
        }
        if !(self.log_ratio > 1.0) {
            return Err(LqacError::InvalidConfig(format!(
                "log_ratio must exceed 1, got {}",
                self.log_ratio
            )));
        }
        self.algo.validate(&params)
    }

    fn config_for(&self, variant: Variant, run: usize) -> AlgoConfig {
        let mut cfg = self.algo.clone();
        cfg.seed = self.base_seed.wrapping_add(run as u64);
        cfg.schedule = match variant {
            Variant::Logarithmic => Schedule::Logarithmic {
                ratio: self.log_ratio,
            },
            _ => Schedule::Stepwise,
        };
        cfg
    }
}

/// One run of one variant together with its per-checkpoint statistics.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub variant: Variant,
    pub run: usize,
    pub seed: u64,
    pub record: RunRecord,
    pub stats: Vec<SnapshotStatistics>,
}

impl RunOutput {
    pub fn snapshot(&self, t: usize) -> Option<&EstimatorSnapshot> {
        self.record.snapshots.iter().find(|s| s.t == t)
    }

    pub fn stats_at(&self, t: usize) -> Option<&SnapshotStatistics> {
        self.stats.iter().find(|s| s.t == t)
    }

    /// Average regret over steps `1..=t`.
    pub fn average_regret(&self, t: usize) -> Option<f64> {
        self.snapshot(t)
            .map(|s| (s.cost_cum - s.cost_cum_oracle) / t as f64)
    }
}

/// Simulate one run and evaluate its snapshots.
pub fn simulate_run(
    plan: &ExperimentPlan,
    params: &SystemParams,
    sol: &DareSolution,
    variant: Variant,
    run: usize,
) -> Result<RunOutput> {
    let cfg = plan.config_for(variant, run);
    let opts = RunOptions {
        checkpoints: plan.checkpoints.clone(),
        record_trajectory: false,
    };
    let record = match variant {
        Variant::Thompson => run_thompson(params, &cfg, &opts)?,
        _ => run_adaptive(params, &cfg, &opts)?,
    };
    let stats = record
        .snapshots
        .iter()
        .map(|s| inference::snapshot_statistics(s, params, sol, &cfg))
        .collect();
    Ok(RunOutput {
        variant,
        run,
        seed: cfg.seed,
        record,
        stats,
    })
}

/// Run every `(variant, run)` pair on a pool of `jobs` threads. Outputs are
/// ordered by variant, then run index, independent of scheduling.
pub fn simulate_batch(plan: &ExperimentPlan, jobs: Option<usize>) -> Result<Vec<RunOutput>> {
    plan.validate()?;
    let params = plan.system.params();
    let sol = lqr::solve_dare(&params, lqr::DEFAULT_DARE_TOL, lqr::DEFAULT_DARE_MAX_ITER)?;
    let tasks: Vec<(Variant, usize)> = plan
        .variants
        .iter()
        .flat_map(|&v| (0..plan.n_runs).map(move |r| (v, r)))
        .collect();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        builder = builder.num_threads(j.max(1));
    }
    let pool = builder
        .build()
        .map_err(|e| LqacError::InvalidConfig(format!("thread pool: {e}")))?;
    pool.install(|| {
        tasks
            .par_iter()
            .map(|&(v, r)| simulate_run(plan, &params, &sol, v, r))
            .collect()
    })
}

/// One line of the raw CSV table. `NaN` marks a statistic that could not be
/// evaluated, or a checkpoint the run never reached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub run: usize,
    pub variant: String,
    pub t: usize,
    pub cost_cum: f64,
    pub cost_cum_oracle: f64,
    pub stat_ab: f64,
    pub stat_k: f64,
    pub stat_pred_full: f64,
    pub stat_pred_naive: f64,
    pub stat_pred_mean: f64,
    #[serde(rename = "err_A")]
    pub err_a: f64,
    #[serde(rename = "err_B")]
    pub err_b: f64,
    #[serde(rename = "err_K")]
    pub err_k: f64,
    pub err_fast: f64,
    pub reset_count: usize,
    pub seed: u64,
}

pub const CSV_COLUMNS: [&str; 16] = [
    "run",
    "variant",
    "t",
    "cost_cum",
    "cost_cum_oracle",
    "stat_ab",
    "stat_k",
    "stat_pred_full",
    "stat_pred_naive",
    "stat_pred_mean",
    "err_A",
    "err_B",
    "err_K",
    "err_fast",
    "reset_count",
    "seed",
];

impl CsvRow {
    pub fn statistic(&self, kind: RegionKind) -> f64 {
        match kind {
            RegionKind::Ab => self.stat_ab,
            RegionKind::K => self.stat_k,
            RegionKind::PredictFull => self.stat_pred_full,
            RegionKind::PredictNaive => self.stat_pred_naive,
            RegionKind::PredictMean => self.stat_pred_mean,
        }
    }
}

pub fn csv_rows(outputs: &[RunOutput], checkpoints: &[usize]) -> Vec<CsvRow> {
    let mut rows = Vec::with_capacity(outputs.len() * checkpoints.len());
    for out in outputs {
        for &t in checkpoints {
            let row = match (out.snapshot(t), out.stats_at(t)) {
                (Some(snap), Some(st)) => CsvRow {
                    run: out.run,
                    variant: out.variant.name().into(),
                    t,
                    cost_cum: snap.cost_cum,
                    cost_cum_oracle: snap.cost_cum_oracle,
                    stat_ab: st.stat_ab,
                    stat_k: st.stat_k,
                    stat_pred_full: st.stat_pred_full,
                    stat_pred_naive: st.stat_pred_naive,
                    stat_pred_mean: st.stat_pred_mean,
                    err_a: st.err_a,
                    err_b: st.err_b,
                    err_k: st.err_k,
                    err_fast: st.err_fast,
                    reset_count: snap.reset_count,
                    seed: out.seed,
                },
                _ => CsvRow {
                    run: out.run,
                    variant: out.variant.name().into(),
                    t,
                    cost_cum: f64::NAN,
                    cost_cum_oracle: f64::NAN,
                    stat_ab: f64::NAN,
                    stat_k: f64::NAN,
                    stat_pred_full: f64::NAN,
                    stat_pred_naive: f64::NAN,
                    stat_pred_mean: f64::NAN,
                    err_a: f64::NAN,
                    err_b: f64::NAN,
                    err_k: f64::NAN,
                    err_fast: f64::NAN,
                    reset_count: out.record.reset_count,
                    seed: out.seed,
                },
            };
            rows.push(row);
        }
    }
    rows
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub median: f64,
    pub q05: f64,
    pub q95: f64,
    pub n: usize,
}

impl Quantiles {
    pub fn of(values: &[f64]) -> Quantiles {
        let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        Quantiles {
            median: stats::median(&finite).unwrap_or(f64::NAN),
            q05: stats::quantile(&finite, 0.05).unwrap_or(f64::NAN),
            q95: stats::quantile(&finite, 0.95).unwrap_or(f64::NAN),
            n: finite.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub fraction: f64,
    pub std_error: f64,
    /// Runs with a valid statistic.
    pub n: usize,
    /// Runs whose statistic could not be evaluated; counted as not covered
    /// for the K region and excluded otherwise.
    pub failed: usize,
}

/// Coverage of one region kind over runs.
pub fn coverage(statistics: &[f64], threshold: f64, failures_uncovered: bool) -> Coverage {
    let failed = statistics.iter().filter(|s| !s.is_finite()).count();
    let covered = statistics
        .iter()
        .filter(|s| s.is_finite() && **s <= threshold)
        .count();
    let n = if failures_uncovered {
        statistics.len()
    } else {
        statistics.len() - failed
    };
    let fraction = if n == 0 {
        f64::NAN
    } else {
        covered as f64 / n as f64
    };
    Coverage {
        fraction,
        std_error: stats::binomial_se(fraction, n),
        n,
        failed,
    }
}

/// Per-checkpoint coverage by region kind.
pub fn coverage_series(
    outputs: &[RunOutput],
    checkpoints: &[usize],
    n: usize,
    d: usize,
    level: f64,
) -> Result<Vec<(usize, BTreeMap<String, Coverage>)>> {
    let mut thresholds = BTreeMap::new();
    for kind in RegionKind::ALL {
        thresholds.insert(kind, inference::region_threshold(kind, n, d, level)?);
    }
    Ok(checkpoints
        .iter()
        .map(|&t| {
            let rows: Vec<&SnapshotStatistics> =
                outputs.iter().filter_map(|o| o.stats_at(t)).collect();
            let map = RegionKind::ALL
                .iter()
                .map(|&kind| {
                    let s: Vec<f64> = rows.iter().map(|r| stat_of(r, kind)).collect();
                    let cov = coverage(&s, thresholds[&kind], kind == RegionKind::K);
                    (kind.name().to_string(), cov)
                })
                .collect();
            (t, map)
        })
        .collect())
}

fn stat_of(s: &SnapshotStatistics, kind: RegionKind) -> f64 {
    match kind {
        RegionKind::Ab => s.stat_ab,
        RegionKind::K => s.stat_k,
        RegionKind::PredictFull => s.stat_pred_full,
        RegionKind::PredictNaive => s.stat_pred_naive,
        RegionKind::PredictMean => s.stat_pred_mean,
    }
}

/// Parametric and observable regret ratios at a checkpoint, one pair per
/// run; the observable ratio is `NaN` when the estimate is not
/// stabilizable.
pub fn regret_ratios(
    outputs: &[RunOutput],
    params: &SystemParams,
    sol: &DareSolution,
    algo: &AlgoConfig,
    t: usize,
) -> (Vec<f64>, Vec<f64>) {
    let param = asymptotics::parametric_regret(params, sol, algo, t);
    outputs
        .iter()
        .filter_map(|o| {
            let regret = o.average_regret(t)?;
            let snap = o.snapshot(t)?;
            let obs = asymptotics::observable_regret_at(&snap.a_hat, &snap.b_hat, params, algo, t)
                .map(|v| regret / v)
                .unwrap_or(f64::NAN);
            Some((regret / param, obs))
        })
        .unzip()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretRatioPoint {
    pub t: usize,
    pub parametric: Quantiles,
    pub observable: Quantiles,
}

pub fn regret_ratio_series(
    outputs: &[RunOutput],
    params: &SystemParams,
    sol: &DareSolution,
    algo: &AlgoConfig,
    checkpoints: &[usize],
) -> Vec<RegretRatioPoint> {
    checkpoints
        .iter()
        .map(|&t| {
            let (p, o) = regret_ratios(outputs, params, sol, algo, t);
            RegretRatioPoint {
                t,
                parametric: Quantiles::of(&p),
                observable: Quantiles::of(&o),
            }
        })
        .collect()
}

/// OLS slope of `log y` on `log t` over points with `t` in `window`.
pub fn fit_loglog_slope(values: &[(usize, f64)], window: (usize, usize)) -> Result<f64> {
    let pts: Vec<(f64, f64)> = values
        .iter()
        .filter(|(t, _)| *t >= window.0 && *t <= window.1)
        .map(|&(t, y)| (t as f64, y))
        .collect();
    if pts.len() < 3 {
        return Err(LqacError::InsufficientPoints {
            needed: 3,
            got: pts.len(),
        });
    }
    if pts.iter().any(|(_, y)| !(*y > 0.0) || !y.is_finite()) {
        return Err(LqacError::DomainError(
            "log-log fit needs positive finite values".into(),
        ));
    }
    let x: Vec<f64> = pts.iter().map(|(t, _)| t.ln()).collect();
    let y: Vec<f64> = pts.iter().map(|(_, y)| y.ln()).collect();
    Ok(stats::ols(&x, &y)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSummary {
    pub t: usize,
    pub runs: usize,
    pub coverage: BTreeMap<String, Coverage>,
    pub regret_ratio_parametric: Quantiles,
    pub regret_ratio_observable: Quantiles,
    pub mean_average_regret: f64,
    pub mean_err_a: f64,
    pub mean_err_b: f64,
    pub mean_err_k: f64,
    pub mean_err_fast: f64,
    pub mean_err_ab: f64,
    /// Median `||D_t^{-1} G_t D_t^{-T} - I||_F`.
    pub gram_deviation_median: f64,
    pub mean_reset_count: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFits {
    pub window: (usize, usize),
    /// `||A_hat - A + (B_hat - B) K||`.
    pub fast: Option<f64>,
    /// `||B_hat - B|| log^{alpha/2}(t)`: the `t` power with the log factor
    /// of the rate removed.
    pub b: Option<f64>,
    pub k: Option<f64>,
    pub ab: Option<f64>,
    /// `||B_hat - B|| / log^{alpha/2}(t)`, for comparison.
    pub b_divided: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedDifference {
    pub t: usize,
    pub pairs: usize,
    /// Mean of (stepwise - logarithmic) average regret.
    pub mean: f64,
    pub std_error: f64,
    /// One-sided normal-approximation p-value for `mean > 0`.
    pub p_value_positive: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub failures: usize,
    pub checkpoints: Vec<CheckpointSummary>,
    pub slopes: SlopeFits,
    /// Diagonal of `t R(U, t) Cov(vec(B_hat - B))` at the last checkpoint
    /// and its limit value.
    pub tradeoff_diagonal: Vec<f64>,
    pub tradeoff_limit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub plan: ExperimentPlan,
    pub build: String,
    pub variants: Vec<VariantSummary>,
    pub paired: Option<PairedDifference>,
    pub verdicts: Vec<Verdict>,
}

impl BatchSummary {
    pub fn variant(&self, v: Variant) -> Option<&VariantSummary> {
        self.variants.iter().find(|s| s.variant == v)
    }

    pub fn all_passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.passed)
    }
}

/// Build identifier recorded in summaries.
pub fn build_id() -> String {
    option_env!("LQAC_GIT_DESCRIBE")
        .filter(|s| !s.is_empty())
        .unwrap_or("unknown")
        .to_string()
}

fn mean_of(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.filter(|x| x.is_finite()).collect();
    stats::mean(&v).unwrap_or(f64::NAN)
}

/// Reduce the outputs of one variant.
pub fn summarize_variant(
    plan: &ExperimentPlan,
    params: &SystemParams,
    sol: &DareSolution,
    variant: Variant,
    outputs: &[RunOutput],
) -> Result<VariantSummary> {
    let (n, d) = (params.n(), params.d());
    let algo = &plan.algo;
    let cov = coverage_series(outputs, &plan.checkpoints, n, d, plan.level)?;
    let ratios = regret_ratio_series(outputs, params, sol, algo, &plan.checkpoints);
    let mut checkpoints = Vec::with_capacity(plan.checkpoints.len());
    for ((&t, (_, coverage)), ratio) in plan.checkpoints.iter().zip(cov).zip(ratios) {
        let st: Vec<&SnapshotStatistics> = outputs.iter().filter_map(|o| o.stats_at(t)).collect();
        let norm = build_normalizer(params, sol, algo, t)?;
        let deviations: Vec<f64> = outputs
            .iter()
            .filter_map(|o| o.snapshot(t))
            .filter_map(|s| norm.normalize_gram(&s.gram).ok())
            .map(|m| (m - DMatrix::identity(n + d, n + d)).norm())
            .collect();
        checkpoints.push(CheckpointSummary {
            t,
            runs: st.len(),
            coverage,
            regret_ratio_parametric: ratio.parametric,
            regret_ratio_observable: ratio.observable,
            mean_average_regret: mean_of(outputs.iter().filter_map(|o| o.average_regret(t))),
            mean_err_a: mean_of(st.iter().map(|s| s.err_a)),
            mean_err_b: mean_of(st.iter().map(|s| s.err_b)),
            mean_err_k: mean_of(st.iter().map(|s| s.err_k)),
            mean_err_fast: mean_of(st.iter().map(|s| s.err_fast)),
            mean_err_ab: mean_of(st.iter().map(|s| s.err_a.hypot(s.err_b))),
            gram_deviation_median: stats::median(&deviations).unwrap_or(f64::NAN),
            mean_reset_count: mean_of(
                outputs
                    .iter()
                    .filter_map(|o| o.snapshot(t))
                    .map(|s| s.reset_count as f64),
            ),
        });
    }

    let half_alpha = algo.alpha / 2.0;
    let series = |f: &dyn Fn(&CheckpointSummary) -> f64| -> Vec<(usize, f64)> {
        checkpoints.iter().map(|c| (c.t, f(c))).collect()
    };
    let fit = |pts: Vec<(usize, f64)>| fit_loglog_slope(&pts, plan.slope_window).ok();
    let log_pow = |t: usize| (t as f64).ln().powf(half_alpha);
    let slopes = SlopeFits {
        window: plan.slope_window,
        fast: fit(series(&|c| c.mean_err_fast)),
        b: fit(series(&|c| c.mean_err_b * log_pow(c.t))),
        k: fit(series(&|c| c.mean_err_k * log_pow(c.t))),
        ab: fit(series(&|c| c.mean_err_ab * log_pow(c.t))),
        b_divided: fit(series(&|c| c.mean_err_b / log_pow(c.t))),
    };

    let last = *plan.checkpoints.last().unwrap();
    let mut regrets = Vec::new();
    let mut b_errors = Vec::new();
    for o in outputs {
        if let (Some(r), Some(s)) = (o.average_regret(last), o.snapshot(last)) {
            regrets.push(r);
            b_errors.push(&s.b_hat - &params.b);
        }
    }
    let tradeoff_diagonal = asymptotics::tradeoff_product(&regrets, &b_errors, last)
        .map(|m| m.diagonal().iter().copied().collect())
        .unwrap_or_default();
    let tradeoff_limit = asymptotics::tradeoff_limit(params, sol)
        .get((0, 0))
        .copied()
        .unwrap_or(f64::NAN);

    Ok(VariantSummary {
        variant,
        failures: outputs
            .iter()
            .filter(|o| o.record.failure.is_some())
            .count(),
        checkpoints,
        slopes,
        tradeoff_diagonal,
        tradeoff_limit,
    })
}

/// Per-seed difference of average regret between two variants.
pub fn paired_difference(
    first: &[RunOutput],
    second: &[RunOutput],
    t: usize,
) -> Option<PairedDifference> {
    let by_seed: BTreeMap<u64, f64> = second
        .iter()
        .filter_map(|o| Some((o.seed, o.average_regret(t)?)))
        .collect();
    let diffs: Vec<f64> = first
        .iter()
        .filter_map(|o| Some(o.average_regret(t)? - by_seed.get(&o.seed)?))
        .filter(|d| d.is_finite())
        .collect();
    if diffs.len() < 2 {
        return None;
    }
    let mean = stats::mean(&diffs)?;
    let se = (stats::variance(&diffs)? / diffs.len() as f64).sqrt();
    let z = if se > 0.0 { mean / se } else { 0.0 };
    let normal = statrs::distribution::Normal::standard();
    let p = 1.0 - statrs::distribution::ContinuousCDF::cdf(&normal, z);
    Some(PairedDifference {
        t,
        pairs: diffs.len(),
        mean,
        std_error: se,
        p_value_positive: p,
    })
}

/// Checks at the last checkpoint that apply to any batch.
pub fn evaluate_verdicts(summary: &BatchSummary) -> Vec<Verdict> {
    let mut out = Vec::new();
    let beta = summary.plan.algo.beta;
    for vs in &summary.variants {
        if vs.variant == Variant::Thompson {
            continue;
        }
        let name = vs.variant.name();
        let Some(last) = vs.checkpoints.last() else {
            continue;
        };
        for kind in ["ab", "k", "pred_mean", "pred_full"] {
            if let Some(c) = last.coverage.get(kind) {
                out.push(Verdict {
                    name: format!("{name}: coverage {kind} at t={}", last.t),
                    passed: (0.90..=0.98).contains(&c.fraction),
                    value: c.fraction,
                    detail: "within [0.90, 0.98]".into(),
                });
            }
        }
        let ratio = last.regret_ratio_parametric.median;
        out.push(Verdict {
            name: format!("{name}: median regret ratio at T={}", last.t),
            passed: (0.7..=1.3).contains(&ratio),
            value: ratio,
            detail: "within [0.7, 1.3]".into(),
        });
        let obs = last.regret_ratio_observable.median;
        let rel = (obs / ratio - 1.0).abs();
        out.push(Verdict {
            name: format!("{name}: observable vs parametric ratio medians"),
            passed: rel <= 0.15,
            value: rel,
            detail: "relative gap <= 0.15".into(),
        });
        if let Some(s) = vs.slopes.fast {
            out.push(Verdict {
                name: format!("{name}: fast-direction slope"),
                passed: (s + 0.5).abs() <= 0.1,
                value: s,
                detail: "-0.5 +/- 0.1".into(),
            });
        }
        if let Some(s) = vs.slopes.b {
            out.push(Verdict {
                name: format!("{name}: B error slope"),
                passed: (s + beta / 2.0).abs() <= 0.1,
                value: s,
                detail: format!("{:.3} +/- 0.1", -beta / 2.0),
            });
        }
    }
    if let Some(p) = &summary.paired {
        out.push(Verdict {
            name: format!("stepwise - log mean regret at T={}", p.t),
            passed: p.mean <= 0.0,
            value: p.mean,
            detail: format!("<= 0 (se {:.3e}, p {:.3})", p.std_error, p.p_value_positive),
        });
    }
    out
}

pub fn summarize(plan: &ExperimentPlan, outputs: &[RunOutput]) -> Result<BatchSummary> {
    let params = plan.system.params();
    let sol = lqr::solve_dare(&params, lqr::DEFAULT_DARE_TOL, lqr::DEFAULT_DARE_MAX_ITER)?;
    let mut variants = Vec::new();
    let mut grouped: BTreeMap<Variant, Vec<RunOutput>> = BTreeMap::new();
    for o in outputs {
        grouped.entry(o.variant).or_default().push(o.clone());
    }
    for &v in &plan.variants {
        if let Some(outs) = grouped.get(&v) {
            variants.push(summarize_variant(plan, &params, &sol, v, outs)?);
        }
    }
    let last = *plan.checkpoints.last().unwrap();
    let paired = match (
        grouped.get(&Variant::Stepwise),
        grouped.get(&Variant::Logarithmic),
    ) {
        (Some(s), Some(l)) => paired_difference(s, l, last),
        _ => None,
    };
    let mut summary = BatchSummary {
        plan: plan.clone(),
        build: build_id(),
        variants,
        paired,
        verdicts: vec![],
    };
    summary.verdicts = evaluate_verdicts(&summary);
    Ok(summary)
}

/// Write `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| LqacError::Io(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn csv_bytes(rows: &[CsvRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(CSV_COLUMNS)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| LqacError::Io(e.to_string()))
}

pub fn read_csv(path: &Path) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if headers != CSV_COLUMNS {
        return Err(LqacError::Io(format!(
            "unexpected CSV header in {}",
            path.display()
        )));
    }
    r.deserialize().map(|row| row.map_err(Into::into)).collect()
}

/// Everything a batch produces.
#[derive(Debug, Clone)]
pub struct BatchResult {
    pub summary: BatchSummary,
    pub rows: Vec<CsvRow>,
    pub outputs: Vec<RunOutput>,
}

pub const RAW_CSV: &str = "runs.csv";
pub const SUMMARY_JSON: &str = "summary.json";

/// Simulate, summarize and, when the plan names an output directory,
/// write `runs.csv` and `summary.json` there.
pub fn run_batch(plan: &ExperimentPlan, jobs: Option<usize>) -> Result<BatchResult> {
    let outputs = simulate_batch(plan, jobs)?;
    let summary = summarize(plan, &outputs)?;
    let rows = csv_rows(&outputs, &plan.checkpoints);
    if let Some(dir) = &plan.output_dir {
        write_atomic(&dir.join(RAW_CSV), &csv_bytes(&rows)?)?;
        let json = serde_json::to_vec_pretty(&summary)?;
        write_atomic(&dir.join(SUMMARY_JSON), &json)?;
    }
    Ok(BatchResult {
        summary,
        rows,
        outputs,
    })
}
