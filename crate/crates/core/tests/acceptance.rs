//! Acceptance gate. Prints one PASS/FAIL line per criterion, with detail
//! lines underneath, and a final tally. Failures are reported, not hidden:
//! the process exits 0 so the rest of the test suite still runs, and the
//! tally line states how many criteria failed.

use std::time::{Duration, Instant};

use lqac::asymptotics::build_normalizer;
use lqac::controller::EstimatorState;
use lqac::experiments::{
    self, paired_difference, summarize_variant, ExperimentPlan, RunOutput, Variant,
};
use lqac::inference::normalized_estimation_error;
use lqac::lqr::{self, DareOptions, SystemParams};
use lqac::stats;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Gate {
    passed: usize,
    failed: Vec<String>,
}

impl Gate {
    fn report(&mut self, name: &str, ok: bool, summary: String, details: &[String]) {
        println!("{} {name}: {summary}", if ok { "PASS" } else { "FAIL" });
        for d in details {
            println!("     {d}");
        }
        if ok {
            self.passed += 1;
        } else {
            self.failed.push(name.to_string());
        }
    }

    fn info(&self, name: &str, text: String) {
        println!("INFO {name}: {text}");
    }
}

fn normal_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

fn random_system(rng: &mut ChaCha8Rng) -> SystemParams {
    loop {
        let n = rng.random_range(1..=4);
        let d = rng.random_range(1..=3);
        let a = normal_matrix(rng, n, n, 0.6);
        let b = normal_matrix(rng, n, d, 1.0);
        let mq = normal_matrix(rng, n, n, 0.5);
        let mr = normal_matrix(rng, d, d, 0.5);
        let q = DMatrix::identity(n, n) + &mq * mq.transpose();
        let r = DMatrix::identity(d, d) + &mr * mr.transpose();
        if lqr::is_stabilizable(&a, &b, lqr::HAUTUS_RANK_TOL) {
            return SystemParams::new(a, b, q, r, 1.0).unwrap();
        }
    }
}

fn riccati_map(p: &SystemParams, x: &DMatrix<f64>) -> DMatrix<f64> {
    let (a, b) = (&p.a, &p.b);
    let s = &p.r + b.transpose() * x * b;
    let g = s.try_inverse().unwrap() * b.transpose() * x * a;
    a.transpose() * x * a - a.transpose() * x * b * g + &p.q
}

fn check_dare(gate: &mut Gate) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let systems: Vec<SystemParams> = (0..100).map(|_| random_system(&mut rng)).collect();
    let start = Instant::now();
    let sols: Vec<_> = systems
        .iter()
        .map(|s| lqr::solve_dare(s, lqr::DEFAULT_DARE_TOL, lqr::DEFAULT_DARE_MAX_ITER))
        .collect();
    let elapsed = start.elapsed();
    let mut worst_res = 0.0f64;
    let mut worst_rho = 0.0f64;
    let mut errors = 0;
    for (s, sol) in systems.iter().zip(&sols) {
        match sol {
            Ok(sol) => {
                worst_res = worst_res.max((riccati_map(s, &sol.p) - &sol.p).norm());
                worst_rho = worst_rho.max(lqr::spectral_radius(&(&s.a + &s.b * &sol.k)));
            }
            Err(_) => errors += 1,
        }
    }
    let stable = experiments::stable_system();
    let k = lqr::solve_dare(&stable, lqr::DEFAULT_DARE_TOL, lqr::DEFAULT_DARE_MAX_ITER)
        .unwrap()
        .k;
    let k_ok = (k[(0, 0)] + 0.10).abs() <= 0.01 && (k[(0, 1)] + 0.48).abs() <= 0.01;
    let ok = errors == 0
        && worst_res < 1e-10
        && worst_rho < 1.0
        && k_ok
        && elapsed < Duration::from_secs(1);
    gate.report(
        "DARE correctness",
        ok,
        format!(
            "max residual {worst_res:.2e} (< 1e-10), max rho {worst_rho:.4} (< 1), K = [{:.4}, {:.4}], {:.0} ms",
            k[(0, 0)],
            k[(0, 1)],
            elapsed.as_secs_f64() * 1e3
        ),
        &[format!("{errors} of 100 random systems failed to solve")],
    );
}

/// Gain from a DARE iterated until the iterate stops changing.
fn tight_gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> DMatrix<f64> {
    let sol = lqr::solve_dare_with(
        a,
        b,
        q,
        r,
        &DareOptions {
            tol: 1e-13,
            max_iter: 200_000,
            initial: None,
            check_stabilizable: false,
        },
    )
    .or_else(|_| {
        lqr::solve_dare_with(
            a,
            b,
            q,
            r,
            &DareOptions {
                tol: 1e-11,
                max_iter: 200_000,
                initial: None,
                check_stabilizable: false,
            },
        )
    })
    .unwrap();
    sol.k
}

fn fd_jacobian(p: &SystemParams, h: f64) -> DMatrix<f64> {
    let (n, d) = (p.n(), p.d());
    let theta = lqac::linalg::hstack(&p.a, &p.b);
    let mut jac = DMatrix::zeros(n * d, n * (n + d));
    for j in 0..n * (n + d) {
        let mut plus = theta.clone();
        let mut minus = theta.clone();
        plus[(j % n, j / n)] += h;
        minus[(j % n, j / n)] -= h;
        let kp = tight_gain(
            &plus.columns(0, n).into_owned(),
            &plus.columns(n, d).into_owned(),
            &p.q,
            &p.r,
        );
        let km = tight_gain(
            &minus.columns(0, n).into_owned(),
            &minus.columns(n, d).into_owned(),
            &p.q,
            &p.r,
        );
        let col = (kp - km) / (2.0 * h);
        jac.column_mut(j).copy_from_slice(col.as_slice());
    }
    jac
}

fn check_jacobian(gate: &mut Gate) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut systems: Vec<SystemParams> = (0..20).map(|_| random_system(&mut rng)).collect();
    systems.push(experiments::stable_system());
    systems.push(experiments::unstable_system());
    let start = Instant::now();
    let jacs: Vec<_> = systems
        .iter()
        .map(|s| {
            let sol = lqr::solve_dare(s, 1e-12, 100_000).unwrap();
            lqr::gain_jacobian(s, &sol).unwrap()
        })
        .collect();
    let elapsed = start.elapsed();
    let mut worst = 0.0f64;
    for (s, j) in systems.iter().zip(&jacs) {
        let fd = fd_jacobian(s, 1e-6);
        worst = worst.max((&j.matrix - &fd).norm() / fd.norm().max(1e-12));
    }
    let rank = lqac::linalg::numerical_rank(&jacs[20].matrix, 1e-9);
    let ok = worst < 1e-5 && rank == 2 && elapsed < Duration::from_secs(5);
    gate.report(
        "Gain Jacobian",
        ok,
        format!(
            "max relative error vs central differences {worst:.2e} (< 1e-5), rank {rank} (= 2) on the stable system, {:.0} ms",
            elapsed.as_secs_f64() * 1e3
        ),
        &[],
    );
}

fn check_rls(gate: &mut Gate) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let start = Instant::now();
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..=3);
        let d = rng.random_range(1..=2);
        let p = n + d;
        let steps = rng.random_range(p..=p + 60);
        let theta = normal_matrix(&mut rng, n, p, 1.0);
        let mut est = EstimatorState::new(n, d, &DMatrix::zeros(d, n));
        let mut zs = DMatrix::zeros(steps, p);
        let mut ys = DMatrix::zeros(steps, n);
        for k in 0..steps {
            let z = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
            let y = &theta * &z
                + DVector::from_fn(n, |_, _| 0.3 * rng.sample::<f64, _>(StandardNormal));
            est.rls_update(&z, &y);
            zs.row_mut(k).copy_from(&z.transpose());
            ys.row_mut(k).copy_from(&y.transpose());
            if k + 1 >= p {
                let batch = zs
                    .rows(0, k + 1)
                    .into_owned()
                    .svd(true, true)
                    .solve(&ys.rows(0, k + 1).into_owned(), 1e-12)
                    .unwrap()
                    .transpose();
                let err = (est.theta() - &batch).norm() / batch.norm().max(1.0);
                worst = worst.max(err);
            }
        }
    }
    let elapsed = start.elapsed();
    gate.report(
        "RLS equivalence",
        worst < 1e-8 && elapsed < Duration::from_secs(10),
        format!(
            "max deviation from batch least squares {worst:.2e} (< 1e-8) over 1000 streams, {:.2} s",
            elapsed.as_secs_f64()
        ),
        &[],
    );
}

fn run_plan(plan: &ExperimentPlan) -> (Vec<RunOutput>, Duration) {
    let start = Instant::now();
    let outs = experiments::simulate_batch(plan, None).expect("batch runs");
    (outs, start.elapsed())
}

fn stable_plan(
    runs: usize,
    beta: f64,
    alpha: f64,
    seed: u64,
    variants: Vec<Variant>,
) -> ExperimentPlan {
    let mut plan = ExperimentPlan::preset("stable-paper").unwrap();
    plan.n_runs = runs;
    plan.algo.beta = beta;
    plan.algo.alpha = alpha;
    plan.base_seed = seed;
    plan.variants = variants;
    plan
}

fn main() {
    let mut gate = Gate {
        passed: 0,
        failed: vec![],
    };
    check_dare(&mut gate);
    check_jacobian(&mut gate);
    check_rls(&mut gate);

    let params = experiments::stable_system();
    let sol = lqr::solve_dare(&params, lqr::DEFAULT_DARE_TOL, lqr::DEFAULT_DARE_MAX_ITER).unwrap();
    let horizon = 10_000;

    // Main stable batch: beta = 1/2, alpha = 2, 500 runs.
    let plan = stable_plan(500, 0.5, 2.0, 10_000, vec![Variant::Stepwise]);
    let (outs, elapsed) = run_plan(&plan);
    let per_run = elapsed.as_secs_f64() / outs.len() as f64;
    let summary = summarize_variant(&plan, &params, &sol, Variant::Stepwise, &outs).unwrap();
    let at = |t: usize| summary.checkpoints.iter().find(|c| c.t == t).unwrap();

    // Gram normalization.
    let (g100, g10k) = (
        at(100).gram_deviation_median,
        at(horizon).gram_deviation_median,
    );
    gate.report(
        "Gram normalization decay",
        g10k < g100,
        format!("median ||D^-1 G D^-T - I||_F: {g100:.3} at t=100, {g10k:.3} at t=10^4"),
        &[],
    );

    // Regret ratio.
    let last = at(horizon);
    let pr = last.regret_ratio_parametric;
    let or = last.regret_ratio_observable;
    let gap = (or.median / pr.median - 1.0).abs();
    let finite_sum: f64 = (1..=horizon)
        .map(|t| lqac::controller::schedule_factor(0.5, 2.0, t))
        .sum::<f64>()
        / horizon as f64
        / lqac::controller::schedule_factor(0.5, 2.0, horizon)
        * 0.5;
    gate.report(
        "Regret ratio",
        (0.7..=1.3).contains(&pr.median) && gap <= 0.15,
        format!(
            "median empirical/parametric {:.3} (in [0.7, 1.3]), observable {:.3}, gap {:.3} (<= 0.15)",
            pr.median, or.median, gap
        ),
        &[
            format!("5%-95% band parametric [{:.3}, {:.3}], observable [{:.3}, {:.3}]", pr.q05, pr.q95, or.q05, or.q95),
            format!(
                "ratio of the finite-horizon exploration sum to its asymptotic form at T=10^4: {finite_sum:.3}"
            ),
        ],
    );

    // Slopes, beta = 1/2 and beta = 0.9.
    let plan09 = stable_plan(200, 0.9, 0.0, 20_000, vec![Variant::Stepwise]);
    let (outs09, _) = run_plan(&plan09);
    let summary09 = summarize_variant(&plan09, &params, &sol, Variant::Stepwise, &outs09).unwrap();
    let mut slope_ok = true;
    let mut details = vec![];
    for (beta, s) in [(0.5, &summary.slopes), (0.9, &summary09.slopes)] {
        let fast = s.fast.unwrap_or(f64::NAN);
        let b = s.b.unwrap_or(f64::NAN);
        let ok = (fast + 0.5).abs() <= 0.1 && (b + beta / 2.0).abs() <= 0.1;
        slope_ok &= ok;
        details.push(format!(
            "beta={beta}: fast {fast:.3} (-0.5 +/- 0.1), B with log factor removed {b:.3} ({:.2} +/- 0.1); B divided by log^(alpha/2) {:.3}; K {:.3}; [A,B] {:.3}",
            -beta / 2.0,
            s.b_divided.unwrap_or(f64::NAN),
            s.k.unwrap_or(f64::NAN),
            s.ab.unwrap_or(f64::NAN)
        ));
    }
    gate.report(
        "Estimation error slopes",
        slope_ok,
        "log-log fits over t in [10^3, 10^4]".into(),
        &details,
    );

    // Coverage.
    let cov = &last.coverage;
    let frac = |k: &str| cov[k].fraction;
    let band = |x: f64| (0.90..=0.98).contains(&x);
    let c100 = &at(100).coverage;
    let cov_ok = ["ab", "k", "pred_mean", "pred_full"]
        .iter()
        .all(|k| band(frac(k)))
        && c100["pred_full"].fraction >= c100["pred_naive"].fraction;
    gate.report(
        "Coverage",
        cov_ok,
        format!(
            "t=10^4: ab {:.3}, k {:.3}, mean {:.3}, full {:.3} (each in [0.90, 0.98]); t=100: full {:.3} >= naive {:.3}",
            frac("ab"),
            frac("k"),
            frac("pred_mean"),
            frac("pred_full"),
            c100["pred_full"].fraction,
            c100["pred_naive"].fraction
        ),
        &[format!(
            "t=10^4 naive {:.3}; K-region statistics that failed to evaluate: {}",
            frac("pred_naive"),
            cov["k"].failed
        )],
    );

    // Distributional checks.
    let norm = build_normalizer(&params, &sol, &plan.algo, horizon).unwrap();
    let mut est_cols: Vec<Vec<f64>> = vec![vec![]; 6];
    let mut pred_cols: Vec<Vec<f64>> = vec![vec![]; 2];
    for o in &outs {
        if let (Some(s), Some(st)) = (o.snapshot(horizon), o.stats_at(horizon)) {
            let v = normalized_estimation_error(&s.a_hat, &s.b_hat, &params, &norm.d_t);
            for (c, x) in est_cols.iter_mut().zip(v.iter()) {
                c.push(*x);
            }
            for (c, x) in pred_cols.iter_mut().zip(&st.pred_standardized) {
                c.push(*x);
            }
        }
    }
    let tests = est_cols.len() + pred_cols.len();
    let level = 0.01 / tests as f64;
    let mut ks_ok = true;
    let mut ks_details = vec![];
    for (label, cols) in [("estimation", &est_cols), ("prediction", &pred_cols)] {
        let mut line = format!("{label}:");
        for c in cols.iter() {
            let r = stats::ks_standard_normal(c);
            ks_ok &= r.p_value >= level;
            line.push_str(&format!(
                " [D {:.3}, p {:.2e}, sd {:.2}]",
                r.statistic,
                r.p_value,
                stats::variance(c).unwrap_or(f64::NAN).sqrt()
            ));
        }
        ks_details.push(line);
    }
    gate.report(
        "Distributional checks",
        ks_ok,
        format!("{tests} componentwise KS tests vs N(0,1) at t=10^4, each at level {level:.2e}"),
        &ks_details,
    );

    // Stepwise vs logarithmic, paired seeds.
    let plan_log = stable_plan(200, 0.5, 2.0, 10_000, vec![Variant::Logarithmic]);
    let (outs_log, _) = run_plan(&plan_log);
    let paired = paired_difference(&outs[..200], &outs_log, horizon).unwrap();
    gate.report(
        "Stepwise vs logarithmic updates",
        paired.mean <= 0.0 && paired.pairs == 200,
        format!(
            "mean paired regret difference {:.4} (<= 0) over {} pairs, se {:.4}, one-sided p(mean > 0) {:.3}",
            paired.mean, paired.pairs, paired.std_error, paired.p_value_positive
        ),
        &[],
    );

    // Unstable system.
    let unstable = |name: &str, horizon: usize| {
        let mut p = ExperimentPlan::preset(name).unwrap();
        p.n_runs = 200;
        p.algo.alpha = 0.0;
        p.variants = vec![Variant::Stepwise];
        p.base_seed = 30_000;
        p.set_horizon(horizon);
        p
    };
    let bad_plan = unstable("unstable-bad-k0", 200);
    let good_plan = unstable("unstable-good-k0", 5_000);
    let (bad, _) = run_plan(&bad_plan);
    let (good, _) = run_plan(&good_plan);
    let early = |o: &RunOutput| o.snapshot(200).map(|s| s.cost_cum).unwrap_or(f64::INFINITY);
    let bad_med = stats::median(&bad.iter().map(early).collect::<Vec<_>>()).unwrap();
    let good_med = stats::median(&good.iter().map(early).collect::<Vec<_>>()).unwrap();
    let diverged = good
        .iter()
        .filter(|o| o.record.failure.is_some() || !o.record.max_state_norm.is_finite())
        .count();
    let complete = good.iter().all(|o| o.record.recorded_horizon() == 5_000);
    gate.report(
        "Unstable system",
        bad_med >= 10.0 * good_med && diverged == 0 && complete,
        format!(
            "median cost over steps 1..200: bad K0 {bad_med:.3e}, good K0 {good_med:.3e}, ratio {:.1} (>= 10); good K0 diverged in {diverged} of 200 runs over 5000 steps",
            bad_med / good_med
        ),
        &[],
    );

    // Desk-scale throughput.
    let projected = per_run * 1000.0 / 60.0;
    gate.report(
        "Desk-scale reproduction",
        projected < 60.0,
        format!(
            "{:.1} ms per 10^4-step run on {} thread(s); 1000 runs project to {projected:.1} min (< 60)",
            per_run * 1e3,
            rayon::current_num_threads()
        ),
        &[],
    );

    // Diagnostics without a pass criterion.
    gate.info(
        "Trade-off product",
        format!(
            "diagonal of t R(U,t) Cov(vec(B_hat - B)) at t=10^4: {:?}; limit {:.3}",
            summary
                .tradeoff_diagonal
                .iter()
                .map(|v| format!("{v:.3}"))
                .collect::<Vec<_>>(),
            summary.tradeoff_limit
        ),
    );
    let fast_var: Vec<String> = (0..2)
        .map(|i| {
            let comps: Vec<f64> = outs
                .iter()
                .filter_map(|o| o.snapshot(horizon))
                .map(|s| {
                    lqac::inference::fast_direction_scaled(
                        &s.a_hat, &s.b_hat, &params, &sol.k, &norm.c_t, horizon, 0.5, 2.0,
                    )
                    .unwrap()[(i, 0)]
                })
                .collect();
            format!("{:.3}", stats::variance(&comps).unwrap())
        })
        .collect();
    gate.info(
        "Fast-direction variances",
        format!("first column at t=10^4: {fast_var:?} (limit 1)"),
    );

    println!(
        "acceptance: {} passed, {} failed{}",
        gate.passed,
        gate.failed.len(),
        if gate.failed.is_empty() {
            String::new()
        } else {
            format!(" ({})", gate.failed.join("; "))
        }
    );
}
