use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lqac::experiments::{self, ExperimentPlan, SystemSpec, Variant};
use lqac::inference::{region_threshold, RegionKind};
use lqac::lqr::{self, SystemParams};
use lqac::LqacError;
use serde_json::json;

const EXIT_CONFIG: u8 = 1;
const EXIT_CHECK: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(
    name = "lqac",
    version,
    about = "Noisy certainty-equivalent LQ adaptive control experiments",
    allow_negative_numbers = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a Monte-Carlo batch and write runs.csv / summary.json.
    Run(RunArgs),
    /// Solve the Riccati equation and print P, K and the gain Jacobian.
    Dare(SystemArgs),
    /// Recompute region coverage from a raw runs.csv at a chosen level.
    Region(RegionArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Named preset (stable-paper, unstable-bad-k0, unstable-good-k0).
    #[arg(long, conflicts_with = "plan")]
    preset: Option<String>,
    /// JSON experiment plan.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    /// Seed of run 0; run i uses seed + i.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Variants to run (stepwise, log, thompson); repeatable.
    #[arg(long = "variant")]
    variants: Vec<String>,
    #[arg(long)]
    level: Option<f64>,
    /// Exit with status 2 if any summary check fails.
    #[arg(long)]
    check: bool,
}

#[derive(Args)]
struct SystemArgs {
    /// Built-in system: stable or unstable.
    #[arg(long, default_value = "stable", conflicts_with = "params")]
    system: String,
    /// JSON file with a, b, q, r (row-major nested arrays) and sigma.
    #[arg(long)]
    params: Option<PathBuf>,
}

#[derive(Args)]
struct RegionArgs {
    /// Raw CSV written by `lqac run`.
    #[arg(long)]
    csv: PathBuf,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Region kinds (ab, k, pred_full, pred_naive, pred_mean); default all.
    #[arg(long = "kind")]
    kinds: Vec<String>,
    /// State dimension of the system that produced the CSV.
    #[arg(long, default_value_t = 2)]
    n: usize,
    /// Input dimension of the system that produced the CSV.
    #[arg(long, default_value_t = 1)]
    d: usize,
}

enum Failure {
    Config(String),
    Check(String),
    Numeric(String),
}

impl From<LqacError> for Failure {
    fn from(e: LqacError) -> Self {
        match e {
            LqacError::NotStabilizable
            | LqacError::NoConvergence { .. }
            | LqacError::NotStable(_)
            | LqacError::SingularClosedLoop
            | LqacError::SingularGram
            | LqacError::SingularWeight => Failure::Numeric(e.to_string()),
            _ => Failure::Config(e.to_string()),
        }
    }
}

fn load_plan(args: &RunArgs) -> Result<ExperimentPlan, Failure> {
    let mut plan = match (&args.preset, &args.plan) {
        (_, Some(path)) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?
        }
        (Some(name), None) => ExperimentPlan::preset(name).ok_or_else(|| {
            Failure::Config(format!(
                "unknown preset {name:?}; expected one of {}",
                ExperimentPlan::preset_names().join(", ")
            ))
        })?,
        (None, None) => ExperimentPlan::preset("stable-paper").expect("built-in preset"),
    };
    if let Some(n) = args.runs {
        plan.n_runs = n;
    }
    if let Some(h) = args.horizon {
        plan.set_horizon(h);
    }
    if let Some(b) = args.beta {
        plan.algo.beta = b;
    }
    if let Some(a) = args.alpha {
        plan.algo.alpha = a;
    }
    if let Some(t) = args.tau {
        plan.algo.tau = t;
    }
    if let Some(s) = args.seed {
        plan.base_seed = s;
    }
    if let Some(l) = args.level {
        plan.level = l;
    }
    if args.out.is_some() {
        plan.output_dir = args.out.clone();
    }
    if !args.variants.is_empty() {
        plan.variants = args
            .variants
            .iter()
            .map(|s| {
                Variant::parse(s).ok_or_else(|| Failure::Config(format!("unknown variant {s:?}")))
            })
            .collect::<Result<_, _>>()?;
    }
    Ok(plan)
}

fn run(args: RunArgs) -> Result<(), Failure> {
    let plan = load_plan(&args)?;
    for w in plan.validate()? {
        eprintln!("warning: {w}");
    }
    let result = experiments::run_batch(&plan, args.jobs)?;
    let summary = &result.summary;
    for vs in &summary.variants {
        println!("{}: {} failed runs", vs.variant.name(), vs.failures);
        if let Some(last) = vs.checkpoints.last() {
            let cov: Vec<String> = last
                .coverage
                .iter()
                .map(|(k, c)| format!("{k} {:.3}", c.fraction))
                .collect();
            println!("  t={} coverage: {}", last.t, cov.join(", "));
            println!(
                "  t={} median regret ratio {:.3} (observable {:.3})",
                last.t, last.regret_ratio_parametric.median, last.regret_ratio_observable.median
            );
        }
    }
    let mut failed = 0;
    for v in &summary.verdicts {
        println!(
            "{} {}: {:.4} ({})",
            if v.passed { "ok  " } else { "FAIL" },
            v.name,
            v.value,
            v.detail
        );
        failed += usize::from(!v.passed);
    }
    if let Some(dir) = &plan.output_dir {
        println!(
            "wrote {} and {}",
            dir.join(experiments::RAW_CSV).display(),
            dir.join(experiments::SUMMARY_JSON).display()
        );
    }
    if args.check && failed > 0 {
        return Err(Failure::Check(format!("{failed} check(s) failed")));
    }
    Ok(())
}

fn rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn dare(args: SystemArgs) -> Result<(), Failure> {
    let params: SystemParams = match &args.params {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
            let p: SystemParams = serde_json::from_str(&text)
                .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
            p.validate()?;
            p
        }
        None => match args.system.as_str() {
            "stable" => SystemSpec::StablePaper.params(),
            "unstable" => SystemSpec::UnstablePaperGoodK0.params(),
            other => return Err(Failure::Config(format!("unknown system {other:?}"))),
        },
    };
    let sol = lqr::solve_dare(&params, lqr::DEFAULT_DARE_TOL, lqr::DEFAULT_DARE_MAX_ITER)?;
    let jac = lqr::gain_jacobian(&params, &sol)?;
    let closed = &params.a + &params.b * &sol.k;
    let out = json!({
        "p": rows(&sol.p),
        "k": rows(&sol.k),
        "residual": sol.residual,
        "iterations": sol.iterations,
        "closed_loop_spectral_radius": lqr::spectral_radius(&closed),
        "jacobian": rows(&jac.matrix),
    });
    println!(
        "{}",
        serde_json::to_string_pretty(&out).expect("serializable")
    );
    Ok(())
}

fn region(args: RegionArgs) -> Result<(), Failure> {
    if !(args.level > 0.0 && args.level < 1.0) {
        return Err(Failure::Config(format!(
            "level {} not in (0, 1)",
            args.level
        )));
    }
    let kinds: Vec<RegionKind> = if args.kinds.is_empty() {
        RegionKind::ALL.to_vec()
    } else {
        args.kinds
            .iter()
            .map(|s| {
                RegionKind::parse(s).ok_or_else(|| Failure::Config(format!("unknown region {s:?}")))
            })
            .collect::<Result<_, _>>()?
    };
    let table = experiments::read_csv(&args.csv)?;
    let mut keys: Vec<(String, usize)> = table.iter().map(|r| (r.variant.clone(), r.t)).collect();
    keys.sort();
    keys.dedup();
    println!("variant,t,region,threshold,coverage,std_error,n");
    for (variant, t) in keys {
        let group: Vec<_> = table
            .iter()
            .filter(|r| r.variant == variant && r.t == t)
            .collect();
        for &kind in &kinds {
            let thr = region_threshold(kind, args.n, args.d, args.level)?;
            let values: Vec<f64> = group.iter().map(|r| r.statistic(kind)).collect();
            let c = experiments::coverage(&values, thr, kind == RegionKind::K);
            println!(
                "{variant},{t},{},{thr:.6},{:.4},{:.4},{}",
                kind.name(),
                c.fraction,
                c.std_error,
                c.n
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage errors are configuration errors; exit status 2 is reserved
            // for failed checks.
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Dare(a) => dare(a),
        Command::Region(a) => region(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Check(m)) => {
            eprintln!("check failed: {m}");
            ExitCode::from(EXIT_CHECK)
        }
        Err(Failure::Numeric(m)) => {
            eprintln!("numerical failure: {m}");
            ExitCode::from(EXIT_NUMERIC)
        }
    }
}
